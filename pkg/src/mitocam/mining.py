"""Active-learning rounds: cross-reference window predictions with ground
truth, mine false-positive / false-negative / hard-negative patches, retrain.
"""

from __future__ import annotations

import copy
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .augment import AugmentConfig
from .cam import Detection, detect_from_scored
from .dataset import Annotation, DatasetSplit, Patch, PatchSet, RoiImage, crop_patch
from .evaluation import match_detections, prf1
from .inference import InferenceConfig, ScoredWindow, WindowBox, score_windows, threshold_windows, tile_image
from .model import Classifier, load_checkpoint, save_checkpoint
from .training import TrainConfig, train_round

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class WindowOutcome:
    window: WindowBox
    probability: float
    outcome: str


@dataclass
class MiningConfig:
    hard_negative_band: tuple[float, float | None] = (0.5, None)
    max_false_positives: int = 100
    max_false_negatives: int = 100
    max_hard_negatives: int = 50
    max_rounds: int = 6
    duplicate_radius: float = 15.0
    reinitialize: bool = False

    def band(self, prob_threshold: float) -> tuple[float, float]:
        low, high = self.hard_negative_band
        return float(low), float(prob_threshold if high is None else high)

    def validate(self):
        low, high = self.hard_negative_band
        if not 0.0 <= low <= 1.0 or (high is not None and not low <= high <= 1.0):
            raise ValueError("hard_negative_band must be a subinterval of [0, 1]")
        if min(self.max_false_positives, self.max_false_negatives, self.max_hard_negatives) < 0:
            raise ValueError("per-image caps must be >= 0")
        if self.max_rounds < 1:
            raise ValueError("max_rounds must be >= 1")


@dataclass
class RoundReport:
    round: int
    added: dict[str, int]
    train_size: int
    val_size: int
    val_detection_f1: float
    val_precision: float = 0.0
    val_recall: float = 0.0
    checkpoint_id: str = ""
    selected_epoch: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def _mitoses(annotations: Sequence[Annotation]) -> list[Annotation]:
    return [a for a in annotations if a.category == "mitosis"]


def cross_reference(positive_windows: Sequence[ScoredWindow], annotations: Sequence[Annotation]
                    ) -> tuple[list[WindowOutcome], list[Annotation]]:
    """Label positive windows TP/FP and list mitoses no positive window contains."""
    mitoses = _mitoses(annotations)
    outcomes = []
    covered = [False] * len(mitoses)
    for s in positive_windows:
        hit = False
        for i, a in enumerate(mitoses):
            if s.box.contains(a.x, a.y):
                hit = True
                covered[i] = True
        outcomes.append(WindowOutcome(s.box, s.probability, "true_positive" if hit else "false_positive"))
    missed = [a for a, c in zip(mitoses, covered) if not c]
    return outcomes, missed


def _is_duplicate(center, label, image_id, existing: Sequence[Patch], radius: float) -> bool:
    for p in existing:
        if p.source_image == image_id and p.label == label and \
                np.hypot(p.center[0] - center[0], p.center[1] - center[1]) < radius:
            return True
    return False


def mine_patches(outcomes: Sequence[WindowOutcome], missed: Sequence[Annotation],
                 all_scored: Sequence[ScoredWindow], image: RoiImage, config: MiningConfig, round_: int,
                 annotations: Sequence[Annotation] = (), prob_threshold: float = 0.84,
                 patch_size: int = 240, existing: Sequence[Patch] = ()) -> list[Patch]:
    """Patches for one image, capped per kind.

    False positives and hard negatives are taken in descending probability;
    missed mitoses in ascending probability of their best covering window.
    A candidate within ``duplicate_radius`` of an existing same-label patch
    from the same image is skipped.
    """
    mitoses = _mitoses(annotations) if annotations else []
    seen = list(existing)
    mined: list[Patch] = []

    def add(center, label, provenance):
        if _is_duplicate(center, label, image.id, seen, config.duplicate_radius):
            return False
        p = Patch(crop_patch(image, center, patch_size), label, image.id,
                  (float(center[0]), float(center[1])), provenance, round_)
        mined.append(p)
        seen.append(p)
        return True

    fps = sorted((o for o in outcomes if o.outcome == "false_positive"),
                 key=lambda o: (-o.probability, o.window.y, o.window.x))
    taken = 0
    for o in fps:
        if taken >= config.max_false_positives:
            break
        taken += add(o.window.center, "negative", "false_positive")

    def best_cover(a):
        probs = [s.probability for s in all_scored if s.box.contains(a.x, a.y)]
        return max(probs) if probs else 0.0

    fns = sorted(missed, key=lambda a: (best_cover(a), a.y, a.x))
    taken = 0
    for a in fns:
        if taken >= config.max_false_negatives:
            break
        taken += add((float(a.x), float(a.y)), "positive", "false_negative")

    low, high = config.band(prob_threshold)
    hard = [s for s in all_scored
            if low <= s.probability < high and s.probability <= prob_threshold
            and not any(s.box.contains(a.x, a.y) for a in mitoses)]
    hard.sort(key=lambda s: (-s.probability, s.box.y, s.box.x))
    taken = 0
    for s in hard:
        if taken >= config.max_hard_negatives:
            break
        taken += add(s.box.center, "negative", "hard_negative")
    return mined


@dataclass
class ImageScan:
    image_id: str
    scored: list[ScoredWindow]
    detections: list[Detection] = field(default_factory=list)


def scan_image(model: Classifier, image: RoiImage, inference: InferenceConfig) -> list[ScoredWindow]:
    windows = tile_image(image.width, image.height, inference.window, inference.step)
    return score_windows(model, image.pixels, windows, inference.batch_size)


def detection_f1(model, images: Sequence[RoiImage], annotations: Sequence[Annotation],
                 inference: InferenceConfig, cam_threshold: float, radius: float,
                 scans: dict[str, list[ScoredWindow]] | None = None) -> tuple[float, float, float, dict]:
    """Pooled detection P/R/F1 over ``images``; also returns detections per image."""
    by_image = _group(annotations)
    tp = fp = fn = 0
    dets = {}
    for im in images:
        scored = scans[im.id] if scans and im.id in scans else scan_image(model, im, inference)
        d = detect_from_scored(model, im.pixels, scored, inference, cam_threshold)
        m = match_detections(d, _mitoses(by_image.get(im.id, [])), radius)
        tp, fp, fn = tp + m.tp, fp + m.fp, fn + m.fn
        dets[im.id] = d
    p, r, f = prf1(tp, fp, fn)
    return p, r, f, dets


def _group(annotations):
    out: dict[str, list[Annotation]] = {}
    for a in annotations:
        out.setdefault(a.image_id, []).append(a)
    return out


def _save_state(out: Path, state: dict, train: PatchSet, val: PatchSet):
    train.save(out / "patches" / "train")
    val.save(out / "patches" / "val")
    (out / "rounds.json").write_text(json.dumps(state["reports"], indent=1, sort_keys=True))
    (out / "loop_state.json").write_text(json.dumps(state, indent=1, sort_keys=True))


def run_active_loop(images: Sequence[RoiImage], annotations: Sequence[Annotation], split: DatasetSplit,
                    patch_sets: dict[str, PatchSet], model_factory: Callable[[], Classifier],
                    train_config: TrainConfig | None = None, mining_config: MiningConfig | None = None,
                    augment: AugmentConfig | None = None, inference: InferenceConfig | None = None,
                    cam_threshold: float = 0.5, radius: float = 30.0, output_dir: str | Path | None = None,
                    resume: bool = False) -> tuple[list[RoundReport], Classifier]:
    """Train / scan / mine until val detection F1 stops increasing or ``max_rounds``.

    Returns the round reports and the model from the best-F1 round (earliest
    on ties). ``patch_sets`` are extended in place. With ``output_dir`` every round's checkpoint, patch manifests
    and reports are persisted; ``resume`` continues from the last finished round.
    """
    train_config = train_config or TrainConfig()
    mining_config = mining_config or MiningConfig()
    inference = inference or InferenceConfig()
    mining_config.validate()
    inference.validate()
    train_set, val_set = patch_sets["train"], patch_sets["val"]
    by_image = _group(annotations)
    ordered = sorted(images, key=lambda im: im.id)
    val_images = [im for im in ordered if im.id in split.val_images]
    out = Path(output_dir) if output_dir else None

    reports: list[RoundReport] = []
    best_f1, best_round, best_state = -1.0, 0, None
    model = model_factory()
    start = 1
    if out and resume and (out / "loop_state.json").exists():
        state = json.loads((out / "loop_state.json").read_text())
        reports = [RoundReport(**r) for r in state["reports"]]
        train_set.patches[:] = PatchSet.load(out / "patches" / "train").patches
        val_set.patches[:] = PatchSet.load(out / "patches" / "val").patches
        best_round, best_f1 = state["best_round"], state["best_f1"]
        model = load_checkpoint(out / f"round_{len(reports)}" / "checkpoint")
        best_state = copy.deepcopy(load_checkpoint(out / f"round_{best_round}" / "checkpoint").state_dict())
        if state.get("finished"):
            model.load_state_dict(best_state)
            return reports, model
        start = len(reports) + 1
        log.info("resuming after round %d", len(reports))

    for rnd in range(start, mining_config.max_rounds + 1):
        if rnd > 1 and mining_config.reinitialize:
            model = model_factory()
        cfg = replace(train_config, seed=train_config.seed + 1000 * rnd)
        round_dir = out / f"round_{rnd}" if out else None
        if round_dir:
            round_dir.mkdir(parents=True, exist_ok=True)
        result = train_round(train_set, val_set, model, cfg, augment,
                             log_path=round_dir / "train_log.jsonl" if round_dir else None,
                             checkpoint_dir=round_dir / "checkpoint" if round_dir else None)

        scans = {im.id: scan_image(model, im, inference) for im in ordered
                 if im.id in split.train_images or im.id in split.val_images}
        p, r, f1, _ = detection_f1(model, val_images, annotations, inference, cam_threshold, radius, scans)
        report = RoundReport(rnd, {}, len(train_set), len(val_set), f1, p, r,
                             result.best_checkpoint_id, result.selected_epoch)
        reports.append(report)
        log.info("round %d: train %d val %d val detection F1 %.4f", rnd, len(train_set), len(val_set), f1)

        improved = f1 > best_f1 if rnd == 1 else f1 > reports[-2].val_detection_f1
        if f1 > best_f1:
            best_f1, best_round = f1, rnd
            best_state = copy.deepcopy(model.state_dict())
        finished = not improved or rnd == mining_config.max_rounds

        if not finished:
            added: dict[str, int] = {}
            for im in ordered:
                if im.id not in scans:
                    continue
                target = train_set if im.id in split.train_images else val_set
                anns = by_image.get(im.id, [])
                positives = threshold_windows(scans[im.id], inference.prob_threshold)
                outcomes, missed = cross_reference(positives, anns)
                mined = mine_patches(outcomes, missed, scans[im.id], im, mining_config, rnd, anns,
                                     inference.prob_threshold, inference.window,
                                     [p_ for p_ in target.patches if p_.source_image == im.id])
                target.extend(mined)
                for p_ in mined:
                    added[p_.provenance] = added.get(p_.provenance, 0) + 1
            report.added = dict(sorted(added.items()))

        if out:
            _save_state(out, {"reports": [r_.to_dict() for r_ in reports], "best_round": best_round,
                              "best_f1": best_f1, "best_checkpoint": reports[best_round - 1].checkpoint_id,
                              "finished": finished}, train_set, val_set)
        if finished:
            break

    model.load_state_dict(best_state)
    model.eval()
    if out:
        save_checkpoint(model, out / "best_checkpoint")
    return reports, model


def audit_leakage(train: PatchSet, val: PatchSet, split: DatasetSplit) -> bool:
    """True when every patch comes from an image of its own split."""
    return train.source_images() <= split.train_images and val.source_images() <= split.val_images
