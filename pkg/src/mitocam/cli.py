"""Command-line entry point: ``mitocam --config cfg.json <command> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import synthetic
from .cam import detect, gradcampp
from .config import ConfigError, PipelineConfig, dump_config, parse_config
from .dataset import DatasetError, DatasetSplit, ExtractConfig, PatchSet, RoiImage, extract_initial_patches, \
    load_dataset, split_dataset
from .evaluation import match_detections, per_domain_report, render_overlay, write_report, format_table
from .inference import score_windows, tile_image, write_scored_windows
from .io import read_detections_dir, write_detections
from .mining import audit_leakage, run_active_loop
from .model import Classifier, build_model, build_tiny_cnn, default_descriptor, load_checkpoint, save_checkpoint
from .training import train_round

log = logging.getLogger("mitocam")


def model_factory(cfg: PipelineConfig):
    m = cfg.model

    def make() -> Classifier:
        if m.arch == "tiny_cnn":
            return build_tiny_cnn(m.seed, m.num_ranks, m.input_size, m.channels, m.coords)
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(m.seed)
            return build_model(default_descriptor(m.arch, num_ranks=m.num_ranks, input_size=m.input_size)).eval()
    return make


def extract_config(cfg: PipelineConfig) -> ExtractConfig:
    d = cfg.dataset
    return ExtractConfig(d.patch_size, d.random_negatives_per_unlabeled, d.random_negatives_per_labeled,
                         d.min_distance, d.use_imposters, cfg.split.seed)


def _dataset(cfg: PipelineConfig, args):
    ann = args.dataset or cfg.dataset.annotation_file
    if not ann:
        raise ConfigError("dataset.annotation_file is not set (or pass --dataset)")
    return load_dataset(ann, args.image_dir or cfg.dataset.image_dir)


def _split(cfg, images, args) -> DatasetSplit:
    if getattr(args, "split", None):
        return DatasetSplit.from_dict(json.loads(Path(args.split).read_text()))
    return split_dataset(images, cfg.split.val_fraction, cfg.split.seed)


def _select(images, ids):
    if not ids:
        return images
    wanted = set(ids)
    missing = wanted - {im.id for im in images}
    if missing:
        raise DatasetError(f"unknown image ids: {sorted(missing)}")
    return [im for im in images if im.id in wanted]


def cmd_extract(cfg, args, out: Path) -> None:
    images, annotations = _dataset(cfg, args)
    split = _split(cfg, images, args)
    sets = extract_initial_patches(images, annotations, split, extract_config(cfg))
    (out / "split.json").write_text(json.dumps(split.to_dict(), indent=1))
    for name, ps in sets.items():
        ps.save(out / "patches" / name)
        log.info("%s: %d patches %s", name, len(ps), ps.counts())


def _patch_sets(cfg, args):
    if args.patches:
        root = Path(args.patches)
        return {"train": PatchSet.load(root / "train"), "val": PatchSet.load(root / "val")}
    images, annotations = _dataset(cfg, args)
    return extract_initial_patches(images, annotations, _split(cfg, images, args), extract_config(cfg))


def cmd_train(cfg, args, out: Path) -> None:
    sets = _patch_sets(cfg, args)
    model = load_checkpoint(args.checkpoint) if args.checkpoint else model_factory(cfg)()
    result = train_round(sets["train"], sets["val"], model, cfg.train, cfg.augment,
                         log_path=out / "train_log.jsonl", checkpoint_dir=out / "checkpoint")
    (out / "round_result.json").write_text(json.dumps(
        {"best_checkpoint_id": result.best_checkpoint_id, "selected_epoch": result.selected_epoch,
         "history": result.history}, indent=1))
    log.info("selected epoch %d, checkpoint %s", result.selected_epoch, result.best_checkpoint_id)


def cmd_mine_loop(cfg, args, out: Path) -> None:
    images, annotations = _dataset(cfg, args)
    split = _split(cfg, images, args)
    (out / "split.json").write_text(json.dumps(split.to_dict(), indent=1))
    sets = extract_initial_patches(images, annotations, split, extract_config(cfg))
    reports, model = run_active_loop(images, annotations, split, sets, model_factory(cfg), cfg.train,
                                     cfg.mining, cfg.augment, cfg.inference, cfg.cam_threshold,
                                     cfg.evaluation.radius, output_dir=out / "loop", resume=args.resume)
    if not audit_leakage(sets["train"], sets["val"], split):
        raise RuntimeError("patch leakage between train and val images")
    save_checkpoint(model, out / "best_checkpoint")
    (out / "rounds.json").write_text(json.dumps([r.to_dict() for r in reports], indent=1, sort_keys=True))
    det_dir = out / "detections"
    det_dir.mkdir(exist_ok=True)
    for im in sorted(images, key=lambda im: im.id):
        if im.id in split.val_images:
            write_detections(detect(im.pixels, model, cfg.inference, cfg.cam_threshold),
                             det_dir / f"{im.id}.json", im.id)
    for r in reports:
        log.info("round %d: train %d val %d F1 %.4f added %s", r.round, r.train_size, r.val_size,
                 r.val_detection_f1, r.added)


def _infer_images(cfg, args) -> list[RoiImage]:
    if args.image:
        from PIL import Image

        paths = [Path(p) for p in args.image]
        for p in paths:
            if not p.exists():
                raise DatasetError(f"missing raster {p}")
        return [RoiImage(p.stem, np.asarray(Image.open(p).convert("RGB")).copy(), None, False, p.name)
                for p in paths]
    images, _ = _dataset(cfg, args)
    return _select(images, args.images)


def cmd_infer(cfg, args, out: Path) -> None:
    if not Path(args.checkpoint).exists():
        raise FileNotFoundError(f"checkpoint {args.checkpoint} does not exist")
    model = load_checkpoint(args.checkpoint)
    det_dir = out / "detections"
    det_dir.mkdir(exist_ok=True)
    for im in _infer_images(cfg, args):
        dets = detect(im.pixels, model, cfg.inference, cfg.cam_threshold)
        write_detections(dets, det_dir / f"{im.id}.json", im.id)
        if args.dump_windows:
            windows = tile_image(im.width, im.height, cfg.inference.window, cfg.inference.step)
            write_scored_windows(score_windows(model, im.pixels, windows, cfg.inference.batch_size),
                                 det_dir / f"{im.id}.windows.jsonl")
        log.info("%s: %d detections", im.id, len(dets))


def cmd_evaluate(cfg, args, out: Path) -> None:
    images, annotations = _dataset(cfg, args)
    dets = read_detections_dir(args.detections)
    if not dets:
        raise FileNotFoundError(f"no detection files in {args.detections}")
    by_type: dict[str, list] = {}
    known = {im.id: im for im in images}
    for image_id in sorted(dets):
        if image_id not in known:
            raise DatasetError(f"detections for unknown image {image_id!r}")
        gt = [a for a in annotations if a.image_id == image_id and a.category == "mitosis"]
        m = match_detections(dets[image_id], gt, cfg.evaluation.radius)
        by_type.setdefault(known[image_id].tumor_type or "all", []).append(m)
    rows = per_domain_report(by_type)
    write_report(rows, out / "report.json")
    print(format_table(rows))


def cmd_overlay(cfg, args, out: Path) -> None:
    images, annotations = _dataset(cfg, args)
    dets = read_detections_dir(args.detections)
    model = load_checkpoint(args.checkpoint) if args.checkpoint else None
    ov = out / "overlays"
    ov.mkdir(exist_ok=True)
    for im in _select(images, args.images):
        if im.id not in dets:
            continue
        cams = []
        if model is not None:
            for d in dets[im.id]:
                x0 = int(min(max(0, round(d.x - cfg.inference.window / 2)), im.width - cfg.inference.window))
                y0 = int(min(max(0, round(d.y - cfg.inference.window / 2)), im.height - cfg.inference.window))
                from .inference import WindowBox
                box = WindowBox(x0, y0, cfg.inference.window)
                cams.append(gradcampp(model, im.pixels[y0:y0 + box.size, x0:x0 + box.size], box))
        gt = [a for a in annotations if a.image_id == im.id and a.category == "mitosis"]
        render_overlay(im.pixels, dets[im.id], gt, ov / f"{im.id}.png", cams, args.cam_weight)


def cmd_synth(cfg, args, out: Path) -> None:
    spec = synthetic.FixtureSpec(n_images=args.n_images, image_size=args.image_size, seed=args.seed,
                                 unlabeled_fraction=args.unlabeled_fraction,
                                 label_noise_fraction=args.label_noise, margin=args.margin,
                                 min_separation=args.min_separation)
    if args.multi_object is not None:
        spec.n_images = 1
        fixture = synthetic.plant_multi_object_window(spec, args.multi_object)
    else:
        fixture = synthetic.generate_fixture(spec)
    path = synthetic.write_fixture(*fixture, out)
    log.info("fixture written to %s", path)


COMMANDS = {"extract": cmd_extract, "train": cmd_train, "mine-loop": cmd_mine_loop, "infer": cmd_infer,
            "evaluate": cmd_evaluate, "overlay": cmd_overlay, "synth": cmd_synth}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mitocam", description="CNN + GradCAM++ mitosis detection pipeline")
    parser.add_argument("--config", required=True, help="pipeline config JSON")
    parser.add_argument("--workers", type=int, default=os.cpu_count() or 1, help="cap on CPU threads")
    parser.add_argument("--output", default="out", help="output directory")
    parser.add_argument("--log-level", default="INFO")
    sub = parser.add_subparsers(dest="command", required=True)

    def data_args(p):
        p.add_argument("--dataset", help="dataset JSON (overrides dataset.annotation_file)")
        p.add_argument("--image-dir", help="raster directory (overrides dataset.image_dir)")

    p = sub.add_parser("extract", help="split images and write initial patch manifests")
    data_args(p)
    p.add_argument("--split", help="reuse a split.json instead of splitting")

    p = sub.add_parser("train", help="train one round and write its checkpoint")
    data_args(p)
    p.add_argument("--split")
    p.add_argument("--patches", help="directory holding train/ and val/ patch manifests")
    p.add_argument("--checkpoint", help="start from this checkpoint")

    p = sub.add_parser("mine-loop", help="multi-round active learning")
    data_args(p)
    p.add_argument("--split")
    p.add_argument("--resume", action="store_true", help="continue from the last finished round")

    p = sub.add_parser("infer", help="write a detections file per image")
    data_args(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--images", nargs="*", help="restrict to these image ids")
    p.add_argument("--image", nargs="*", help="raw raster files instead of a dataset")
    p.add_argument("--dump-windows", action="store_true", help="also write scored windows as JSON lines")

    p = sub.add_parser("evaluate", help="score detections against ground truth")
    data_args(p)
    p.add_argument("--detections", required=True)

    p = sub.add_parser("overlay", help="render detections, ground truth and optional CAMs")
    data_args(p)
    p.add_argument("--detections", required=True)
    p.add_argument("--checkpoint", help="blend CAMs from this model")
    p.add_argument("--images", nargs="*")
    p.add_argument("--cam-weight", type=float, default=0.4)

    p = sub.add_parser("synth", help="write a synthetic fixture dataset")
    p.add_argument("--n-images", type=int, default=20)
    p.add_argument("--image-size", type=int, default=1200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--unlabeled-fraction", type=float, default=0.1)
    p.add_argument("--label-noise", type=float, default=0.0)
    p.add_argument("--margin", type=int, default=20, help="min distance from planted centers to the border")
    p.add_argument("--min-separation", type=float, default=60.0, help="min distance between planted centers")
    p.add_argument("--multi-object", type=float, default=None, metavar="SEPARATION")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.INFO),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = parse_config(args.config)
        torch.set_num_threads(max(1, args.workers))
        out = Path(args.output)
        out.mkdir(parents=True, exist_ok=True)
        echo = dump_config(cfg)
        (out / "effective_config.json").write_text(echo + "\n")
        log.info("effective config:\n%s", echo)
        COMMANDS[args.command](cfg, args, out)
    except (ConfigError, DatasetError, FileNotFoundError, OSError, ValueError, RuntimeError) as exc:
        print(f"mitocam {args.command}: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
