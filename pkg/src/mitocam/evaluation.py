"""Distance-matched detection scoring and overlay rendering."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from PIL import Image, ImageDraw


@dataclass
class MatchResult:
    tp: int
    fp: int
    fn: int
    pairs: list[tuple[int, int, float]] = field(default_factory=list)


def _xy(p):
    if hasattr(p, "x"):
        return float(p.x), float(p.y)
    return float(p[0]), float(p[1])


def match_detections(detections: Sequence, annotations: Sequence, radius: float = 30.0) -> MatchResult:
    """Greedy one-to-one matching by ascending distance.

    Pairs are ``(detection index, annotation index, distance)``. Distance ties
    are broken by detection index, then annotation index.
    """
    det = np.array([_xy(d) for d in detections], dtype=float).reshape(-1, 2)
    ann = np.array([_xy(a) for a in annotations], dtype=float).reshape(-1, 2)
    candidates = []
    if len(det) and len(ann):
        dist = np.hypot(det[:, None, 0] - ann[None, :, 0], det[:, None, 1] - ann[None, :, 1])
        ii, jj = np.nonzero(dist <= radius)
        candidates = sorted(zip(dist[ii, jj].tolist(), ii.tolist(), jj.tolist()))
    used_d, used_a, pairs = set(), set(), []
    for d, i, j in candidates:
        if i in used_d or j in used_a:
            continue
        used_d.add(i)
        used_a.add(j)
        pairs.append((i, j, d))
    tp = len(pairs)
    return MatchResult(tp, len(det) - tp, len(ann) - tp, pairs)


def prf1(tp: int, fp: int, fn: int) -> tuple[float, float, float]:
    if min(tp, fp, fn) < 0:
        raise ValueError("counts must be nonnegative")
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    return precision, recall, f1_from_pr(precision, recall)


def f1_from_pr(precision: float, recall: float) -> float:
    return 2 * precision * recall / (precision + recall) if precision + recall else 0.0


def per_domain_report(results: Mapping[str, Sequence[MatchResult]]) -> list[dict]:
    """Micro-averaged rows per group plus a final ``overall`` row."""
    if not results:
        raise ValueError("no groups to report")
    rows = []
    totals = [0, 0, 0, 0]
    for group in sorted(results):
        members = results[group]
        if not members:
            raise ValueError(f"group {group!r} is empty")
        tp = sum(m.tp for m in members)
        fp = sum(m.fp for m in members)
        fn = sum(m.fn for m in members)
        p, r, f = prf1(tp, fp, fn)
        rows.append({"group": group, "precision": p, "recall": r, "f1": f, "n_images": len(members),
                     "tp": tp, "fp": fp, "fn": fn})
        for i, v in enumerate((tp, fp, fn, len(members))):
            totals[i] += v
    p, r, f = prf1(*totals[:3])
    rows.append({"group": "overall", "precision": p, "recall": r, "f1": f, "n_images": totals[3],
                 "tp": totals[0], "fp": totals[1], "fn": totals[2]})
    return rows


def format_table(rows: Sequence[dict]) -> str:
    header = ("group", "P", "R", "F1", "n_images")
    body = [(r["group"], f"{r['precision']:.4f}", f"{r['recall']:.4f}", f"{r['f1']:.4f}",
             str(r["n_images"])) for r in rows]
    widths = [max(len(h), *(len(b[i]) for b in body)) for i, h in enumerate(header)]
    lines = ["  ".join(h.ljust(w) if i == 0 else h.rjust(w) for i, (h, w) in enumerate(zip(header, widths)))]
    for b in body:
        lines.append("  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(b, widths))))
    return "\n".join(lines)


def write_report(rows: Sequence[dict], path: str | Path) -> None:
    path = Path(path)
    path.write_text(json.dumps({"rows": list(rows)}, indent=1, sort_keys=True))
    path.with_suffix(".txt").write_text(format_table(rows) + "\n")


def _heat_colors(values: np.ndarray) -> np.ndarray:
    """Map [0, 1] values to a blue-to-red ramp (H, W, 3) float."""
    v = np.clip(values, 0.0, 1.0)[..., None]
    cold = np.array([0.0, 0.0, 255.0])
    hot = np.array([255.0, 0.0, 0.0])
    return cold * (1 - v) + hot * v


def blend_cam(pixels: np.ndarray, cam, weight: float = 0.4) -> np.ndarray:
    """Blend a CAM over its window region; ``weight=0`` leaves pixels untouched."""
    out = pixels.copy()
    if weight <= 0:
        return out
    box = cam.window
    region = out[box.y:box.y + box.size, box.x:box.x + box.size].astype(np.float64)
    values = np.asarray(cam.values, dtype=np.float64)
    up = np.asarray(Image.fromarray(values.astype(np.float32), mode="F").resize(
        (box.size, box.size), Image.BILINEAR))
    mixed = (1 - weight) * region + weight * _heat_colors(up)
    out[box.y:box.y + box.size, box.x:box.x + box.size] = np.clip(np.rint(mixed), 0, 255).astype(np.uint8)
    return out


def render_overlay(pixels: np.ndarray, detections: Sequence, annotations: Sequence, path: str | Path | None = None,
                   cams: Sequence | None = None, cam_weight: float = 0.4, marker: int = 12) -> np.ndarray:
    """Ground truth as green circles, detections as yellow crosses, optional CAM heat."""
    out = pixels.copy()
    for cam in cams or ():
        out = blend_cam(out, cam, cam_weight)
    im = Image.fromarray(out)
    draw = ImageDraw.Draw(im)
    for a in annotations:
        x, y = _xy(a)
        draw.ellipse([x - marker, y - marker, x + marker, y + marker], outline=(0, 200, 0), width=2)
    for d in detections:
        x, y = _xy(d)
        draw.line([x - marker, y, x + marker, y], fill=(255, 220, 0), width=2)
        draw.line([x, y - marker, x, y + marker], fill=(255, 220, 0), width=2)
    result = np.asarray(im)
    if path is not None:
        path = Path(path)
        if not path.parent.exists():
            raise OSError(f"cannot write overlay: directory {path.parent} does not exist")
        im.save(path)
    return result
