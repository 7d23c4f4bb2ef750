"""Sliding-window scoring, strict probability thresholding and greedy NMS."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .model import Classifier, positive_probability, to_input


@dataclass(frozen=True)
class WindowBox:
    x: int
    y: int
    size: int

    @property
    def center(self) -> tuple[float, float]:
        return self.x + self.size / 2, self.y + self.size / 2

    def contains(self, px: float, py: float) -> bool:
        return self.x <= px < self.x + self.size and self.y <= py < self.y + self.size


@dataclass(frozen=True)
class ScoredWindow:
    box: WindowBox
    probability: float


@dataclass
class InferenceConfig:
    window: int = 240
    step: int = 30
    prob_threshold: float = 0.84
    nms_threshold: float = 0.22
    batch_size: int = 64

    def validate(self):
        if self.window < 1:
            raise ValueError("window must be >= 1")
        if not 0 < self.step <= self.window:
            raise ValueError("step must satisfy 0 < step <= window")
        if not 0.0 < self.prob_threshold < 1.0:
            raise ValueError("prob_threshold must lie in (0, 1)")
        if not 0.0 < self.nms_threshold < 1.0:
            raise ValueError("nms_threshold must lie in (0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


def axis_positions(dim: int, window: int, step: int) -> list[int]:
    if window > dim:
        raise ValueError(f"window {window} exceeds image dimension {dim}")
    pos = list(range(0, dim - window + 1, step))
    if pos[-1] != dim - window:
        pos.append(dim - window)
    return pos


def tile_image(width: int, height: int, window: int = 240, step: int = 30) -> list[WindowBox]:
    """Row-major windows; a flush window closes any right/bottom gap."""
    if step <= 0:
        raise ValueError("step must be > 0")
    xs = axis_positions(width, window, step)
    ys = axis_positions(height, window, step)
    return [WindowBox(x, y, window) for y in ys for x in xs]


@torch.no_grad()
def score_windows(model: Classifier, pixels: np.ndarray, windows: Sequence[WindowBox],
                  batch_size: int = 64) -> list[ScoredWindow]:
    """One positive probability per window, in window order.

    Windows are pushed through the network one at a time inside each batch
    slice so results never depend on ``batch_size``.
    """
    model.eval()
    dtype = next(model.parameters()).dtype
    h, w = pixels.shape[:2]
    out = []
    for start in range(0, len(windows), batch_size):
        chunk = windows[start:start + batch_size]
        for b in chunk:
            if b.x < 0 or b.y < 0 or b.x + b.size > w or b.y + b.size > h:
                raise ValueError(f"window {b} is outside the {w}x{h} image")
        crops = np.stack([pixels[b.y:b.y + b.size, b.x:b.x + b.size] for b in chunk])
        logits = torch.cat([model(to_input(c, dtype)) for c in crops])
        probs = positive_probability(logits).cpu().numpy().astype(np.float64)
        out.extend(ScoredWindow(b, float(p)) for b, p in zip(chunk, probs))
    return out


def threshold_windows(scored: Sequence[ScoredWindow], prob_threshold: float = 0.84) -> list[ScoredWindow]:
    return [s for s in scored if s.probability > prob_threshold]


def iou(a: WindowBox, b: WindowBox) -> float:
    ix = max(0, min(a.x + a.size, b.x + b.size) - max(a.x, b.x))
    iy = max(0, min(a.y + a.size, b.y + b.size) - max(a.y, b.y))
    inter = ix * iy
    union = a.size * a.size + b.size * b.size - inter
    return inter / union if union > 0 else 0.0


def nms(positives: Sequence[ScoredWindow], nms_threshold: float = 0.22) -> list[ScoredWindow]:
    """Greedy NMS in descending probability; ties go to smaller (y, x)."""
    if not positives:
        return []
    order = sorted(range(len(positives)),
                   key=lambda i: (-positives[i].probability, positives[i].box.y, positives[i].box.x))
    boxes = np.array([[positives[i].box.x, positives[i].box.y, positives[i].box.size] for i in order],
                     dtype=np.int64)
    x1, y1 = boxes[:, 0], boxes[:, 1]
    x2, y2 = x1 + boxes[:, 2], y1 + boxes[:, 2]
    area = boxes[:, 2] * boxes[:, 2]
    alive = np.ones(len(order), dtype=bool)
    kept = []
    for i in range(len(order)):
        if not alive[i]:
            continue
        kept.append(positives[order[i]])
        rest = np.flatnonzero(alive[i + 1:]) + i + 1
        if not len(rest):
            continue
        iw = np.clip(np.minimum(x2[i], x2[rest]) - np.maximum(x1[i], x1[rest]), 0, None)
        ih = np.clip(np.minimum(y2[i], y2[rest]) - np.maximum(y1[i], y1[rest]), 0, None)
        inter = iw * ih
        overlap = inter / (area[i] + area[rest] - inter)
        alive[rest[overlap > nms_threshold]] = False
    return kept


def write_scored_windows(scored: Sequence[ScoredWindow], path: str | Path) -> None:
    with open(path, "w") as fh:
        for s in scored:
            fh.write(json.dumps({"x": s.box.x, "y": s.box.y, "size": s.box.size,
                                 "probability": s.probability}) + "\n")


def read_scored_windows(path: str | Path) -> list[ScoredWindow]:
    out = []
    with open(path) as fh:
        for line in fh:
            if line.strip():
                r = json.loads(line)
                out.append(ScoredWindow(WindowBox(r["x"], r["y"], r["size"]), r["probability"]))
    return out
