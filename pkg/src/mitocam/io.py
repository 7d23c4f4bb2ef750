"""Detections file format: ``{"image_id": str, "detections": [{"x", "y", "score"}]}``."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Sequence

from .cam import Detection


def detections_document(image_id: str, detections: Sequence[Detection]) -> dict:
    return {"image_id": image_id,
            "detections": [{"x": round(float(d.x), 4), "y": round(float(d.y), 4), "score": float(d.score)}
                           for d in detections]}


def write_detections(detections: Sequence[Detection], path: str | Path, image_id: str | None = None) -> Path:
    path = Path(path)
    image_id = image_id if image_id is not None else path.stem
    path.write_text(json.dumps(detections_document(image_id, detections), indent=1))
    return path


def read_detections(path: str | Path) -> tuple[str, list[Detection]]:
    data = json.loads(Path(path).read_text())
    return data["image_id"], [Detection(float(d["x"]), float(d["y"]), float(d["score"]))
                              for d in data["detections"]]


def read_detections_dir(directory: str | Path) -> dict[str, list[Detection]]:
    out = {}
    for p in sorted(Path(directory).glob("*.json")):
        image_id, dets = read_detections(p)
        out[image_id] = dets
    return out
