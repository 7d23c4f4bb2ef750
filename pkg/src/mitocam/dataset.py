"""ROI loading, image-level splitting and initial patch extraction."""

from __future__ import annotations

import json
import math
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

CATEGORIES = ("mitosis", "imposter")
PROVENANCES = ("initial", "false_positive", "false_negative", "hard_negative", "random_negative")
POSITIVE_PROVENANCES = ("initial", "false_negative")


class DatasetError(ValueError):
    """Raised for malformed dataset files or invalid patch requests."""


@dataclass
class RoiImage:
    id: str
    pixels: np.ndarray
    tumor_type: str | None = None
    labeled: bool = True
    file: str | None = None

    def __post_init__(self):
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise DatasetError(f"image {self.id}: expected HxWx3 raster, got {self.pixels.shape}")
        if self.pixels.dtype != np.uint8:
            raise DatasetError(f"image {self.id}: expected 8-bit raster, got {self.pixels.dtype}")
        if self.width < 1 or self.height < 1:
            raise DatasetError(f"image {self.id}: empty raster")

    @property
    def width(self) -> int:
        return int(self.pixels.shape[1])

    @property
    def height(self) -> int:
        return int(self.pixels.shape[0])


@dataclass(frozen=True)
class Annotation:
    image_id: str
    x: int
    y: int
    category: str = "mitosis"


@dataclass
class Patch:
    pixels: np.ndarray
    label: str
    source_image: str
    center: tuple[float, float]
    provenance: str = "initial"
    round_added: int = 0

    def __post_init__(self):
        if self.label not in ("positive", "negative"):
            raise DatasetError(f"unknown patch label {self.label!r}")
        if self.provenance not in PROVENANCES:
            raise DatasetError(f"unknown provenance {self.provenance!r}")
        if self.label == "positive" and self.provenance not in POSITIVE_PROVENANCES:
            raise DatasetError(f"positive patch cannot have provenance {self.provenance!r}")

    @property
    def target(self) -> int:
        return 1 if self.label == "positive" else 0


@dataclass
class PatchSet:
    patches: list[Patch] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.patches)

    def __iter__(self):
        return iter(self.patches)

    def extend(self, patches: Iterable[Patch]) -> None:
        self.patches.extend(patches)

    def arrays(self) -> tuple[np.ndarray, np.ndarray]:
        """Stack into (N, S, S, 3) uint8 pixels and (N,) integer targets."""
        if not self.patches:
            return np.zeros((0, 0, 0, 3), np.uint8), np.zeros((0,), np.int64)
        x = np.stack([p.pixels for p in self.patches])
        y = np.array([p.target for p in self.patches], dtype=np.int64)
        return x, y

    def source_images(self) -> set[str]:
        return {p.source_image for p in self.patches}

    def counts(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for p in self.patches:
            out[p.provenance] = out.get(p.provenance, 0) + 1
        return out

    def save(self, directory: str | Path) -> Path:
        """Write every patch as PNG plus a ``manifest.json`` carrying all fields."""
        directory = Path(directory)
        (directory / "rasters").mkdir(parents=True, exist_ok=True)
        records = []
        for i, p in enumerate(self.patches):
            name = f"rasters/{i:07d}.png"
            target = directory / name
            if not target.exists():
                Image.fromarray(p.pixels).save(target)
            records.append({
                "file": name,
                "label": p.label,
                "source_image": p.source_image,
                "center": [float(p.center[0]), float(p.center[1])],
                "provenance": p.provenance,
                "round_added": int(p.round_added),
            })
        manifest = directory / "manifest.json"
        manifest.write_text(json.dumps({"patches": records}, indent=1))
        return manifest

    @classmethod
    def load(cls, directory: str | Path) -> "PatchSet":
        directory = Path(directory)
        data = json.loads((directory / "manifest.json").read_text())
        patches = []
        for rec in data["patches"]:
            pixels = np.asarray(Image.open(directory / rec["file"]).convert("RGB"))
            patches.append(Patch(
                pixels=pixels,
                label=rec["label"],
                source_image=rec["source_image"],
                center=tuple(rec["center"]),
                provenance=rec["provenance"],
                round_added=rec["round_added"],
            ))
        return cls(patches)


@dataclass(frozen=True)
class DatasetSplit:
    train_images: frozenset[str]
    val_images: frozenset[str]
    seed: int

    def to_dict(self) -> dict:
        return {"train_images": sorted(self.train_images), "val_images": sorted(self.val_images),
                "seed": self.seed}

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSplit":
        return cls(frozenset(d["train_images"]), frozenset(d["val_images"]), int(d["seed"]))


@dataclass
class ExtractConfig:
    patch_size: int = 240
    random_negatives_per_unlabeled: int = 20
    # extension: background negatives from labeled images, kept min_distance away from annotations
    random_negatives_per_labeled: int = 0
    min_distance: float = 120.0
    use_imposters: bool = True
    seed: int = 0

    def validate(self):
        if self.patch_size < 1:
            raise ValueError("patch_size must be >= 1")
        if self.random_negatives_per_unlabeled < 0 or self.random_negatives_per_labeled < 0:
            raise ValueError("random negative counts must be >= 0")
        if self.min_distance < 0:
            raise ValueError("min_distance must be >= 0")


def _read_raster(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB")).copy()


def parse_dataset_json(data: dict) -> tuple[list[dict], list[Annotation]]:
    """Validate the dataset document structure; returns image records and annotations."""
    if not isinstance(data, dict) or set(data) - {"images", "annotations"} or "images" not in data:
        raise DatasetError("dataset JSON must be an object with 'images' and 'annotations'")
    records = []
    seen = set()
    for i, rec in enumerate(data["images"]):
        rid = rec.get("id", f"#{i}") if isinstance(rec, dict) else f"#{i}"
        if not isinstance(rec, dict):
            raise DatasetError(f"image {rid}: record must be an object")
        for key, typ in (("id", str), ("file", str), ("width", int), ("height", int)):
            if not isinstance(rec.get(key), typ) or isinstance(rec.get(key), bool):
                raise DatasetError(f"image {rid}: field {key!r} missing or not {typ.__name__}")
        tt = rec.get("tumor_type")
        if tt is not None and not isinstance(tt, str):
            raise DatasetError(f"image {rid}: tumor_type must be string or null")
        if not isinstance(rec.get("labeled", True), bool):
            raise DatasetError(f"image {rid}: labeled must be boolean")
        if rec["width"] < 1 or rec["height"] < 1:
            raise DatasetError(f"image {rid}: width/height must be >= 1")
        if rec["id"] in seen:
            raise DatasetError(f"image {rid}: duplicate id")
        seen.add(rec["id"])
        records.append(rec)
    dims = {r["id"]: (r["width"], r["height"]) for r in records}
    annotations = []
    for i, rec in enumerate(data.get("annotations", [])):
        aid = f"annotation #{i}"
        if not isinstance(rec, dict):
            raise DatasetError(f"{aid}: record must be an object")
        if rec.get("image_id") not in dims:
            raise DatasetError(f"{aid}: unknown image_id {rec.get('image_id')!r}")
        for key in ("x", "y"):
            if not isinstance(rec.get(key), int) or isinstance(rec.get(key), bool):
                raise DatasetError(f"{aid}: field {key!r} missing or not int")
        if rec.get("category") not in CATEGORIES:
            raise DatasetError(f"{aid}: category must be one of {CATEGORIES}")
        w, h = dims[rec["image_id"]]
        if not (0 <= rec["x"] < w and 0 <= rec["y"] < h):
            raise DatasetError(
                f"{aid} ({rec['image_id']} @ {rec['x']},{rec['y']}): outside image bounds {w}x{h}")
        annotations.append(Annotation(rec["image_id"], rec["x"], rec["y"], rec["category"]))
    return records, annotations


def load_dataset(annotation_file: str | Path, image_dir: str | Path | None = None
                 ) -> tuple[list[RoiImage], list[Annotation]]:
    """Read the dataset JSON and its rasters.

    Images that have no annotation entries and are flagged ``labeled: false``
    load as unlabeled (negative-only) sources.
    """
    annotation_file = Path(annotation_file)
    image_dir = Path(image_dir) if image_dir is not None else annotation_file.parent
    try:
        data = json.loads(annotation_file.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{annotation_file}: malformed JSON ({exc})") from exc
    records, annotations = parse_dataset_json(data)
    annotated = {a.image_id for a in annotations}
    images = []
    for rec in records:
        path = image_dir / rec["file"]
        if not path.exists():
            raise DatasetError(f"image {rec['id']}: missing raster {path}")
        pixels = _read_raster(path)
        if pixels.shape[:2] != (rec["height"], rec["width"]):
            raise DatasetError(
                f"image {rec['id']}: raster is {pixels.shape[1]}x{pixels.shape[0]}, "
                f"declared {rec['width']}x{rec['height']}")
        labeled = bool(rec.get("labeled", True)) or rec["id"] in annotated
        images.append(RoiImage(rec["id"], pixels, rec.get("tumor_type"), labeled, rec["file"]))
    return images, annotations


def dataset_document(images: Sequence[RoiImage], annotations: Sequence[Annotation]) -> dict:
    """Inverse of :func:`parse_dataset_json` for in-memory images."""
    return {
        "images": [{"id": im.id, "file": im.file or f"{im.id}.png", "width": im.width,
                    "height": im.height, "tumor_type": im.tumor_type, "labeled": im.labeled}
                   for im in images],
        "annotations": [{"image_id": a.image_id, "x": a.x, "y": a.y, "category": a.category}
                        for a in annotations],
    }


def save_dataset(images: Sequence[RoiImage], annotations: Sequence[Annotation],
                 directory: str | Path, name: str = "dataset.json") -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    doc = dataset_document(images, annotations)
    for im, rec in zip(images, doc["images"]):
        Image.fromarray(im.pixels).save(directory / rec["file"])
    path = directory / name
    path.write_text(json.dumps(doc, indent=1), encoding="utf-8")
    return path


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def split_dataset(images: Sequence[RoiImage], val_fraction: float = 0.1, seed: int = 0) -> DatasetSplit:
    """Split at whole-image granularity.

    The validation count is ``round(N * val_fraction)`` (at least 1, at most
    N - 1). When every image carries a tumor type the count is spread over
    types by largest remainder so each type is represented proportionally.
    """
    if not 0.0 < val_fraction < 1.0:
        raise ValueError(f"val_fraction must lie in (0, 1), got {val_fraction}")
    if len(images) < 2:
        raise ValueError("need at least 2 images to split")
    ids = [im.id for im in images]
    n = len(ids)
    n_val = min(max(_round_half_up(n * val_fraction), 1), n - 1)
    rng = np.random.default_rng(seed)

    if all(im.tumor_type for im in images):
        groups: dict[str, list[str]] = {}
        for im in images:
            groups.setdefault(im.tumor_type, []).append(im.id)
        names = sorted(groups)
        quotas = [len(groups[g]) * n_val / n for g in names]
        alloc = [int(math.floor(q)) for q in quotas]
        order = sorted(range(len(names)), key=lambda i: (-(quotas[i] - alloc[i]), names[i]))
        for i in order[: n_val - sum(alloc)]:
            alloc[i] += 1
        val = []
        for g, k in zip(names, alloc):
            members = sorted(groups[g])
            val.extend(members[j] for j in rng.permutation(len(members))[:k])
    else:
        ordered = sorted(ids)
        val = [ordered[j] for j in rng.permutation(n)[:n_val]]
    val_set = frozenset(val)
    return DatasetSplit(frozenset(ids) - val_set, val_set, seed)


def crop_origin(width: int, height: int, center: tuple[float, float], size: int) -> tuple[int, int]:
    """Top-left corner of a ``size`` box centered at ``center``, translated to fit."""
    if size > width or size > height:
        raise DatasetError(f"patch size {size} exceeds image {width}x{height}")
    cx, cy = center
    x0 = int(round(cx - size / 2))
    y0 = int(round(cy - size / 2))
    x0 = min(max(0, x0), width - size)
    y0 = min(max(0, y0), height - size)
    return x0, y0


def crop_patch(image: RoiImage, center: tuple[float, float], size: int = 240) -> np.ndarray:
    x0, y0 = crop_origin(image.width, image.height, center, size)
    return image.pixels[y0:y0 + size, x0:x0 + size].copy()


def image_rng(seed: int, image_id: str, *extra: int) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(image_id.encode()), *extra])


def sample_background_centers(image: RoiImage, points: Sequence[tuple[float, float]], count: int,
                              size: int, min_distance: float, rng: np.random.Generator,
                              max_tries: int = 200) -> list[tuple[float, float]]:
    """Uniform patch centers (crop fits without clamping) at least ``min_distance`` from ``points``."""
    half = size / 2
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    centers = []
    for _ in range(count * max_tries):
        if len(centers) == count:
            break
        c = (float(rng.integers(int(half), image.width - int(half) + 1)),
             float(rng.integers(int(half), image.height - int(half) + 1)))
        if len(pts) and np.min(np.hypot(pts[:, 0] - c[0], pts[:, 1] - c[1])) < min_distance:
            continue
        centers.append(c)
    return centers


def extract_initial_patches(images: Sequence[RoiImage], annotations: Sequence[Annotation],
                            split: DatasetSplit, config: ExtractConfig | None = None
                            ) -> dict[str, PatchSet]:
    """Round-0 patch sets keyed ``"train"`` and ``"val"``."""
    config = config or ExtractConfig()
    config.validate()
    size = config.patch_size
    by_image: dict[str, list[Annotation]] = {}
    for a in annotations:
        by_image.setdefault(a.image_id, []).append(a)
    out = {"train": PatchSet(), "val": PatchSet()}
    for im in sorted(images, key=lambda im: im.id):
        if im.id in split.train_images:
            target = out["train"]
        elif im.id in split.val_images:
            target = out["val"]
        else:
            continue
        anns = by_image.get(im.id, [])
        for a in anns:
            if a.category == "imposter" and not config.use_imposters:
                continue
            label = "positive" if a.category == "mitosis" else "negative"
            target.patches.append(Patch(crop_patch(im, (a.x, a.y), size), label, im.id,
                                        (float(a.x), float(a.y)), "initial", 0))
        count = config.random_negatives_per_labeled if im.labeled else config.random_negatives_per_unlabeled
        if count:
            rng = image_rng(config.seed, im.id)
            pts = [(a.x, a.y) for a in anns]
            for c in sample_background_centers(im, pts, count, size, config.min_distance, rng):
                target.patches.append(Patch(crop_patch(im, c, size), "negative", im.id, c,
                                            "random_negative", 0))
    return out
