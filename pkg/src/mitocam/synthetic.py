"""Deterministic pseudo-histology ROIs with planted pseudo-mitoses.

Mitoses are dark elongated blobs, imposters are rounder mid-tone blobs and
ordinary nuclei are small pale blobs, all on a pink textured background.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import cv2
import numpy as np

from .dataset import Annotation, RoiImage, save_dataset

_BACKGROUND = np.array([236.0, 196.0, 218.0])
_NUCLEUS = np.array([168.0, 120.0, 190.0])
_MITOSIS = np.array([52.0, 22.0, 84.0])
_IMPOSTER = np.array([120.0, 78.0, 150.0])


class FixtureError(RuntimeError):
    pass


@dataclass
class FixtureSpec:
    n_images: int = 20
    image_size: int = 1200
    objects_per_image: tuple[int, int] = (3, 6)
    imposters_per_image: tuple[int, int] = (1, 3)
    mitosis_axes: tuple[float, float] = (11.0, 5.0)
    mitosis_strength: float = 0.9
    imposter_radius: float = 6.5
    imposter_strength: float = 0.6
    nuclei_per_image: int = 160
    nucleus_radius: tuple[float, float] = (3.5, 6.5)
    texture_sigma: float = 6.0
    texture_amplitude: float = 14.0
    unlabeled_fraction: float = 0.1
    unlabeled_have_objects: bool = False
    label_noise_fraction: float = 0.0
    min_separation: float = 60.0
    margin: int = 20
    tumor_types: tuple[str, ...] = ("type_a", "type_b")
    max_tries: int = 2000
    seed: int = 0

    def validate(self):
        if self.n_images < 1 or self.image_size < 32:
            raise ValueError("need n_images >= 1 and image_size >= 32")
        lo, hi = self.objects_per_image
        if not 0 <= lo <= hi:
            raise ValueError("objects_per_image must be a (low, high) range")
        if not 0.0 <= self.unlabeled_fraction < 1.0:
            raise ValueError("unlabeled_fraction must lie in [0, 1)")
        if not 0.0 <= self.label_noise_fraction <= 1.0:
            raise ValueError("label_noise_fraction must lie in [0, 1]")
        if 2 * max(self.mitosis_axes) >= 240:
            raise ValueError("objects must be much smaller than the window")


def _paint(img: np.ndarray, cx: float, cy: float, a: float, b: float, theta: float,
           color: np.ndarray, strength: float) -> None:
    """Alpha-blend a soft ellipse (semi-axes a, b) into ``img`` in place."""
    r = int(np.ceil(max(a, b) + 3))
    h, w = img.shape[:2]
    x0, x1 = max(0, int(cx) - r), min(w, int(cx) + r + 1)
    y0, y1 = max(0, int(cy) - r), min(h, int(cy) + r + 1)
    if x0 >= x1 or y0 >= y1:
        return
    ys, xs = np.mgrid[y0:y1, x0:x1].astype(np.float64)
    dx, dy = xs - cx, ys - cy
    c, s = np.cos(theta), np.sin(theta)
    u = (c * dx + s * dy) / a
    v = (-s * dx + c * dy) / b
    rr = np.sqrt(u * u + v * v)
    m = strength / (1.0 + np.exp((rr - 1.0) * 6.0))
    img[y0:y1, x0:x1] = img[y0:y1, x0:x1] * (1 - m[..., None]) + color * m[..., None]


def _background(size: int, spec: FixtureSpec, rng: np.random.Generator) -> np.ndarray:
    noise = cv2.GaussianBlur(rng.normal(0.0, 1.0, (size, size)), (0, 0), spec.texture_sigma)
    noise /= noise.std() + 1e-12
    fine = rng.normal(0.0, 3.0, (size, size, 3))
    img = _BACKGROUND[None, None, :] + spec.texture_amplitude * noise[..., None] * np.array([0.6, 1.0, 0.7]) + fine
    for _ in range(spec.nuclei_per_image):
        rad = rng.uniform(*spec.nucleus_radius)
        _paint(img, rng.uniform(0, size), rng.uniform(0, size), rad, rad * rng.uniform(0.8, 1.0),
               rng.uniform(0, np.pi), _NUCLEUS, 0.55)
    return img


def _place(count: int, size: int, existing: list, spec: FixtureSpec, rng) -> list[tuple[int, int]]:
    placed = []
    for _ in range(count):
        for _ in range(spec.max_tries):
            p = (int(rng.integers(spec.margin, size - spec.margin)),
                 int(rng.integers(spec.margin, size - spec.margin)))
            if all(np.hypot(p[0] - q[0], p[1] - q[1]) >= spec.min_separation for q in existing + placed):
                placed.append(p)
                break
        else:
            raise FixtureError(f"could not place {count} objects {spec.min_separation}px apart "
                               f"in a {size}px image after {spec.max_tries} tries")
    return placed


def render_image(size: int, mitoses, imposters, spec: FixtureSpec, rng) -> np.ndarray:
    img = _background(size, spec, rng)
    a, b = spec.mitosis_axes
    for x, y in mitoses:
        _paint(img, x, y, a * rng.uniform(0.85, 1.15), b * rng.uniform(0.85, 1.15),
               rng.uniform(0, np.pi), _MITOSIS, spec.mitosis_strength)
    for x, y in imposters:
        rad = spec.imposter_radius * rng.uniform(0.9, 1.1)
        _paint(img, x, y, rad, rad * rng.uniform(0.85, 1.0), rng.uniform(0, np.pi), _IMPOSTER,
               spec.imposter_strength)
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def _n_unlabeled(spec: FixtureSpec) -> int:
    n = int(np.floor(spec.n_images * spec.unlabeled_fraction + 0.5))
    return min(n, spec.n_images - 1)


def generate_fixture(spec: FixtureSpec | None = None):
    """Returns ``(images, annotations, ground_truth)``.

    ``annotations`` carry any injected label noise; ``ground_truth`` keeps
    the true planted centers plus the indices of flipped annotations.
    """
    spec = spec or FixtureSpec()
    spec.validate()
    root = np.random.SeedSequence(spec.seed)
    n_unlabeled = _n_unlabeled(spec)
    unlabeled_ids = set(range(spec.n_images - n_unlabeled, spec.n_images))
    images, annotations, truth = [], [], {}
    for i, child in enumerate(root.spawn(spec.n_images)):
        rng = np.random.default_rng(child)
        image_id = f"img_{i:03d}"
        labeled = i not in unlabeled_ids
        has_objects = labeled or spec.unlabeled_have_objects
        n_mit = int(rng.integers(spec.objects_per_image[0], spec.objects_per_image[1] + 1)) if has_objects else 0
        n_imp = int(rng.integers(spec.imposters_per_image[0], spec.imposters_per_image[1] + 1)) if has_objects else 0
        mitoses = _place(n_mit, spec.image_size, [], spec, rng)
        imposters = _place(n_imp, spec.image_size, mitoses, spec, rng)
        pixels = render_image(spec.image_size, mitoses, imposters, spec, rng)
        tumor = spec.tumor_types[i % len(spec.tumor_types)] if spec.tumor_types else None
        images.append(RoiImage(image_id, pixels, tumor, labeled, f"{image_id}.png"))
        truth[image_id] = {"mitoses": [list(p) for p in mitoses], "imposters": [list(p) for p in imposters],
                           "labeled": labeled}
        if labeled:
            annotations += [Annotation(image_id, x, y, "mitosis") for x, y in mitoses]
            annotations += [Annotation(image_id, x, y, "imposter") for x, y in imposters]
    flipped = []
    if spec.label_noise_fraction > 0 and annotations:
        n_flip = int(np.floor(spec.label_noise_fraction * len(annotations) + 0.5))
        rng = np.random.default_rng([spec.seed, 7919])
        flipped = sorted(int(j) for j in rng.choice(len(annotations), size=n_flip, replace=False))
        for j in flipped:
            a = annotations[j]
            other = "imposter" if a.category == "mitosis" else "mitosis"
            annotations[j] = Annotation(a.image_id, a.x, a.y, other)
    ground_truth = {"seed": spec.seed, "spec": _spec_dict(spec), "images": truth, "flipped": flipped}
    return images, annotations, ground_truth


def _spec_dict(spec: FixtureSpec) -> dict:
    d = asdict(spec)
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def plant_multi_object_window(spec: FixtureSpec | None = None, separation: float = 100.0):
    """One image holding exactly two mitoses ``separation`` px apart, side by side."""
    spec = spec or FixtureSpec(n_images=1, image_size=720)
    rng = np.random.default_rng([spec.seed, 104729])
    size = spec.image_size
    c = size / 2
    half = separation / 2
    if separation + 2 * spec.margin > size:
        raise FixtureError("separation does not fit in the image")
    mitoses = [(int(round(c - half)), int(round(c))), (int(round(c + half)), int(round(c)))]
    pixels = render_image(size, mitoses, [], spec, rng)
    image = RoiImage("multi_000", pixels, spec.tumor_types[0] if spec.tumor_types else None, True, "multi_000.png")
    annotations = [Annotation(image.id, x, y, "mitosis") for x, y in mitoses]
    truth = {"seed": spec.seed, "separation": separation,
             "images": {image.id: {"mitoses": [list(p) for p in mitoses], "imposters": [], "labeled": True}},
             "flipped": []}
    return [image], annotations, truth


def write_fixture(images, annotations, ground_truth, directory: str | Path) -> Path:
    directory = Path(directory)
    path = save_dataset(images, annotations, directory)
    (directory / "ground_truth.json").write_text(json.dumps(ground_truth, indent=1))
    return path


def true_mitoses(ground_truth: dict, image_id: str) -> list[tuple[float, float]]:
    return [tuple(p) for p in ground_truth["images"][image_id]["mitoses"]]
