"""Online patch augmentation.

Geometric ops run first, then stain perturbation in optical-density space,
then color jitter, blur and noise. Every op takes its randomness from an
explicit ``numpy.random.Generator`` so a pipeline run is reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields

import cv2
import numpy as np

OD_MAX = float(np.log10(256.0))

# Ruifrok & Johnston H&E optical-density vectors
_HEMATOXYLIN = np.array([0.650, 0.704, 0.286])
_EOSIN = np.array([0.072, 0.990, 0.105])


class StainBasis:
    """Three unit-norm OD stain vectors stacked as rows (H, E, residual)."""

    def __init__(self, matrix):
        m = np.asarray(matrix, dtype=np.float64)
        if m.shape != (3, 3):
            raise ValueError(f"stain basis must be 3x3, got {m.shape}")
        m = m / np.linalg.norm(m, axis=1, keepdims=True)
        cond = np.linalg.cond(m)
        if not np.isfinite(cond) or cond >= 1e3:
            raise np.linalg.LinAlgError(f"stain basis is singular or ill-conditioned (cond={cond:.3g})")
        self.matrix = m
        self.inverse = np.linalg.inv(m)

    @classmethod
    def default(cls) -> "StainBasis":
        h = _HEMATOXYLIN / np.linalg.norm(_HEMATOXYLIN)
        e = _EOSIN / np.linalg.norm(_EOSIN)
        r = np.cross(h, e)
        return cls(np.stack([h, e, r / np.linalg.norm(r)]))


def rgb_to_od(pixels: np.ndarray) -> np.ndarray:
    return -np.log10((pixels.astype(np.float64) + 1.0) / 256.0)


def od_to_rgb(od: np.ndarray) -> np.ndarray:
    rgb = 256.0 * np.power(10.0, -od) - 1.0
    return np.clip(np.rint(rgb), 0, 255).astype(np.uint8)


def stain_augment(patch: np.ndarray, basis: StainBasis, scales, shifts) -> np.ndarray:
    """Rescale and shift the per-pixel stain concentrations."""
    od = rgb_to_od(patch).reshape(-1, 3)
    conc = od @ basis.inverse
    # out-of-gamut pixels carry negative components already; only stop the
    # augmentation from pushing a component further below zero
    floor = np.minimum(conc, 0.0)
    conc = np.maximum(conc * np.asarray(scales, float) + np.asarray(shifts, float), floor)
    return od_to_rgb(conc @ basis.matrix).reshape(patch.shape)


def balanced_mixup(x_instance, y_instance, x_balanced, y_balanced, lam: float):
    """Mix an instance-sampled batch with a class-balanced one.

    ``x = lam * x_balanced + (1 - lam) * x_instance``, likewise for the soft
    labels. Works on numpy arrays and torch tensors alike.
    """
    if tuple(x_instance.shape) != tuple(x_balanced.shape):
        raise ValueError(f"batch shape mismatch: {tuple(x_instance.shape)} vs {tuple(x_balanced.shape)}")
    if tuple(y_instance.shape) != tuple(y_balanced.shape):
        raise ValueError(f"label shape mismatch: {tuple(y_instance.shape)} vs {tuple(y_balanced.shape)}")
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must lie in [0, 1], got {lam}")
    if lam == 0.0:
        return x_instance, y_instance
    if lam == 1.0:
        return x_balanced, y_balanced
    return (lam * x_balanced + (1 - lam) * x_instance,
            lam * y_balanced + (1 - lam) * y_instance)


def sample_mixup_lambda(alpha: float, rng: np.random.Generator) -> float:
    return float(rng.beta(alpha, 1.0))


def _range(lo, hi):
    return field(default_factory=lambda: (lo, hi))


@dataclass
class AugmentConfig:
    # probability of applying each stochastic op (flips use 0.5 each)
    op_probability: float = 0.5
    rotation: bool = True
    rotation_range: tuple[float, float] = _range(-180.0, 180.0)
    flip: bool = True
    elastic: bool = True
    elastic_alpha: tuple[float, float] = _range(10.0, 30.0)
    elastic_sigma: tuple[float, float] = _range(6.0, 10.0)
    grid_distortion: bool = True
    grid_steps: int = 5
    grid_limit: tuple[float, float] = _range(-0.2, 0.2)
    affine: bool = True
    affine_scale: tuple[float, float] = _range(0.9, 1.1)
    affine_shear: tuple[float, float] = _range(-8.0, 8.0)
    affine_translate: tuple[float, float] = _range(-0.05, 0.05)
    stain: bool = True
    stain_scale_range: tuple[float, float] = _range(0.75, 1.25)
    stain_shift_range: tuple[float, float] = _range(-0.05, 0.05)
    color_jitter: bool = True
    brightness: tuple[float, float] = _range(-0.1, 0.1)
    contrast: tuple[float, float] = _range(-0.1, 0.1)
    saturation: tuple[float, float] = _range(-0.1, 0.1)
    hue: tuple[float, float] = _range(-0.03, 0.03)
    blur: bool = True
    blur_sigma: tuple[float, float] = _range(0.1, 1.2)
    noise: bool = True
    noise_sigma: tuple[float, float] = _range(1.0, 6.0)
    mixup: bool = True
    mixup_alpha: float = 0.2

    def validate(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, (tuple, list)):
                if len(v) != 2 or v[0] > v[1]:
                    raise ValueError(f"{f.name}: range must be (low, high) with low <= high, got {v}")
        if self.mixup_alpha <= 0:
            raise ValueError("mixup_alpha must be > 0")
        if not 0.0 <= self.op_probability <= 1.0:
            raise ValueError("op_probability must lie in [0, 1]")
        if self.grid_steps < 1:
            raise ValueError("grid_steps must be >= 1")
        if self.stain_scale_range[0] < 0:
            raise ValueError("stain_scale_range must be nonnegative")
        for name in ("blur_sigma", "noise_sigma", "elastic_sigma", "affine_scale"):
            if getattr(self, name)[0] < 0:
                raise ValueError(f"{name} must be nonnegative")

    @classmethod
    def disabled(cls) -> "AugmentConfig":
        return cls(rotation=False, flip=False, elastic=False, grid_distortion=False, affine=False,
                   stain=False, color_jitter=False, blur=False, noise=False, mixup=False)


def _uniform(rng, r):
    return float(rng.uniform(r[0], r[1])) if r[1] > r[0] else float(r[0])


def rotate(patch: np.ndarray, angle: float) -> np.ndarray:
    """Counter-clockwise rotation about the patch center; right angles are exact."""
    quarter = angle / 90.0
    if np.isclose(quarter, round(quarter)):
        return np.ascontiguousarray(np.rot90(patch, k=int(round(quarter)) % 4))
    h, w = patch.shape[:2]
    m = cv2.getRotationMatrix2D(((w - 1) / 2, (h - 1) / 2), angle, 1.0)
    return cv2.warpAffine(patch, m, (w, h), flags=cv2.INTER_LINEAR, borderMode=cv2.BORDER_REFLECT_101)


def _remap(patch, map_x, map_y):
    return cv2.remap(patch, map_x.astype(np.float32), map_y.astype(np.float32),
                     interpolation=cv2.INTER_LINEAR, borderMode=cv2.BORDER_REFLECT_101)


def elastic_transform(patch, alpha, sigma, rng):
    h, w = patch.shape[:2]
    dx = cv2.GaussianBlur(rng.uniform(-1, 1, (h, w)), (0, 0), sigma) * alpha
    dy = cv2.GaussianBlur(rng.uniform(-1, 1, (h, w)), (0, 0), sigma) * alpha
    xs, ys = np.meshgrid(np.arange(w), np.arange(h))
    return _remap(patch, xs + dx, ys + dy)


def grid_distortion(patch, steps, limit, rng):
    h, w = patch.shape[:2]

    def axis_map(n):
        # piecewise-linear warp with ``steps`` cells whose widths are jittered
        widths = 1.0 + rng.uniform(limit[0], limit[1], steps)
        knots = np.concatenate([[0.0], np.cumsum(widths)])
        knots = knots / knots[-1] * (n - 1)
        uniform = np.linspace(0, n - 1, steps + 1)
        return np.interp(np.arange(n), uniform, knots)

    mx = axis_map(w)
    my = axis_map(h)
    xs, ys = np.meshgrid(mx, my)
    return _remap(patch, xs, ys)


def affine(patch, scale, shear_deg, tx, ty):
    h, w = patch.shape[:2]
    cx, cy = (w - 1) / 2, (h - 1) / 2
    sh = np.tan(np.deg2rad(shear_deg))
    a = np.array([[scale, scale * sh], [0.0, scale]])
    offset = np.array([cx, cy]) - a @ np.array([cx, cy]) + np.array([tx * w, ty * h])
    m = np.hstack([a, offset[:, None]])
    return cv2.warpAffine(patch, m, (w, h), flags=cv2.INTER_LINEAR, borderMode=cv2.BORDER_REFLECT_101)


def color_jitter(patch, brightness, contrast, saturation, hue):
    img = patch.astype(np.float32)
    img = img * (1.0 + brightness)
    mean = img.mean()
    img = (img - mean) * (1.0 + contrast) + mean
    img = np.clip(img, 0, 255).astype(np.uint8)
    hsv = cv2.cvtColor(img, cv2.COLOR_RGB2HSV).astype(np.float32)
    hsv[..., 0] = np.mod(hsv[..., 0] + hue * 180.0, 180.0)
    hsv[..., 1] = np.clip(hsv[..., 1] * (1.0 + saturation), 0, 255)
    return cv2.cvtColor(hsv.astype(np.uint8), cv2.COLOR_HSV2RGB)


def gaussian_blur(patch, sigma):
    return cv2.GaussianBlur(patch, (0, 0), sigma, borderType=cv2.BORDER_REFLECT_101)


def gaussian_noise(patch, sigma, rng):
    noisy = patch.astype(np.float64) + rng.normal(0.0, sigma, patch.shape)
    return np.clip(np.rint(noisy), 0, 255).astype(np.uint8)


def apply_pipeline(patch: np.ndarray, config: AugmentConfig, rng: np.random.Generator,
                   basis: StainBasis | None = None) -> np.ndarray:
    """Run every enabled op in the fixed order and return a new uint8 patch."""
    p = config.op_probability
    out = patch
    if config.rotation:
        out = rotate(out, _uniform(rng, config.rotation_range))
    if config.flip:
        if rng.random() < 0.5:
            out = out[:, ::-1]
        if rng.random() < 0.5:
            out = out[::-1]
        out = np.ascontiguousarray(out)
    if config.elastic and rng.random() < p:
        out = elastic_transform(out, _uniform(rng, config.elastic_alpha),
                                _uniform(rng, config.elastic_sigma), rng)
    if config.grid_distortion and rng.random() < p:
        out = grid_distortion(out, config.grid_steps, config.grid_limit, rng)
    if config.affine and rng.random() < p:
        out = affine(out, _uniform(rng, config.affine_scale), _uniform(rng, config.affine_shear),
                     _uniform(rng, config.affine_translate), _uniform(rng, config.affine_translate))
    if config.stain and rng.random() < p:
        scales = rng.uniform(*config.stain_scale_range, size=3)
        shifts = rng.uniform(*config.stain_shift_range, size=3)
        out = stain_augment(out, basis or StainBasis.default(), scales, shifts)
    if config.color_jitter and rng.random() < p:
        out = color_jitter(out, _uniform(rng, config.brightness), _uniform(rng, config.contrast),
                           _uniform(rng, config.saturation), _uniform(rng, config.hue))
    if config.blur and rng.random() < p:
        out = gaussian_blur(out, _uniform(rng, config.blur_sigma))
    if config.noise and rng.random() < p:
        out = gaussian_noise(out, _uniform(rng, config.noise_sigma), rng)
    if out is patch:
        out = patch.copy()
    return out
