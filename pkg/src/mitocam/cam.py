"""GradCAM++ maps for positive windows and hotspot-centroid localization."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import ndimage

from .inference import InferenceConfig, ScoredWindow, WindowBox, nms, score_windows, threshold_windows, tile_image
from .model import Classifier, forward, grad_wrt_features, to_input


@dataclass
class Cam:
    values: np.ndarray
    window: WindowBox
    normalized: bool = True


@dataclass(frozen=True)
class Detection:
    x: float
    y: float
    score: float
    source_window: WindowBox | None = None


def gradcampp_from(activations: np.ndarray, gradients: np.ndarray) -> np.ndarray:
    """Unnormalized GradCAM++ map from (C, h, w) activations and score gradients."""
    a = np.asarray(activations, dtype=np.float64)
    g = np.asarray(gradients, dtype=np.float64)
    g2 = g * g
    channel_sums = a.sum(axis=(1, 2), keepdims=True)
    denom = 2.0 * g2 + channel_sums * g2 * g
    safe = np.where(denom != 0.0, denom, 1.0)
    alpha = np.where(denom != 0.0, g2 / safe, 0.0)
    weights = (alpha * np.maximum(g, 0.0)).sum(axis=(1, 2))
    return np.maximum(np.tensordot(weights, a, axes=1), 0.0)


def normalize_cam(values: np.ndarray) -> np.ndarray:
    m = values.max() if values.size else 0.0
    return values / m if m > 0 else np.zeros_like(values)


def cam_inputs(model: Classifier, window_pixels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Target-layer activations and d(positive logit)/d(activations) for one window."""
    model.eval()
    dtype = next(model.parameters()).dtype
    cache = forward(model, to_input(window_pixels, dtype))
    grad = grad_wrt_features(cache, 0)
    return (cache.feature_maps[0].detach().double().numpy(), grad.detach().double().numpy())


def gradcampp(model: Classifier, window_pixels: np.ndarray, window: WindowBox | None = None) -> Cam:
    acts, grads = cam_inputs(model, window_pixels)
    if window is None:
        window = WindowBox(0, 0, window_pixels.shape[0])
    return Cam(normalize_cam(gradcampp_from(acts, grads)), window, True)


def hotspot_centroid(cam: Cam, cam_threshold: float = 0.5, window: WindowBox | None = None
                     ) -> tuple[float, float] | None:
    """Value-weighted centroid of the 8-connected hotspot holding the global max.

    Feature cell (i, j) maps to the center of its pixel box inside the window.
    Returns global (x, y) or None for an all-zero map.
    """
    window = window or cam.window
    values = np.asarray(cam.values, dtype=np.float64)
    peak = values.max() if values.size else 0.0
    if peak <= 0:
        return None
    h, w = values.shape
    mask = values >= cam_threshold * peak
    labels, _ = ndimage.label(mask, structure=np.ones((3, 3), dtype=int))
    pi, pj = np.unravel_index(int(np.argmax(values)), values.shape)
    comp = labels == labels[pi, pj]
    ii, jj = np.nonzero(comp)
    wts = values[ii, jj]
    ci = float(np.sum(wts * ii) / np.sum(wts))
    cj = float(np.sum(wts * jj) / np.sum(wts))
    x = window.x + (cj + 0.5) * window.size / w
    y = window.y + (ci + 0.5) * window.size / h
    return x, y


def localize(model: Classifier, pixels: np.ndarray, kept: Sequence[ScoredWindow],
             cam_threshold: float = 0.5, return_cams: bool = False):
    detections, cams = [], []
    for s in kept:
        b = s.box
        cam = gradcampp(model, pixels[b.y:b.y + b.size, b.x:b.x + b.size], b)
        point = hotspot_centroid(cam, cam_threshold, b)
        if point is None:
            point = b.center
        detections.append(Detection(point[0], point[1], s.probability, b))
        cams.append(cam)
    return (detections, cams) if return_cams else detections


def detect_from_scored(model: Classifier, pixels: np.ndarray, scored: Sequence[ScoredWindow],
                       config: InferenceConfig, cam_threshold: float = 0.5, return_cams: bool = False):
    kept = nms(threshold_windows(scored, config.prob_threshold), config.nms_threshold)
    return localize(model, pixels, kept, cam_threshold, return_cams)


def detect(pixels: np.ndarray, model: Classifier, config: InferenceConfig | None = None,
           cam_threshold: float = 0.5, return_cams: bool = False):
    """tile -> score -> threshold -> NMS -> GradCAM++ -> hotspot centroid."""
    config = config or InferenceConfig()
    config.validate()
    if hasattr(pixels, "pixels"):
        pixels = pixels.pixels
    h, w = pixels.shape[:2]
    windows = tile_image(w, h, config.window, config.step)
    scored = score_windows(model, pixels, windows, config.batch_size)
    return detect_from_scored(model, pixels, scored, config, cam_threshold, return_cams)
