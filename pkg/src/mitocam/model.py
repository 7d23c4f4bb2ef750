"""Patch classifier with a CORAL ordinal head and feature-map/gradient access."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


class CoralHead(nn.Module):
    """One shared weight vector and ``num_ranks - 1`` rank biases."""

    def __init__(self, in_features: int, num_ranks: int = 2):
        super().__init__()
        if num_ranks < 2:
            raise ValueError("num_ranks must be >= 2")
        self.fc = nn.Linear(in_features, 1, bias=False)
        self.biases = nn.Parameter(torch.zeros(num_ranks - 1))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc(x) + self.biases

    @torch.no_grad()
    def sort_biases_(self) -> None:
        self.biases.copy_(torch.sort(self.biases, descending=True).values)


class AddCoords(nn.Module):
    """Append x, y and radius channels (in [-1, 1]) to a feature map.

    Global average pooling is otherwise translation invariant; the coordinate
    channels let the head prefer objects near the window center.
    """

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        n, _, h, w = x.shape
        ys = torch.linspace(-1.0, 1.0, h, dtype=x.dtype, device=x.device).view(1, 1, h, 1).expand(n, 1, h, w)
        xs = torch.linspace(-1.0, 1.0, w, dtype=x.dtype, device=x.device).view(1, 1, 1, w).expand(n, 1, h, w)
        r = torch.sqrt(xs ** 2 + ys ** 2)
        return torch.cat([x, xs, ys, r], dim=1)


def _block(cin, cout, stride):
    # 4x4 kernel, stride 2, pad 1: output cell i is centred on input box [2i, 2i + 2), so after
    # four blocks feature cells sit on the centres of their 16 px boxes (an odd kernel drifts 0.5 px per block)
    return nn.Sequential(nn.Conv2d(cin, cout, 4, stride, 1, bias=False), nn.BatchNorm2d(cout), nn.ReLU())


class TinyCNN(nn.Module):
    def __init__(self, channels=(12, 24, 32, 32), coords: bool = True):
        super().__init__()
        c1, c2, c3, c4 = channels
        layers = [_block(3, c1, 2), _block(c1, c2, 2), _block(c2, c3, 2)]
        if coords:
            layers.append(AddCoords())
        layers.append(_block(c3 + (3 if coords else 0), c4, 2))
        self.body = nn.Sequential(*layers)
        self.out_channels = c4

    def forward(self, x):
        return self.body(x)


@dataclass
class ForwardCache:
    logits: torch.Tensor
    feature_maps: torch.Tensor
    differentiable: bool = True


class Classifier(nn.Module):
    """Backbone feature extractor + global average pooling + CORAL head.

    ``forward`` takes float images in [0, 1] (N, 3, H, W) and normalizes them
    with the per-channel constants recorded in the descriptor. The target
    layer for CAMs is the backbone's output feature map.
    """

    def __init__(self, features: nn.Module, num_features: int, descriptor: dict):
        super().__init__()
        self.features = features
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.head = CoralHead(num_features, descriptor["num_ranks"])
        self.descriptor = descriptor
        self.register_buffer("mean", torch.tensor(descriptor["mean"]).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor(descriptor["std"]).view(1, 3, 1, 1))

    @property
    def num_ranks(self) -> int:
        return self.descriptor["num_ranks"]

    @property
    def input_size(self) -> int:
        return self.descriptor["input_size"]

    def feature_maps(self, x: torch.Tensor) -> torch.Tensor:
        return self.features((x - self.mean) / self.std)

    def head_from_features(self, maps: torch.Tensor) -> torch.Tensor:
        return self.head(torch.flatten(self.pool(maps), 1))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head_from_features(self.feature_maps(x))


def to_input(pixels, dtype=torch.float32) -> torch.Tensor:
    """uint8 (N, H, W, 3) or (H, W, 3) array -> float (N, 3, H, W) in [0, 1]."""
    arr = np.asarray(pixels)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[-1] != 3:
        raise ValueError(f"expected (N, H, W, 3) pixels, got {arr.shape}")
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2))).to(dtype) / 255.0


def _check_input(model: Classifier, batch: torch.Tensor):
    if batch.ndim != 4 or batch.shape[1] != 3:
        raise ValueError(f"expected (N, 3, H, W) batch, got {tuple(batch.shape)}")
    if model.descriptor["arch"] != "tiny_cnn" and tuple(batch.shape[2:]) != (model.input_size,) * 2:
        raise ValueError(f"expected {model.input_size}x{model.input_size} input, got {tuple(batch.shape[2:])}")


def forward(model: Classifier, batch, differentiable: bool = True) -> ForwardCache:
    """Forward pass that caches target-layer activations.

    With ``differentiable`` the cached maps are a graph leaf so gradients of
    any logit with respect to them can be taken later.
    """
    if not isinstance(batch, torch.Tensor):
        batch = to_input(batch, next(model.parameters()).dtype)
    _check_input(model, batch)
    with torch.no_grad():
        maps = model.feature_maps(batch)
    if differentiable:
        maps = maps.detach().requires_grad_(True)
        with torch.enable_grad():
            logits = model.head_from_features(maps)
    else:
        with torch.no_grad():
            logits = model.head_from_features(maps)
    return ForwardCache(logits, maps, differentiable)


def positive_probability(logits) -> np.ndarray | float:
    """P(rank >= 1): sigmoid of the first CORAL logit."""
    if isinstance(logits, torch.Tensor):
        return torch.sigmoid(logits[..., 0])
    z = np.asarray(logits, dtype=np.float64)
    p = 1.0 / (1.0 + np.exp(-z[..., 0]))
    return float(p) if p.ndim == 0 else p


def rank_probabilities(logits: torch.Tensor) -> torch.Tensor:
    """Cumulative P(rank > k) for k = 0 .. K-2."""
    return torch.sigmoid(logits)


def grad_wrt_features(cache: ForwardCache, index: int = 0, rank: int = 0) -> torch.Tensor:
    """d(logit[index, rank]) / d(feature_maps[index]) as a (C, h, w) tensor."""
    if not cache.differentiable or not cache.feature_maps.requires_grad:
        raise RuntimeError("forward cache was built without differentiable state")
    score = cache.logits[index, rank]
    (grad,) = torch.autograd.grad(score, cache.feature_maps, retain_graph=True, allow_unused=True)
    if grad is None:
        return torch.zeros_like(cache.feature_maps[index])
    return grad[index]


def default_descriptor(arch: str = "tiny_cnn", **kw) -> dict:
    d = {"arch": arch, "num_ranks": 2, "input_size": 240, "mean": list(IMAGENET_MEAN),
         "std": list(IMAGENET_STD), "target_layer": "features", "params": {}}
    d.update(kw)
    return d


def build_model(descriptor: dict) -> Classifier:
    arch = descriptor["arch"]
    params = descriptor.get("params", {})
    if arch == "tiny_cnn":
        features = TinyCNN(tuple(params.get("channels", (12, 24, 32, 32))), params.get("coords", True))
        return Classifier(features, features.out_channels, descriptor)
    if arch == "efficientnet_b3":
        from torchvision.models import efficientnet_b3

        net = efficientnet_b3(weights=params.get("weights"))
        return Classifier(net.features, net.classifier[1].in_features, descriptor)
    raise ValueError(f"unknown architecture {arch!r}")


def build_tiny_cnn(seed: int = 0, num_ranks: int = 2, input_size: int = 240,
                   channels=(12, 24, 32, 32), coords: bool = True) -> Classifier:
    if input_size < 32:
        raise ValueError("TinyCNN needs input_size >= 32")
    desc = default_descriptor("tiny_cnn", num_ranks=num_ranks, input_size=input_size,
                              params={"channels": list(channels), "coords": coords})
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = build_model(desc)
    return model.eval()


def build_efficientnet_b3(num_ranks: int = 2, weights=None) -> Classifier:
    """Reference backbone; ``weights`` is passed to torchvision (e.g. ``"IMAGENET1K_V1"``)."""
    return build_model(default_descriptor("efficientnet_b3", num_ranks=num_ranks,
                                          params={"weights": weights})).eval()


def _state_blob(model: nn.Module) -> tuple[list[dict], bytes]:
    entries, chunks = [], []
    for name, tensor in model.state_dict().items():
        arr = tensor.detach().cpu().contiguous().numpy()
        entries.append({"name": name, "dtype": str(arr.dtype), "shape": list(arr.shape)})
        chunks.append(arr.tobytes())
    return entries, b"".join(chunks)


def checkpoint_id(model: Classifier) -> str:
    entries, blob = _state_blob(model)
    desc = json.dumps({"descriptor": model.descriptor, "tensors": entries}, sort_keys=True).encode()
    return hashlib.sha256(desc + blob).hexdigest()[:16]


def save_checkpoint(model: Classifier, directory: str | Path) -> str:
    """Write ``descriptor.json`` + ``params.bin``; returns the content-hash id."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries, blob = _state_blob(model)
    cid = checkpoint_id(model)
    doc = {"id": cid, "descriptor": model.descriptor, "tensors": entries}
    (directory / "descriptor.json").write_text(json.dumps(doc, indent=1, sort_keys=True))
    (directory / "params.bin").write_bytes(blob)
    return cid


def load_checkpoint(directory: str | Path) -> Classifier:
    directory = Path(directory)
    doc = json.loads((directory / "descriptor.json").read_text())
    blob = (directory / "params.bin").read_bytes()
    desc = dict(doc["descriptor"])
    if desc["arch"] == "efficientnet_b3":
        desc["params"] = {**desc.get("params", {}), "weights": None}
    model = build_model(desc)
    model.descriptor = doc["descriptor"]
    state, offset = {}, 0
    for e in doc["tensors"]:
        dtype = np.dtype(e["dtype"])
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        arr = np.frombuffer(blob, dtype=dtype, count=count, offset=offset).reshape(e["shape"])
        offset += count * dtype.itemsize
        state[e["name"]] = torch.from_numpy(arr.copy())
    float_dtypes = [t.dtype for t in state.values() if t.is_floating_point()]
    if float_dtypes:
        model.to(float_dtypes[0])
    model.load_state_dict(state)
    model.eval()
    if checkpoint_id(model) != doc["id"]:
        raise ValueError(f"checkpoint {directory}: content hash mismatch")
    return model
