"""One round of classifier training.

CORAL loss with OUSM batch filtering, momentum SGD under cosine annealing
with warm restarts, and best-epoch selection by patch-level validation F1.
"""

from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .augment import AugmentConfig, StainBasis, apply_pipeline, balanced_mixup, sample_mixup_lambda
from .dataset import PatchSet
from .evaluation import prf1
from .model import Classifier, checkpoint_id, positive_probability, save_checkpoint, to_input

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs_per_round: int = 100
    batch_size: int = 32
    momentum: float = 0.9
    lr_max: float = 6e-4
    lr_min: float = 0.0
    restart_period: float = 25
    restart_multiplier: float = 1.0
    ousm_drop_fraction: float = 0.1
    ousm_warmup_epochs: int = 0
    refresh_bn_stats: bool = False
    weight_decay: float = 0.0
    seed: int = 0

    def validate(self):
        if self.epochs_per_round < 1:
            raise ValueError("epochs_per_round must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0.0 <= self.ousm_drop_fraction < 0.5:
            raise ValueError("ousm_drop_fraction must lie in [0, 0.5)")
        if self.ousm_warmup_epochs < 0:
            raise ValueError("ousm_warmup_epochs must be >= 0")
        if not self.lr_max > self.lr_min >= 0.0:
            raise ValueError("lr_max must exceed lr_min, and lr_min must be >= 0")
        if self.restart_period <= 0:
            raise ValueError("restart_period must be > 0")
        if self.restart_multiplier < 1.0:
            raise ValueError("restart_multiplier must be >= 1")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")


@dataclass
class RoundResult:
    best_checkpoint_id: str
    history: list[dict]
    selected_epoch: int
    state_dict: dict = field(repr=False, default_factory=dict)
    diverged: bool = False


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, result: RoundResult):
        super().__init__(message)
        self.result = result


def rank_levels(labels: torch.Tensor, num_ranks: int) -> torch.Tensor:
    """Binary level targets: ``levels[:, k] = 1{label > k}`` for k = 0..K-2."""
    ks = torch.arange(num_ranks - 1, device=labels.device)
    return (labels.view(-1, 1) > ks.view(1, -1)).to(torch.get_default_dtype())


def coral_loss_levels(logits: torch.Tensor, levels: torch.Tensor) -> torch.Tensor:
    """Per-sample CORAL loss for (possibly soft) level targets."""
    levels = levels.to(logits.dtype)
    return -(levels * F.logsigmoid(logits) + (1 - levels) * F.logsigmoid(-logits)).sum(dim=1)


def coral_loss(logits: torch.Tensor, labels) -> torch.Tensor:
    """Per-sample CORAL loss for integer rank labels in {0, ..., K-1}."""
    logits = torch.as_tensor(logits)
    if logits.ndim == 1:
        logits = logits.view(-1, 1)
    labels = torch.as_tensor(labels, dtype=torch.long).view(-1)
    k = logits.shape[1] + 1
    if labels.numel() and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k - 1}]")
    return coral_loss_levels(logits, rank_levels(labels, k))


def ousm_filter(per_sample_losses, drop_count: int) -> np.ndarray:
    """Indices kept after dropping the ``drop_count`` largest losses.

    Among equal losses the higher index is dropped first. Returned indices
    are in ascending order.
    """
    losses = per_sample_losses
    if isinstance(losses, torch.Tensor):
        losses = losses.detach().cpu().numpy()
    losses = np.asarray(losses, dtype=np.float64).ravel()
    b = len(losses)
    if not 0 <= drop_count < b:
        raise ValueError(f"drop_count must lie in [0, {b - 1}], got {drop_count}")
    if drop_count == 0:
        return np.arange(b)
    # lexsort keys: primary -loss, secondary -index
    order = np.lexsort((-np.arange(b), -losses))
    return np.sort(order[drop_count:])


def lr_at(t: float, period: float, config: TrainConfig) -> float:
    """Cosine-annealed rate at position ``t`` of a cycle of length ``period``."""
    t = min(max(t, 0.0), period)
    return config.lr_min + 0.5 * (config.lr_max - config.lr_min) * (1 + math.cos(math.pi * t / period))


def schedule_lr(progress: float, config: TrainConfig) -> float:
    """Rate at global epoch ``progress`` with warm restarts."""
    period = float(config.restart_period)
    t = progress
    while t >= period:
        t -= period
        period *= config.restart_multiplier
    return lr_at(t, period, config)


def balanced_indices(targets: np.ndarray, count: int, rng: np.random.Generator) -> np.ndarray:
    """Class-balanced sample: pick a class uniformly, then a member uniformly."""
    classes = np.unique(targets)
    members = [np.flatnonzero(targets == c) for c in classes]
    picks = rng.integers(0, len(classes), size=count)
    return np.array([members[c][rng.integers(0, len(members[c]))] for c in picks], dtype=np.int64)


@torch.no_grad()
def predict_proba(model: Classifier, pixels: np.ndarray, batch_size: int = 64) -> np.ndarray:
    model.eval()
    dtype = next(model.parameters()).dtype
    out = []
    for i in range(0, len(pixels), batch_size):
        out.append(positive_probability(model(to_input(pixels[i:i + batch_size], dtype))).cpu().numpy())
    return np.concatenate(out) if out else np.zeros((0,))


@torch.no_grad()
def refresh_bn_statistics(model: Classifier, pixels: np.ndarray, batch_size: int = 64) -> None:
    """Recompute BatchNorm running statistics as a plain average over ``pixels``.

    Running statistics otherwise track the last few augmented/mixed batches,
    which can leave eval-mode predictions far from what training optimized.
    """
    norms = [m for m in model.modules() if isinstance(m, torch.nn.modules.batchnorm._BatchNorm)]
    if not norms or len(pixels) == 0:
        return
    saved = [m.momentum for m in norms]
    for m in norms:
        m.reset_running_stats()
        m.momentum = None
    model.train()
    dtype = next(model.parameters()).dtype
    for i in range(0, len(pixels), batch_size):
        chunk = pixels[i:i + batch_size]
        if len(chunk) < 2:
            chunk = pixels[max(0, len(pixels) - 2):]
        model(to_input(chunk, dtype))
    for m, momentum in zip(norms, saved):
        m.momentum = momentum
    model.eval()


def patch_metrics(probs: np.ndarray, targets: np.ndarray, threshold: float = 0.5) -> dict:
    pred = probs > threshold
    tp = int(np.sum(pred & (targets == 1)))
    fp = int(np.sum(pred & (targets == 0)))
    fn = int(np.sum(~pred & (targets == 1)))
    _, _, f1 = prf1(tp, fp, fn)
    return {"f1": f1, "accuracy": float(np.mean(pred == (targets == 1))) if len(targets) else 0.0}


def _augment_batch(pixels, idx, augment, rng, basis):
    if not any((augment.rotation, augment.flip, augment.elastic, augment.grid_distortion, augment.affine,
                augment.stain, augment.color_jitter, augment.blur, augment.noise)):
        return pixels[idx]
    return np.stack([apply_pipeline(pixels[i], augment, rng, basis) for i in idx])


def train_round(train: PatchSet, val: PatchSet, model: Classifier, config: TrainConfig | None = None,
                augment: AugmentConfig | None = None, log_path: str | Path | None = None,
                checkpoint_dir: str | Path | None = None) -> RoundResult:
    """Train ``model`` in place and leave it holding the best-epoch weights."""
    config = config or TrainConfig()
    augment = augment or AugmentConfig()
    config.validate()
    augment.validate()
    x_train, y_train = train.arrays()
    x_val, y_val = val.arrays()
    if len(x_train) == 0 or len(x_val) == 0:
        raise ValueError("train and val patch sets must be nonempty")
    if set(np.unique(y_val)) != {0, 1}:
        raise ValueError("validation set must contain both classes")

    rng = np.random.default_rng(config.seed)
    torch.manual_seed(config.seed)
    basis = StainBasis.default()
    num_ranks = model.num_ranks
    dtype = next(model.parameters()).dtype
    opt = torch.optim.SGD(model.parameters(), lr=config.lr_max, momentum=config.momentum,
                          weight_decay=config.weight_decay)
    n = len(x_train)
    n_batches = max(1, math.ceil(n / config.batch_size))
    history: list[dict] = []
    best_f1, best_epoch, best_state = -1.0, 0, copy.deepcopy(model.state_dict())
    log_file = open(log_path, "a") if log_path else None
    diverged = False
    try:
        for epoch in range(config.epochs_per_round):
            model.train()
            order = rng.permutation(n)
            losses, dropped = [], 0
            lr = config.lr_max
            for b in range(n_batches):
                idx = order[b * config.batch_size:(b + 1) * config.batch_size]
                if len(idx) < 2 and n >= 2:
                    # BatchNorm needs more than one sample
                    idx = np.concatenate([idx, order[:1]])
                lr = schedule_lr(epoch + b / n_batches, config)
                for group in opt.param_groups:
                    group["lr"] = lr
                xb = _augment_batch(x_train, idx, augment, rng, basis)
                levels = rank_levels(torch.from_numpy(y_train[idx]), num_ranks)
                inputs = to_input(xb, dtype)
                if augment.mixup:
                    bidx = balanced_indices(y_train, len(idx), rng)
                    xbal = to_input(_augment_batch(x_train, bidx, augment, rng, basis), dtype)
                    lbal = rank_levels(torch.from_numpy(y_train[bidx]), num_ranks)
                    lam = sample_mixup_lambda(augment.mixup_alpha, rng)
                    inputs, levels = balanced_mixup(inputs, levels, xbal, lbal, lam)
                per_sample = coral_loss_levels(model(inputs), levels)
                k = 0 if epoch < config.ousm_warmup_epochs else \
                    min(int(config.ousm_drop_fraction * len(idx)), len(idx) - 1)
                keep = torch.from_numpy(ousm_filter(per_sample, k))
                loss = per_sample[keep].mean()
                if not torch.isfinite(loss):
                    diverged = True
                    break
                opt.zero_grad()
                loss.backward()
                opt.step()
                model.head.sort_biases_()
                losses.append(float(loss.detach()))
                dropped += k
            if diverged:
                break
            if config.refresh_bn_stats:
                refresh_bn_statistics(model, x_train, max(config.batch_size, 64))
            biases = model.head.biases.detach()
            assert bool(torch.all(biases[:-1] >= biases[1:])), "CORAL biases lost their ordering"
            metrics = patch_metrics(predict_proba(model, x_val, max(config.batch_size, 64)), y_val)
            record = {"epoch": epoch + 1, "lr": lr, "mean_loss": float(np.mean(losses)),
                      "dropped": dropped, "val_f1": metrics["f1"], "val_accuracy": metrics["accuracy"]}
            history.append(record)
            if log_file:
                log_file.write(json.dumps(record) + "\n")
            log.info("epoch %d loss %.4f val_f1 %.4f", epoch + 1, record["mean_loss"], record["val_f1"])
            if metrics["f1"] > best_f1:
                best_f1, best_epoch = metrics["f1"], epoch + 1
                best_state = copy.deepcopy(model.state_dict())
    finally:
        if log_file:
            log_file.close()

    model.load_state_dict(best_state)
    model.eval()
    cid = save_checkpoint(model, checkpoint_dir) if checkpoint_dir else checkpoint_id(model)
    result = RoundResult(cid, history, best_epoch, best_state, diverged)
    if diverged:
        raise TrainingDiverged(f"non-finite loss in epoch {len(history) + 1}; "
                               f"last good checkpoint {cid}", result)
    return result


def select_epoch(val_f1_history) -> int:
    """1-indexed earliest argmax."""
    values = list(val_f1_history)
    return values.index(max(values)) + 1
