"""Joint cross-entropy + soft Dice training loss with multi-scale
deep-supervision weighting."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import engine
from .engine import ShapeError, Tensor


@dataclass(frozen=True)
class LossConfig:
    ce_weight: float = 1.0
    dice_weight: float = 1.0
    dice_eps: float = 1e-5
    ds_weights: Optional[tuple[float, ...]] = None  # finest-first; derived if None


def deep_supervision_weights(n_scales: int) -> np.ndarray:
    """Per-scale weights, finest scale first: geometric halving, normalized
    to sum to 1."""
    raw = 0.5 ** np.arange(n_scales)
    return raw / raw.sum()


def check_labels(labels: np.ndarray, num_classes: int):
    if labels.ndim != 4:
        raise ShapeError(f"labels must be (N, D, H, W), got {labels.shape}")
    if labels.min() < 0 or labels.max() >= num_classes:
        raise ShapeError(
            f"label ids must lie in [0, {num_classes}), found "
            f"[{labels.min()}, {labels.max()}]"
        )


def one_hot(labels: np.ndarray, num_classes: int, dtype=np.float32) -> np.ndarray:
    check_labels(labels, num_classes)
    n, d, h, w = labels.shape
    flat = labels.reshape(-1).astype(np.int64)
    out = np.zeros((flat.size, num_classes), dtype=dtype)
    out[np.arange(flat.size), flat] = 1.0
    return out.reshape(n, d, h, w, num_classes).transpose(0, 4, 1, 2, 3)


def _check_logits(logits: Tensor, labels: np.ndarray):
    if logits.data.ndim != 5:
        raise ShapeError(f"logits must be (N, K, D, H, W), got {tuple(logits.shape)}")
    want = (labels.shape[0],) + tuple(labels.shape[1:])
    got = (logits.shape[0],) + tuple(logits.shape[2:])
    if want != got:
        raise ShapeError(f"logits {tuple(logits.shape)} do not cover labels {labels.shape}")


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean voxelwise negative log-likelihood of the true class, computed
    through a max-shifted log-sum-exp."""
    _check_logits(logits, labels)
    k = logits.shape[1]
    hot = one_hot(labels, k, dtype=logits.data.dtype)
    log_probs = engine.log_softmax(logits, axis=1)
    voxels = labels.size
    return engine.mul(engine.reduce_sum(engine.mul(log_probs, hot)), -1.0 / voxels)


def soft_dice_loss(logits: Tensor, labels: np.ndarray, eps: float = 1e-5) -> Tensor:
    """1 - mean foreground soft Dice, aggregated over the whole batch per
    class: (2 * sum(p * g) + eps) / (sum(p) + sum(g) + eps)."""
    _check_logits(logits, labels)
    k = logits.shape[1]
    if k < 2:
        raise ShapeError("soft dice needs at least one foreground class")
    hot = one_hot(labels, k, dtype=logits.data.dtype)
    probs = engine.softmax(logits, axis=1)
    inter = engine.reduce_sum(engine.mul(probs, hot), axis=(0, 2, 3, 4))  # (K,)
    psum = engine.reduce_sum(probs, axis=(0, 2, 3, 4))
    gsum = hot.sum(axis=(0, 2, 3, 4))  # constant
    dice = engine.div(
        engine.add(engine.mul(inter, 2.0), eps),
        engine.add(engine.add(psum, gsum), eps),
    )
    fg = engine.narrow(dice, 0, 1, k - 1)
    return engine.add(1.0, engine.mul(engine.reduce_mean(fg), -1.0))


def joint_loss(logits: Tensor, labels: np.ndarray, cfg: LossConfig = LossConfig()) -> Tensor:
    ce = engine.mul(cross_entropy(logits, labels), cfg.ce_weight)
    dice = engine.mul(soft_dice_loss(logits, labels, cfg.dice_eps), cfg.dice_weight)
    return engine.add(ce, dice)


def downsample_labels(labels: np.ndarray, factor) -> np.ndarray:
    """Nearest-neighbor label reduction: keep every factor-th voxel."""
    fd, fh, fw = (int(f) for f in factor)
    for ax, f in enumerate((fd, fh, fw)):
        if labels.shape[1 + ax] % f != 0:
            raise ShapeError(
                f"label extent {labels.shape[1 + ax]} not divisible by scale "
                f"factor {f} on axis {ax + 1}"
            )
    return labels[:, ::fd, ::fh, ::fw]


def deep_supervision_loss(
    outputs: Sequence[Tensor],
    labels: np.ndarray,
    scale_factors: Sequence[tuple[int, int, int]],
    cfg: LossConfig = LossConfig(),
) -> Tensor:
    """Weighted joint loss over multi-scale outputs.

    ``outputs`` and ``scale_factors`` run deepest first; labels are reduced
    to each scale by nearest neighbor. The finest scale carries the highest
    weight; weights sum to 1.
    """
    if len(outputs) == 0:
        raise ShapeError("deep supervision needs at least one output")
    if len(outputs) != len(scale_factors):
        raise ShapeError(
            f"{len(outputs)} outputs but {len(scale_factors)} scale factors"
        )
    n = len(outputs)
    if cfg.ds_weights is not None:
        if len(cfg.ds_weights) != n:
            raise ShapeError(f"need {n} deep-supervision weights, got {len(cfg.ds_weights)}")
        weights = np.asarray(cfg.ds_weights, dtype=np.float64)
        if (weights <= 0).any() or abs(weights.sum() - 1.0) > 1e-6:
            raise ShapeError("deep-supervision weights must be positive and sum to 1")
    else:
        weights = deep_supervision_weights(n)
    total = None
    for i, (out, factor) in enumerate(zip(outputs, scale_factors)):
        small = downsample_labels(labels, factor)
        if tuple(out.shape[2:]) != small.shape[1:]:
            raise ShapeError(
                f"output {i} extents {tuple(out.shape[2:])} do not match labels "
                f"at scale {tuple(factor)} -> {small.shape[1:]}"
            )
        w = float(weights[n - 1 - i])  # outputs deepest first, weights finest first
        term = engine.mul(joint_loss(out, small, cfg), w)
        total = term if total is None else engine.add(total, term)
    return total
