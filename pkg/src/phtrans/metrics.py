"""Evaluation metrics on integer label volumes: Dice similarity and the
symmetric Hausdorff distance between mask boundaries."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

HD_OK = "ok"
HD_PRED_EMPTY = "pred_empty"
HD_TRUE_EMPTY = "true_empty"
HD_BOTH_EMPTY = "both_empty"


def dsc(pred_labels: np.ndarray, true_labels: np.ndarray, class_id: int) -> float:
    """2 |A * B| / (|A| + |B|) on the voxel masks of one class; 1.0 when both
    masks are empty."""
    if pred_labels.shape != true_labels.shape:
        raise ValueError(f"shape mismatch: {pred_labels.shape} vs {true_labels.shape}")
    a = pred_labels == class_id
    b = true_labels == class_id
    denom = int(a.sum()) + int(b.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / denom


def boundary_voxels(mask: np.ndarray) -> np.ndarray:
    """Coordinates of foreground voxels with at least one background
    6-neighbor; volume borders count as background."""
    m = np.asarray(mask, dtype=bool)
    if m.ndim != 3:
        raise ValueError(f"mask must be 3D, got shape {m.shape}")
    padded = np.pad(m, 1, constant_values=False)
    interior = np.ones_like(m)
    for ax in range(3):
        for off in (0, 2):
            idx = tuple(
                slice(off, off + m.shape[i]) if i == ax else slice(1, 1 + m.shape[i])
                for i in range(3)
            )
            interior &= padded[idx]
    return np.argwhere(m & ~interior)


def _directed_max_min(a: np.ndarray, b: np.ndarray) -> float:
    """max over a of the min Euclidean distance to b; inputs are already
    spacing-scaled coordinates."""
    worst = 0.0
    step = 1024
    for i in range(0, len(a), step):
        chunk = a[i : i + step]
        d2 = ((chunk[:, None, :] - b[None, :, :]) ** 2).sum(axis=2)
        worst = max(worst, float(np.sqrt(d2.min(axis=1)).max()))
    return worst


@dataclass(frozen=True)
class HausdorffResult:
    distance: float
    flag: str


def hausdorff(pred_mask: np.ndarray, true_mask: np.ndarray, spacing=(1.0, 1.0, 1.0)) -> HausdorffResult:
    """Symmetric max over directed max-min Euclidean distances between
    boundary voxel centers, scaled by physical spacing.

    One empty mask yields an infinite sentinel, two empty masks distance 0;
    the flag says which case applied.
    """
    if pred_mask.shape != true_mask.shape:
        raise ValueError(f"shape mismatch: {pred_mask.shape} vs {true_mask.shape}")
    spacing = np.asarray(spacing, dtype=np.float64)
    pa = boundary_voxels(pred_mask)
    pb = boundary_voxels(true_mask)
    if len(pa) == 0 and len(pb) == 0:
        return HausdorffResult(0.0, HD_BOTH_EMPTY)
    if len(pa) == 0:
        return HausdorffResult(float("inf"), HD_PRED_EMPTY)
    if len(pb) == 0:
        return HausdorffResult(float("inf"), HD_TRUE_EMPTY)
    sa = pa * spacing
    sb = pb * spacing
    return HausdorffResult(max(_directed_max_min(sa, sb), _directed_max_min(sb, sa)), HD_OK)


def evaluate_case(
    pred_labels: np.ndarray,
    true_labels: np.ndarray,
    num_classes: int,
    spacing=(1.0, 1.0, 1.0),
    case_id: str = "case",
) -> list[dict]:
    """One report row per foreground class: case id, class, DSC, HD, HD flag."""
    rows = []
    for c in range(1, num_classes):
        hd = hausdorff(pred_labels == c, true_labels == c, spacing)
        rows.append(
            {
                "case_id": case_id,
                "class_id": c,
                "dsc": dsc(pred_labels, true_labels, c),
                "hd": hd.distance,
                "hd_flag": hd.flag,
            }
        )
    return rows
