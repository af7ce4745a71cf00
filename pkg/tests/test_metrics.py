import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from phtrans.metrics import (
    HD_BOTH_EMPTY,
    HD_OK,
    HD_PRED_EMPTY,
    HD_TRUE_EMPTY,
    boundary_voxels,
    dsc,
    evaluate_case,
    hausdorff,
)


def boundary_oracle(mask):
    """Triple loop over voxels; 6-neighborhood with borders as background."""
    out = []
    d, h, w = mask.shape
    for a in range(d):
        for b in range(h):
            for c in range(w):
                if not mask[a, b, c]:
                    continue
                for da, db, dc in ((1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)):
                    na, nb, nc = a + da, b + db, c + dc
                    if not (0 <= na < d and 0 <= nb < h and 0 <= nc < w) or not mask[na, nb, nc]:
                        out.append((a, b, c))
                        break
    return out


def hausdorff_oracle(a_mask, b_mask, spacing):
    """All-pairs max-min over boundary voxels."""
    pa = boundary_oracle(a_mask)
    pb = boundary_oracle(b_mask)

    def directed(src, dst):
        worst = 0.0
        for p in src:
            best = math.inf
            for q in dst:
                d2 = sum(((pi - qi) * s) ** 2 for pi, qi, s in zip(p, q, spacing))
                best = min(best, math.sqrt(d2))
            worst = max(worst, best)
        return worst

    return max(directed(pa, pb), directed(pb, pa))


def _blob(rng, shape, p=0.2):
    return rng.random(shape) < p


# ---------------------------------------------------------------------------
# dsc


def test_dsc_identical_and_disjoint():
    a = np.zeros((3, 3, 3), dtype=np.int64)
    a[1, 1, 1] = 1
    assert dsc(a, a, 1) == 1.0
    b = np.zeros_like(a)
    b[0, 0, 0] = 1
    assert dsc(a, b, 1) == 0.0


def test_dsc_definition_case():
    # |A| = 3, |B| = 5, |A & B| = 2 -> 2*2/8 = 0.5
    a = np.zeros((1, 1, 8), dtype=np.int64)
    b = np.zeros_like(a)
    a[0, 0, :3] = 1
    b[0, 0, 1:6] = 1
    assert dsc(a, b, 1) == 0.5
    assert dsc(b, a, 1) == 0.5  # symmetric


def test_dsc_both_empty_is_one():
    z = np.zeros((2, 2, 2), dtype=np.int64)
    assert dsc(z, z, 1) == 1.0


@given(st.integers(0, 10_000))
def test_dsc_self_and_symmetry(seed):
    rng = np.random.default_rng(seed)
    a = rng.integers(0, 2, size=(3, 4, 3))
    b = rng.integers(0, 2, size=(3, 4, 3))
    assert dsc(a, a, 1) == 1.0
    assert dsc(a, b, 1) == dsc(b, a, 1)


# ---------------------------------------------------------------------------
# boundary and hausdorff


def test_boundary_of_solid_cube():
    mask = np.zeros((5, 5, 5), dtype=bool)
    mask[1:4, 1:4, 1:4] = True
    bnd = boundary_voxels(mask)
    assert len(bnd) == 26  # all cube voxels except the center
    assert not any((tuple(v) == (2, 2, 2)) for v in bnd)


def test_boundary_includes_volume_edge():
    mask = np.ones((2, 2, 2), dtype=bool)
    assert len(boundary_voxels(mask)) == 8


def test_hausdorff_identical_masks():
    mask = np.zeros((4, 4, 4), dtype=bool)
    mask[1:3, 1:3, 1:3] = True
    res = hausdorff(mask, mask)
    assert res.distance == 0.0
    assert res.flag == HD_OK


def test_hausdorff_point_distance():
    a = np.zeros((1, 1, 4), dtype=bool)
    b = np.zeros_like(a)
    a[0, 0, 0] = True
    b[0, 0, 3] = True
    assert hausdorff(a, b).distance == 3.0
    assert hausdorff(a, b, spacing=(1.0, 1.0, 2.0)).distance == 6.0


def test_hausdorff_empty_mask_sentinels():
    full = np.ones((2, 2, 2), dtype=bool)
    empty = np.zeros_like(full)
    assert hausdorff(empty, full) == type(hausdorff(empty, full))(float("inf"), HD_PRED_EMPTY)
    assert hausdorff(full, empty).flag == HD_TRUE_EMPTY
    assert math.isinf(hausdorff(full, empty).distance)
    both = hausdorff(empty, empty)
    assert both.distance == 0.0 and both.flag == HD_BOTH_EMPTY


@given(st.integers(0, 10_000))
def test_hausdorff_matches_bruteforce_oracle(seed):
    rng = np.random.default_rng(seed)
    a = _blob(rng, (4, 4, 4), 0.3)
    b = _blob(rng, (4, 4, 4), 0.3)
    spacing = (1.0, 0.5, 2.0)
    if not a.any() or not b.any():
        return
    got = hausdorff(a, b, spacing)
    assert got.distance == hausdorff_oracle(a, b, spacing)
    # symmetry
    assert got.distance == hausdorff(b, a, spacing).distance


def test_boundary_matches_oracle():
    rng = np.random.default_rng(7)
    mask = _blob(rng, (5, 4, 5), 0.4)
    got = {tuple(v) for v in boundary_voxels(mask)}
    assert got == set(boundary_oracle(mask))


def test_hausdorff_positive_for_different_boundaries():
    a = np.zeros((4, 4, 4), dtype=bool)
    b = np.zeros_like(a)
    a[0, 0, 0] = True
    b[0, 0, 0] = True
    b[3, 3, 3] = True
    assert hausdorff(a, b).distance > 0.0


# ---------------------------------------------------------------------------
# per-case report


def test_evaluate_case_rows():
    rng = np.random.default_rng(8)
    pred = rng.integers(0, 3, size=(4, 4, 4))
    true = rng.integers(0, 3, size=(4, 4, 4))
    rows = evaluate_case(pred, true, num_classes=3, case_id="c0")
    assert len(rows) == 2  # foreground classes only
    assert {r["class_id"] for r in rows} == {1, 2}
    for r in rows:
        assert 0.0 <= r["dsc"] <= 1.0
        assert r["case_id"] == "c0"
