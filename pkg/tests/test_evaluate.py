from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from groupreg.evaluate import (compose_pairwise, dice, endpoint_error, mean_dice, nearest_index,
                               tpr_overlap, warp_labels)
from groupreg.field import Deformation, identity_map


def _column(values):
    return np.array(values).reshape(-1, 1, 1)


def test_tpr_on_toy_grid():
    ov = tpr_overlap(_column([1, 1, 2, 0]), _column([1, 2, 2, 0]))
    assert ov.regions == [1, 2]
    assert (ov.matched, ov.size) == ({1: 1, 2: 1}, {1: 1, 2: 2})
    assert ov.tpr(1) == 1.0 and ov.tpr(2) == 0.5
    assert ov.pooled == float(Fraction(2, 3))
    assert ov.mean == 0.75


def test_absent_region_is_undefined_and_excluded():
    ov = tpr_overlap(_column([3, 1]), _column([1, 1]), regions=[1, 3])
    assert ov.tpr(3) is None
    assert ov.present == [1]
    assert ov.pooled == 0.5 and ov.mean == 0.5


def test_empty_region_set_and_shape_mismatch():
    with pytest.raises(ValueError, match="empty"):
        tpr_overlap(_column([0, 0]), _column([0, 0]))
    with pytest.raises(ValueError, match="shape"):
        tpr_overlap(_column([1]), _column([1, 1]))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 3), st.integers(0, 3)), min_size=1, max_size=40))
def test_pooled_equals_size_weighted_mean(pairs):
    a = _column([p[0] for p in pairs])
    b = _column([p[1] for p in pairs])
    if not np.any(b) and not np.any(a):
        return
    ov = tpr_overlap(a, b)
    if not ov.present:
        return
    weighted = sum(Fraction(ov.size[r]) * Fraction(ov.matched[r], ov.size[r])
                   for r in ov.present) / sum(ov.size[r] for r in ov.present)
    assert ov.pooled == float(weighted)


def test_nearest_index_rounds_halves_down():
    np.testing.assert_array_equal(nearest_index([0.5, 1.5, 1.51, -0.5, 2.49]), [0, 1, 2, -1, 2])


def test_warp_labels_out_of_bounds_is_background():
    labels = np.arange(1, 5).reshape(4, 1, 1)
    coords = np.zeros((3, 1, 1, 3))
    coords[:, 0, 0, 0] = [0.5, 2.6, 4.0]
    np.testing.assert_array_equal(warp_labels(labels, coords).ravel(), [1, 4, 0])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 1000))
def test_warp_labels_never_invents_labels(seed):
    rng = np.random.default_rng(seed)
    labels = rng.choice([0, 3, 7], size=(5, 5, 5))
    coords = identity_map((5, 5, 5)) + 3 * rng.standard_normal((5, 5, 5, 3))
    assert set(np.unique(warp_labels(labels, coords))) <= {0, 3, 7}


def test_compose_translations():
    shape = (6, 6, 6)
    grid = identity_map(shape)
    src_inverse = Deformation(grid + [1.0, 0.0, -0.5], np.eye(4), shape, np.eye(4))
    tgt_forward = Deformation(grid + [0.0, 2.0, 0.0], np.eye(4), shape, np.eye(4))
    out = compose_pairwise(src_inverse, tgt_forward)
    np.testing.assert_allclose(out.map, grid + [1.0, 2.0, -0.5], atol=1e-10)


def test_compose_rejects_lattice_mismatch():
    a = Deformation(identity_map((4, 4, 4)), np.eye(4), (4, 4, 4), np.eye(4))
    b = Deformation(identity_map((4, 4, 4)), np.eye(4), (5, 5, 5), np.eye(4))
    with pytest.raises(ValueError, match="lattice"):
        compose_pairwise(a, b)


def test_dice_and_endpoint_error():
    a = _column([1, 1, 2, 0])
    b = _column([1, 2, 2, 0])
    assert dice(a, b) == {1: pytest.approx(2 / 3), 2: pytest.approx(2 / 3)}
    assert mean_dice(a, b) == pytest.approx(2 / 3)
    grid = identity_map((2, 2, 2))
    assert endpoint_error(grid, grid + [3.0, 4.0, 0.0]) == pytest.approx(5.0)
