import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from groupreg.rigid import dexp_rigid, exp_rigid

params = st.lists(st.floats(-2.0, 2.0), min_size=6, max_size=6).map(np.array)


def test_zero_is_identity():
    np.testing.assert_array_equal(exp_rigid(np.zeros(6)), np.eye(4))


def test_translation_and_rotation_about_z():
    np.testing.assert_allclose(exp_rigid([1, 2, 3, 0, 0, 0])[:3, 3], [1, 2, 3])
    r = exp_rigid([0, 0, 0, 0, 0, np.pi / 2])
    np.testing.assert_allclose(r[:3, :3] @ [1, 0, 0], [0, 1, 0], atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(params)
def test_exp_is_a_rigid_motion(q):
    m = exp_rigid(q)
    rot = m[:3, :3]
    np.testing.assert_allclose(rot.T @ rot, np.eye(3), atol=1e-10)
    assert np.linalg.det(rot) == pytest.approx(1.0)
    np.testing.assert_allclose(m[3], [0, 0, 0, 1], atol=1e-14)
    np.testing.assert_allclose(exp_rigid(-q) @ m, np.eye(4), atol=1e-10)


@settings(max_examples=20, deadline=None)
@given(params)
def test_dexp_matches_finite_differences(q):
    d = dexp_rigid(q)
    eps = 1e-6
    for j in range(6):
        e = np.zeros(6)
        e[j] = eps
        fd = (exp_rigid(q + e) - exp_rigid(q - e)) / (2 * eps)
        np.testing.assert_allclose(d[j], fd, atol=1e-7)


def test_rejects_bad_parameters():
    with pytest.raises(ValueError):
        exp_rigid(np.zeros(5))
    with pytest.raises(ValueError):
        exp_rigid([0, 0, np.nan, 0, 0, 0])
