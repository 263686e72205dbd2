import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.ndimage import gaussian_filter

from groupreg.field import identity_map, pull, softmax_implicit
from groupreg.regularizer import EnergySpec
from groupreg.shape import (WarpContext, bound_matrix, constrained_rigid_steps, enforce_zero_mean,
                            halving_search, logit_grad_hess, pcg, remove_constant,
                            shape_objective, template_grad_hess, template_objective,
                            update_rigid, update_template, update_velocity)
from groupreg.synth import centred_affine

SPEC = EnergySpec(2e-4, 0.0, 0.4, 0.1, 0.4)


def test_bound_example_two_classes():
    z = np.array([0.2, 0.3, 0.5])
    pi = np.array([0.1, 0.6, 0.3])
    _, h = logit_grad_hess(z, pi, w=0.0, bound_classes=2)
    np.testing.assert_array_equal(h, [[0.25, -0.25], [-0.25, 0.25]])


def test_gradient_is_prior_minus_responsibility():
    g, h = logit_grad_hess([0.2, 0.3, 0.5], [0.1, 0.6, 0.3], w=1.0)
    np.testing.assert_allclose(g, [-0.1, 0.3])
    np.testing.assert_allclose(h, [[0.09, -0.06], [-0.06, 0.24]])


def test_mix_weight_validated():
    with pytest.raises(ValueError):
        logit_grad_hess([0.5, 0.5], [0.5, 0.5], w=1.5)


simplex = st.lists(st.floats(1e-6, 1.0), min_size=2, max_size=6).map(
    lambda x: np.array(x) / np.sum(x))


@settings(max_examples=200, deadline=None)
@given(simplex)
def test_bound_over_all_classes_dominates(pi):
    k = len(pi) - 1
    _, true = logit_grad_hess(pi, pi, w=1.0)
    assert np.linalg.eigvalsh(bound_matrix(k, k + 1) - true).min() >= -1e-10


def test_bound_over_stored_classes_can_fail_to_dominate():
    # a stored class at probability one half with the background at one half
    pi = np.array([0.5, 0.0, 0.5])
    _, true = logit_grad_hess(pi, pi, w=1.0)
    assert np.linalg.eigvalsh(bound_matrix(2, 2) - true).min() < 0


def test_pcg_solves_spd_system():
    rng = np.random.default_rng(0)
    a = rng.standard_normal((20, 20))
    a = a @ a.T + 20 * np.eye(20)
    b = rng.standard_normal(20)
    x, its, rel = pcg(lambda v: a @ v, b, lambda r: r / np.diag(a), maxiter=100, tol=1e-12)
    np.testing.assert_allclose(a @ x, b, atol=1e-9)
    assert rel <= 1e-12 and its <= 20


def test_pcg_rejects_indefinite_operator():
    with pytest.raises(FloatingPointError):
        pcg(lambda v: -v, np.ones(3), lambda r: r)


def test_halving_search_returns_first_acceptable_fraction():
    seen = []

    def evaluate(scale):
        seen.append(scale)
        return (0.0 if scale <= 0.25 else 1.0), scale

    assert halving_search(evaluate, 0.5) == (0.25, 0.25)
    assert seen == [1.0, 0.5, 0.25]
    assert halving_search(lambda s: None, 0.0, max_halvings=2) == (0.0, None)


def test_zero_mean_examples():
    vs, qs = enforce_zero_mean([np.full((2, 2, 2, 3), 1.0), np.full((2, 2, 2, 3), 3.0)],
                               [np.arange(6.0), np.zeros(6)])
    np.testing.assert_array_equal(vs[0], -1.0)
    np.testing.assert_array_equal(vs[1], 1.0)
    np.testing.assert_array_equal(qs[0], np.arange(6.0) / 2)
    np.testing.assert_array_equal(qs[0] + qs[1], 0.0)
    np.testing.assert_array_equal(remove_constant(np.full((2, 2, 2, 3), 5.0)), 0.0)


def test_constrained_rigid_steps_sum_to_zero_and_are_stationary():
    rng = np.random.default_rng(1)
    hs = []
    for _ in range(3):
        a = rng.standard_normal((6, 6))
        hs.append(a @ a.T + np.eye(6))
    gs = [rng.standard_normal(6) for _ in range(3)]
    steps = constrained_rigid_steps(gs, hs)
    np.testing.assert_allclose(sum(steps), 0.0, atol=1e-12)
    # every subject sees the same multiplier: H_n d_n + g_n is common
    lam = [h @ d + g for h, d, g in zip(hs, steps, gs)]
    np.testing.assert_allclose(lam[0], lam[1], atol=1e-10)
    np.testing.assert_allclose(lam[0], lam[2], atol=1e-10)


def _problem(seed=0, k=2, shape=(10, 10, 10)):
    rng = np.random.default_rng(seed)
    t = 4 * gaussian_filter(rng.standard_normal(shape + (k,)), (1.5, 1.5, 1.5, 0)) / 0.3
    z = softmax_implicit(2 * rng.standard_normal(shape + (k,)))
    ctx = WarpContext(shape, centred_affine(shape), shape, centred_affine(shape), SPEC, steps=4)
    return t, z, np.ones(shape, bool), ctx


def test_identical_subjects_equal_one_weighted_subject():
    t, z, mask, ctx = _problem()
    psi = ctx.warp(np.zeros(t.shape[:3] + (3,)), np.array([0.3, 0, 0, 0, 0, 0.02])).psi
    g2, h2 = template_grad_hess(t, [(z, psi, mask, 1.0), (z, psi, mask, 1.0)])
    g1, h1 = template_grad_hess(t, [(z, psi, mask, 2.0)])
    np.testing.assert_allclose(g2, g1, atol=1e-12)
    np.testing.assert_allclose(h2, h1, atol=1e-12)


def test_template_update_is_monotone_with_dominating_bound():
    t, z, mask, ctx = _problem(1, k=3)
    psi = identity_map(t.shape[:3])
    items = [(z, psi, mask, 1.0)]
    spec = EnergySpec(1e-2, 0.5, 0.0)
    f = [template_objective(t, items, spec, 1.0)]
    for _ in range(5):
        t = update_template(t, items, spec, 1.0, w=0.0, bound_classes=4, cg_iter=5)
        f.append(template_objective(t, items, spec, 1.0))
    assert np.all(np.diff(f) <= 1e-9 * abs(f[0]))
    assert f[-1] < f[0]


def test_velocity_and_rigid_updates_never_increase_objective():
    t, _, mask, ctx = _problem(2)
    truth = ctx.warp(np.zeros(t.shape[:3] + (3,)), np.array([0.8, -0.5, 0.3, 0.0, 0.0, 0.05]))
    z = softmax_implicit(pull(t, truth.psi))
    v = np.zeros(t.shape[:3] + (3,))
    q = np.zeros(6)
    warp = ctx.warp(v, q)
    f = [shape_objective(t, warp, z, mask, v, ctx)]
    for _ in range(3):
        q, warp = update_rigid(t, v, q, warp, ctx, z, mask)
        f.append(shape_objective(t, warp, z, mask, v, ctx))
        v, warp = update_velocity(t, v, q, warp, ctx, z, mask)
        f.append(shape_objective(t, warp, z, mask, v, ctx))
    assert np.all(np.diff(f) <= 0)
    assert f[-1] < f[0]
