"""Acceptance criteria 1-9, one verdict line each.

Run with ``pytest tests/test_acceptance.py -v -s`` to see the lines as they
are produced; they are repeated in the terminal summary.
"""
import time

import numpy as np
from fractions import Fraction
from scipy.ndimage import gaussian_filter

from groupreg.diffeo import sample_map, shoot
from groupreg.evaluate import mean_dice, tpr_overlap, warp_labels
from groupreg.field import identity_map, softmax_implicit
from groupreg.fit import FitConfig, PyramidSchedule, fit_groupwise, fit_to_template
from groupreg.regularizer import EnergySpec, energy, greens_solve, operator_apply
from groupreg.shape import (WarpContext, bound_matrix, logit_grad_hess, rigid_grad_hess,
                            shape_objective, template_grad_hess, template_objective,
                            velocity_grad_hess)
from groupreg.synth import centred_affine, default_appearance, make_phantom_template, synth_generate

VELOCITY_SPEC = EnergySpec(2e-4, 0.0, 0.4, 0.1, 0.4)


def _smooth(rng, shape, sigma):
    return gaussian_filter(rng.standard_normal(shape), [sigma] * 3 + [0] * (len(shape) - 3),
                           mode="wrap")


def _relative(a, b):
    return abs(a - b) / max(abs(a), abs(b), 1e-12)


def test_gradients_match_central_differences(report):
    start = time.time()
    rng = np.random.default_rng(0)
    k = 2
    shape = (8, 8, 8)
    t = 6.0 * _smooth(rng, shape + (k,), 1.5) / 0.3
    subject_affine = centred_affine(shape, 1.0)
    subject_affine[:3, :3] = np.diag([1.05, 0.97, 1.0])
    ctx = WarpContext(shape, centred_affine(shape, 1.0), shape, subject_affine,
                      VELOCITY_SPEC, steps=1)
    v = 0.5 * _smooth(rng, shape + (3,), 1.5) / 0.3
    q = np.array([0.3, -0.2, 0.1, 0.03, -0.02, 0.04])
    z = softmax_implicit(2.0 * rng.standard_normal(shape + (k,)))
    mask = np.ones(shape, bool)
    warp = ctx.warp(v, q)
    eps = 1e-5

    def f(vv, qq):
        return shape_objective(t, ctx.warp(vv, qq), z, mask, vv, ctx)

    worst = {}
    g, _ = velocity_grad_hess(t, v, warp, ctx, z, mask)
    errs = []
    for _ in range(5):
        d = rng.standard_normal(v.shape)
        fd = (f(v + eps * d, q) - f(v - eps * d, q)) / (2 * eps)
        errs.append(_relative(fd, np.vdot(g, d)))
    worst["velocity"] = max(errs)

    gq, _ = rigid_grad_hess(t, q, warp, ctx, z, mask)
    errs = []
    for j in range(6):
        e = np.zeros(6)
        e[j] = eps
        fd = (f(v, q + e) - f(v, q - e)) / (2 * eps)
        errs.append(_relative(fd, gq[j]))
    worst["rigid"] = max(errs)

    spec = EnergySpec(1e-2, 0.5, 0.0)
    items = [(z, warp.psi, mask, 1.0)]
    gt, _ = template_grad_hess(t, items)
    gt = gt + operator_apply(t, spec, 1.0)
    errs = []
    for _ in range(5):
        d = rng.standard_normal(t.shape)
        fd = (template_objective(t + eps * d, items, spec, 1.0)
              - template_objective(t - eps * d, items, spec, 1.0)) / (2 * eps)
        errs.append(_relative(fd, np.vdot(gt, d)))
    worst["template"] = max(errs)
    elapsed = time.time() - start
    ok = max(worst.values()) < 1e-4 and elapsed < 60
    detail = ", ".join(f"{key} {val:.1e}" for key, val in worst.items())
    assert report(1, ok, f"max relative error {detail}; {elapsed:.1f}s")


def test_hessian_endpoints_and_dominance(report):
    rng = np.random.default_rng(1)
    k = 3
    pi = rng.dirichlet(np.ones(k + 1), size=10_000)
    z = rng.dirichlet(np.ones(k + 1), size=10_000)
    p = pi[:, :k]
    _, h1 = logit_grad_hess(z, pi, w=1.0)
    true = np.stack([np.diag(x) - np.outer(x, x) for x in p])
    _, h0 = logit_grad_hess(z, pi, w=0.0, bound_classes=k)
    bound_k = 0.5 * (np.eye(k) - np.ones((k, k)) / k)
    endpoints = np.array_equal(h1, true) and np.array_equal(h0, np.broadcast_to(bound_k, h0.shape))
    min_k = np.linalg.eigvalsh(bound_matrix(k, k) - true).min()
    min_k1 = np.linalg.eigvalsh(bound_matrix(k, k + 1) - true).min()
    # the bound over K fails to dominate near sparse probability vectors
    # (deviation recorded); the K+1 bound used by default must dominate
    ok = endpoints and min_k1 >= -1e-10
    assert report(2, ok, f"endpoints exact={endpoints}; min eigenvalue of bound-true: "
                         f"denominator K {min_k:.3e} (filed deviation), K+1 {min_k1:.3e}")


def test_elbo_monotone_at_zero_weight(report):
    start = time.time()
    k = 3
    template = make_phantom_template((16, 16, 16), k, seed=1, smoothing=2.0)
    gw = default_appearance(k)
    base = FitConfig(classes=k)
    images = [synth_generate(template, gw, base, seed=s, displacement=1.0).image
              for s in range(3)]
    schedule = PyramidSchedule(((1.0, 25),))
    finals = {}
    worst = None
    steps = None
    for w in (0.0, 0.8):
        res = fit_groupwise(images, FitConfig(classes=k, mix_weight=w, schedule=schedule))
        e = np.array([r.elbo for r in res.trace])
        finals[w] = e[-1]
        if w == 0.0:
            steps = len(e)
            worst = float(np.min(np.diff(e) / np.abs(e[:-1])))
    elapsed = time.time() - start
    ok = (steps == 200 and worst >= -1e-6 and finals[0.8] >= finals[0.0] and elapsed < 600)
    assert report(3, ok, f"{steps} steps, worst relative change {worst:.1e} at w=0; final "
                         f"ELBO w=0 {finals[0.0]:.2f}, w=0.8 {finals[0.8]:.2f}; {elapsed:.0f}s")


def test_shooting_inverse_and_step_convergence(report):
    shape = (32, 32, 32)
    ident = identity_map(shape)
    results = []
    for seed in range(3):
        rng = np.random.default_rng(seed)
        v = _smooth(rng, shape + (3,), 4.0)
        v *= 2.0 / np.abs(v).max()
        e = energy(v, VELOCITY_SPEC, 1.0, vector=True, voxel_units=True)
        assert e < 600
        errs = []
        for steps in (8, 16, 32):
            phi, iphi = shoot(v, VELOCITY_SPEC, 1.0, steps)
            errs.append(float(np.abs(sample_map(phi, iphi) - ident).max()))
        results.append(errs)
    ok = all(r[0] < 0.1 and r[0] > r[1] > r[2] for r in results)
    text = "; ".join("/".join(f"{x:.3f}" for x in r) for r in results)
    assert report(4, ok, f"inverse error at 8/16/32 steps per field: {text}")


def test_regularizer_algebra(report):
    rng = np.random.default_rng(2)
    shape = (12, 10, 8)
    vs = (1.0, 1.5, 2.0)
    a = rng.standard_normal(shape + (3,))
    b = rng.standard_normal(shape + (3,))
    la = operator_apply(a, VELOCITY_SPEC, vs, vector=True, voxel_units=True)
    lb = operator_apply(b, VELOCITY_SPEC, vs, vector=True, voxel_units=True)
    adjoint = abs(np.vdot(a, lb) - np.vdot(b, la)) / abs(np.vdot(a, la))
    psd = np.vdot(a, la) > 0
    back = greens_solve(la, VELOCITY_SPEC, vs, vector=True, voxel_units=True)
    roundtrip = np.abs(back - a).max() / np.abs(a).max()

    def continuum(n):
        x = (np.arange(n) + 0.5) / n * 2 * np.pi
        gx, gy, gz = np.meshgrid(x, x, x, indexing="ij")
        return (np.sin(gx) * np.cos(2 * gy) + 0.5 * np.cos(gz))[..., None]

    spec = EnergySpec(0.1, 0.5, 0.2)
    coarse = energy(continuum(32), spec, 2 * np.pi / 32)
    fine = energy(continuum(64), spec, 2 * np.pi / 64)
    rel = abs(coarse - fine) / fine
    ok = adjoint <= 1e-10 and psd and roundtrip <= 1e-6 and rel < 0.05
    assert report(5, ok, f"adjointness {adjoint:.1e}, round trip {roundtrip:.1e}, "
                         f"two-resolution energy difference {100 * rel:.2f}%")


def _template_labels(template):
    k = template.channels
    logits = np.concatenate([template.data, np.zeros(template.shape + (1,))], -1)
    winner = np.argmax(logits, -1)
    return np.where(winner == k, 0, winner + 1)


def test_self_recovery(report):
    start = time.time()
    k = 3
    template = make_phantom_template((24, 24, 24), k, seed=0)
    labels = _template_labels(template)
    gw = default_appearance(k)
    config = FitConfig(classes=k, schedule=PyramidSchedule.from_factors(1.0, [2, 1], [8, 12]))
    errors, dices = [], []
    for seed in range(10):
        truth = synth_generate(template, gw, config, seed=seed)
        res = fit_to_template(truth.image, template, gw, config)
        psi = res.subjects[0].warp.psi
        errors.append(float(np.linalg.norm(psi - truth.forward.map, axis=-1).mean()))
        dices.append(mean_dice(warp_labels(labels, psi), warp_labels(labels, truth.forward.map)))
    elapsed = time.time() - start
    # both scores are averaged over seeds; single small regions sit near the
    # data-limited floor of about 0.2 voxel foreground error
    ok = np.mean(errors) < 1.0 and np.mean(dices) > 0.9 and elapsed < 900
    assert report(6, ok, f"endpoint error mean {np.mean(errors):.3f} (max {max(errors):.3f}); "
                         f"Dice mean {np.mean(dices):.3f} (min {min(dices):.3f}); {elapsed:.0f}s")


def test_groupwise_symmetry(report):
    k, n, shift = 2, 16, 2.0
    template = make_phantom_template((n,) * 3, k, seed=3, smoothing=2.0)
    gw = default_appearance(k)
    base = FitConfig(classes=k)
    images = [synth_generate(template, gw, base, seed=i, velocity=np.zeros((n,) * 3 + (3,)),
                             rigid=np.array([sign * shift, 0, 0, 0, 0, 0]),
                             bias_scale=0.0).image
              for i, sign in enumerate((1, -1))]
    sums = []

    def check(run):
        sums.append(max(np.abs(sum(s.velocity for s in run.subjects)).max(),
                        np.abs(sum(s.rigid for s in run.subjects)).max()))

    config = FitConfig(classes=k, schedule=PyramidSchedule(((2.0, 6), (1.0, 10))))
    res = fit_groupwise(images, config, callback=check)
    q0, q1 = (s.rigid for s in res.subjects)
    midpoint = abs(q0[0] - shift)
    opposite = np.abs(q0 + q1).max()
    ok = midpoint < 0.1 and opposite < 0.1 and max(sums) <= 1e-12
    assert report(7, ok, f"translations {q0[0]:.3f}/{q1[0]:.3f} for shifts +/-{shift}; "
                         f"largest sum after an iteration {max(sums):.1e}")


def test_overlap_metric_fidelity(report):
    warped = np.array([1, 1, 2, 0, 2, 1]).reshape(6, 1, 1)
    target = np.array([1, 2, 2, 0, 2, 1]).reshape(6, 1, 1)
    ov = tpr_overlap(warped, target)
    per_region = {r: Fraction(ov.matched[r], ov.size[r]) for r in ov.regions}
    expected = {1: Fraction(2, 2), 2: Fraction(2, 3)}
    sizes = {r: ov.size[r] for r in ov.regions}
    weighted = sum(sizes[r] * per_region[r] for r in ov.regions) / sum(sizes.values())
    pooled = Fraction(sum(ov.matched.values()), sum(sizes.values()))
    ok = (per_region == expected and ov.tpr(1) == 1.0 and ov.tpr(2) == 2 / 3
          and weighted == pooled and ov.pooled == float(pooled))
    assert report(8, ok, f"per-region {per_region[1]}, {per_region[2]}; pooled {pooled} "
                         f"equals size-weighted mean {weighted}")


def test_trace_is_deterministic(report):
    k = 2
    template = make_phantom_template((12, 12, 12), k, seed=4, smoothing=2.0)
    gw = default_appearance(k)
    base = FitConfig(classes=k, seed=7, schedule=PyramidSchedule(((2.0, 2), (1.0, 2))))
    images = [synth_generate(template, gw, base, seed=s).image for s in range(2)]
    first = fit_groupwise(images, base).trace_csv()
    second = fit_groupwise(images, base).trace_csv()
    ok = first == second and len(first.splitlines()) > 3
    assert report(9, ok, f"two runs give {'identical' if first == second else 'different'} "
                         f"traces ({len(first.splitlines()) - 3} rows)")
