"""Newton updates of the log-template, velocities and rigid parameters.

The data term is the categorical negative log-likelihood of the
responsibilities under ``softmax(t o psi)``.  Its logit Hessian is a weighted
mix of the true softmax Hessian and the constant Bohning bound; derivatives
with respect to the template, velocity and rigid parameters follow by the
chain rule with expected (Fisher) curvature.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .diffeo import ShootingError, sample_map, shoot
from .field import (apply_affine, identity_map, log_softmax_implicit, pull, pull_grad, push,
                    softmax_implicit, subject_to_template)
from .regularizer import EnergySpec, energy, greens_solve, operator_apply
from .rigid import dexp_rigid, exp_rigid

log = logging.getLogger(__name__)


def bound_matrix(k: int, bound_classes=None) -> np.ndarray:
    """Bohning's constant curvature 1/2 (I - 11^T / n), ``n`` defaulting to K."""
    n = k if bound_classes is None else bound_classes
    return 0.5 * (np.eye(k) - 1.0 / n)


def logit_grad_hess(z, pi, w: float = 0.8, bound_classes=None):
    """Gradient and mixed Hessian of the categorical NLL w.r.t. the K stored logits.

    Parameters
    ----------
    z, pi : (..., K+1) arrays
        Responsibilities and prior probabilities.
    w : float in [0, 1]
        Weight of the true Hessian; ``1 - w`` goes to the bound.
    bound_classes : int, optional
        Denominator of the bound; K as written by default, K+1 gives a
        bound that dominates the true Hessian everywhere.
    """
    if not 0.0 <= w <= 1.0:
        raise ValueError("w must lie in [0, 1]")
    z = np.asarray(z, dtype=np.float64)
    pi = np.asarray(pi, dtype=np.float64)
    if z.shape != pi.shape:
        raise ValueError(f"responsibilities {z.shape} and prior {pi.shape} differ")
    k = pi.shape[-1] - 1
    p = pi[..., :k]
    grad = p - z[..., :k]
    true = -p[..., :, None] * p[..., None, :]
    diag = np.arange(k)
    true[..., diag, diag] += p
    hess = w * true + (1.0 - w) * bound_matrix(k, bound_classes)
    return grad, hess


def categorical_nll(z, log_pi, mask=None) -> float:
    z = np.asarray(z, dtype=np.float64)
    if mask is not None:
        z = z[mask]
        log_pi = np.asarray(log_pi)[mask]
    pos = z > 0
    return float(-np.sum(z[pos] * log_pi[pos]))


def pcg(apply, b, precond, maxiter: int = 32, tol: float = 1e-4):
    """Preconditioned conjugate gradient from a zero start.

    Every iterate decreases the quadratic model, so early termination still
    yields a descent step.  Returns ``(x, iterations, relative_residual)``.
    """
    x = np.zeros_like(b)
    bnorm = np.linalg.norm(b)
    if bnorm == 0:
        return x, 0, 0.0
    r = b.copy()
    zr = precond(r)
    p = zr.copy()
    rz = np.vdot(r, zr)
    rel = 1.0
    it = 0
    for it in range(1, maxiter + 1):
        ap = apply(p)
        pap = np.vdot(p, ap)
        if pap <= 0 or not np.isfinite(pap):
            raise FloatingPointError("conjugate gradient met a non-positive curvature")
        alpha = rz / pap
        x += alpha * p
        r -= alpha * ap
        rel = np.linalg.norm(r) / bnorm
        if rel <= tol:
            break
        zr = precond(r)
        rz_new = np.vdot(r, zr)
        p = zr + (rz_new / rz) * p
        rz = rz_new
    if rel > tol:
        log.debug("CG stopped at the iteration cap (%d) with relative residual %.2e", it, rel)
    return x, it, rel


# --------------------------------------------------------------------------
# spatial transformation


@dataclass
class Warp:
    phi: np.ndarray       # template lattice -> template voxels
    iphi: np.ndarray      # inverse of phi
    affine: np.ndarray    # subject voxel -> template voxel (through the rigid map)
    coords: np.ndarray    # affine applied to the subject grid
    psi: np.ndarray       # subject voxel -> template voxel, phi o affine


@dataclass
class WarpContext:
    """Lattices and metric needed to turn (v, q) into a forward deformation."""

    template_shape: tuple
    template_affine: np.ndarray
    subject_shape: tuple
    subject_affine: np.ndarray
    velocity_spec: EnergySpec
    steps: int = 8

    @property
    def template_voxel_size(self):
        return np.sqrt((np.asarray(self.template_affine)[:3, :3] ** 2).sum(axis=0))

    def affine(self, q) -> np.ndarray:
        return subject_to_template(self.template_affine, exp_rigid(q), self.subject_affine)

    def subject_grid(self) -> np.ndarray:
        return identity_map(self.subject_shape)

    def warp(self, v, q) -> Warp:
        phi, iphi = shoot(v, self.velocity_spec, self.template_voxel_size, self.steps)
        a = self.affine(q)
        coords = apply_affine(a, self.subject_grid())
        psi = sample_map(phi, coords, "clamp")
        return Warp(phi, iphi, a, coords, psi)

    def velocity_energy(self, v) -> float:
        return energy(v, self.velocity_spec, self.template_voxel_size, vector=True,
                      voxel_units=True)

    def velocity_operator(self, v):
        return operator_apply(v, self.velocity_spec, self.template_voxel_size, vector=True,
                              voxel_units=True)


def warped_log_prior(t, psi) -> np.ndarray:
    return log_softmax_implicit(pull(t, psi, "clamp"))


def shape_objective(t, warp: Warp, z, mask, v, ctx: WarpContext) -> float:
    """Categorical NLL plus velocity prior energy for one subject."""
    return categorical_nll(z, warped_log_prior(t, warp.psi), mask) + ctx.velocity_energy(v)


def _masked(g, h, mask, weight=1.0):
    m = np.asarray(mask, dtype=np.float64) * weight
    return g * m[..., None], h * m[..., None, None]


# --------------------------------------------------------------------------
# template


def template_grad_hess(t, items, w=0.8, bound_classes=None):
    """Data-term gradient and lumped Hessian on the template lattice.

    ``items`` yields ``(z, psi, mask, weight)`` per subject.
    """
    shape = t.shape[:3]
    k = t.shape[-1]
    g = np.zeros(t.shape)
    h = np.zeros(shape + (k, k))
    for z, psi, mask, weight in items:
        pi = softmax_implicit(pull(t, psi, "clamp"))
        gl, hl = logit_grad_hess(z, pi, w, bound_classes)
        gl, hl = _masked(gl, hl, mask, weight)
        g += push(gl, psi, shape, "clamp")
        h += push(hl, psi, shape, "clamp")
    return g, h


def template_objective(t, items, spec: EnergySpec, voxel_size) -> float:
    total = sum(weight * categorical_nll(z, warped_log_prior(t, psi), mask)
                for z, psi, mask, weight in items)
    return total + energy(t, spec, voxel_size)


def spectral_preconditioner(spec, voxel_size, hmean, vector=False, voxel_units=False):
    vs = np.broadcast_to(np.asarray(voxel_size, dtype=np.float64), (3,))
    dx = float(np.prod(vs))
    scale = dx * (float(np.mean(vs ** 2)) if voxel_units else 1.0)
    pspec = spec.with_absolute(spec.absolute + max(hmean, 0.0) / scale)
    if pspec.absolute <= 0:
        pspec = pspec.with_absolute(1e-6)
    return lambda r: greens_solve(r, pspec, vs, vector=vector, voxel_units=voxel_units)


def update_template(t, items, spec: EnergySpec, voxel_size, w=0.8, bound_classes=None,
                    cg_iter=32, cg_tol=1e-4):
    """One Newton step on the log-template; returns the new logits.

    Solves ``(H + L) delta = -(g + L t)`` by conjugate gradient with a
    spectral preconditioner.  With ``w = 0`` and a dominating bound the step
    cannot increase the objective.
    """
    items = list(items)
    t = np.asarray(t, dtype=np.float64)
    g, h = template_grad_hess(t, items, w, bound_classes)
    g = g + operator_apply(t, spec, voxel_size)
    k = t.shape[-1]
    hmean = float(np.mean(np.trace(h, axis1=-2, axis2=-1))) / k

    def apply(d):
        return np.einsum("...kl,...l->...k", h, d) + operator_apply(d, spec, voxel_size)

    step, _, _ = pcg(apply, -g, spectral_preconditioner(spec, voxel_size, hmean), cg_iter, cg_tol)
    return t + step


# --------------------------------------------------------------------------
# velocity


def _psi_derivatives(t, warp, z, mask, w, bound_classes):
    s, ds = pull_grad(t, warp.psi, "clamp")
    pi = softmax_implicit(s)
    gl, hl = logit_grad_hess(z, pi, w, bound_classes)
    gl, hl = _masked(gl, hl, mask)
    gpsi = np.einsum("...k,...kd->...d", gl, ds)
    hpsi = np.einsum("...kd,...kl,...le->...de", ds, hl, ds)
    return gpsi, hpsi


def velocity_grad_hess(t, v, warp: Warp, ctx: WarpContext, z, mask, w=0.8, bound_classes=None):
    """Gradient (prior included) and lumped data Hessian w.r.t. the velocity.

    The velocity perturbation is applied to the current forward map at the
    template lattice (greedy about the current path); with one shooting step
    this is the exact derivative.
    """
    gpsi, hpsi = _psi_derivatives(t, warp, z, mask, w, bound_classes)
    shape = tuple(ctx.template_shape)
    g = push(gpsi, warp.coords, shape, "clamp") + ctx.velocity_operator(v)
    h = push(hpsi, warp.coords, shape, "clamp")
    return g, h


def remove_constant(x):
    """Drop the spatially constant part of a vector field (a pure translation)."""
    return x - x.mean(axis=(0, 1, 2))


def velocity_step(g, h, ctx: WarpContext, cg_iter=32, cg_tol=1e-4):
    """Newton step restricted to velocities without a constant component.

    A constant velocity shoots to a translation, which the rigid parameters
    already provide; keeping it out of the step removes that redundancy.
    """
    vs = ctx.template_voxel_size
    hmean = float(np.mean(np.trace(h, axis1=-2, axis2=-1))) / 3

    def apply(d):
        return remove_constant(np.einsum("...ij,...j->...i", h, d) + ctx.velocity_operator(d))

    precond = spectral_preconditioner(ctx.velocity_spec, vs, hmean, vector=True, voxel_units=True)
    step, _, _ = pcg(apply, remove_constant(-g), lambda r: remove_constant(precond(r)),
                     cg_iter, cg_tol)
    return step


def try_warp(ctx: WarpContext, v, q):
    try:
        return ctx.warp(v, q)
    except ShootingError as exc:
        log.debug("shooting failed: %s", exc)
        return None


def halving_search(evaluate, f0, max_halvings=8):
    """Largest step fraction ``2^-j`` with ``evaluate(s) <= f0``.

    ``evaluate`` returns ``(value, payload)`` or ``None`` when the trial is
    invalid (e.g. shooting folded).  Returns ``(scale, payload)`` or
    ``(0.0, None)`` if every trial was rejected.
    """
    scale = 1.0
    for _ in range(max_halvings + 1):
        out = evaluate(scale)
        if out is not None and out[0] <= f0:
            return scale, out[1]
        scale *= 0.5
    return 0.0, None


def update_velocity(t, v, q, warp: Warp, ctx: WarpContext, z, mask, w=0.8, bound_classes=None,
                    cg_iter=32, cg_tol=1e-4, max_halvings=8):
    """Gauss-Newton step on one subject's initial velocity.

    A step that folds the shot transform, or raises the objective, is halved.
    Returns ``(v, warp)``.
    """
    g, h = velocity_grad_hess(t, v, warp, ctx, z, mask, w, bound_classes)
    step = velocity_step(g, h, ctx, cg_iter, cg_tol)
    f0 = shape_objective(t, warp, z, mask, v, ctx)

    def evaluate(scale):
        vt = v + scale * step
        wt = try_warp(ctx, vt, q)
        if wt is None:
            return None
        return shape_objective(t, wt, z, mask, vt, ctx), (vt, wt)

    scale, payload = halving_search(evaluate, f0, max_halvings)
    if payload is None:
        return v, warp
    return payload


# --------------------------------------------------------------------------
# rigid


def rigid_grad_hess(t, q, warp: Warp, ctx: WarpContext, z, mask, w=0.8, bound_classes=None):
    """Gradient and Fisher-scored Hessian of the data term w.r.t. ``q`` (6,)."""
    gpsi, hpsi = _psi_derivatives(t, warp, z, mask, w, bound_classes)
    disp = warp.phi - identity_map(warp.phi.shape[:3])
    _, ddisp = pull_grad(disp, warp.coords, "clamp")
    dphi = ddisp + np.eye(3)
    inv_t = np.linalg.inv(ctx.template_affine)
    grid = ctx.subject_grid()
    dq = []
    for d in dexp_rigid(q):
        da = inv_t @ d @ ctx.subject_affine
        dq.append(grid @ da[:3, :3].T + da[:3, 3])
    dq = np.stack(dq, axis=-2)                                  # (..., 6, 3)
    a = np.einsum("...ij,...kj->...ki", dphi, dq)               # (..., 6, 3)
    a = a.reshape(-1, 6, 3)
    g = np.einsum("nd,nkd->k", gpsi.reshape(-1, 3), a)
    h = np.einsum("nkd,nde,nle->kl", a, hpsi.reshape(-1, 3, 3), a, optimize=True)
    return g, 0.5 * (h + h.T)


def damp(h, rel=1e-6):
    """Levenberg damping when the 6x6 system is (near) singular."""
    ev = np.linalg.eigvalsh(h)
    if ev[0] <= 1e-12 * max(abs(ev[-1]), 1e-300):
        log.debug("singular rigid Hessian; adding Levenberg damping")
        return h + rel * max(np.trace(h) / h.shape[0], 1.0) * np.eye(h.shape[0])
    return h


def update_rigid(t, v, q, warp: Warp, ctx: WarpContext, z, mask, w=0.8, bound_classes=None,
                 max_halvings=8):
    """Fisher-scored Newton step on one subject's rigid parameters.

    Returns ``(q, warp)``; guarded like :func:`update_velocity`.
    """
    g, h = rigid_grad_hess(t, q, warp, ctx, z, mask, w, bound_classes)
    step = -np.linalg.solve(damp(h), g)
    f0 = shape_objective(t, warp, z, mask, v, ctx)

    def evaluate(scale):
        qt = q + scale * step
        wt = try_warp(ctx, v, qt)
        if wt is None:
            return None
        return shape_objective(t, wt, z, mask, v, ctx), (qt, wt)

    scale, payload = halving_search(evaluate, f0, max_halvings)
    if payload is None:
        return q, warp
    return payload


def constrained_rigid_steps(grads, hessians):
    """Newton steps for every subject subject to ``sum_n step_n = 0``.

    Solves the equality-constrained quadratic exactly:
    ``step_n = -H_n^-1 (g_n + lam)`` with ``lam`` chosen so the steps sum to 0.
    """
    inv = [np.linalg.inv(damp(h)) for h in hessians]
    total = sum(inv)
    lam = -np.linalg.solve(total, sum(hi @ g for hi, g in zip(inv, grads)))
    return [-hi @ (g + lam) for hi, g in zip(inv, grads)]


def enforce_zero_mean(velocities, rigids):
    """Subtract the population mean from every velocity field and rigid vector."""
    velocities = [np.asarray(v, dtype=np.float64) for v in velocities]
    rigids = [np.asarray(q, dtype=np.float64) for q in rigids]
    if not velocities:
        raise ValueError("need at least one subject")
    vbar = sum(velocities) / len(velocities)
    qbar = sum(rigids) / len(rigids)
    return [v - vbar for v in velocities], [q - qbar for q in rigids]
