"""Per-subject intensity model: Gaussian mixture with Gauss-Wishart posteriors
and a multiplicative bias field.

All K+1 tissue classes (including the implicit background class) carry their
own Gaussian.  Intensities are modelled after bias correction, ``x = b * f``,
so the likelihood of ``f`` picks up the log-Jacobian ``sum_c log b_c``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np
from scipy.optimize import minimize_scalar
from scipy.special import digamma, logsumexp, multigammaln

from .field import OrientedVolume

log = logging.getLogger(__name__)

LOG2PI = np.log(2 * np.pi)


@dataclass
class GaussWishart:
    """Gauss-Wishart parameters for each class.

    m : (K1, C) mean locations
    beta : (K1,) mean confidences
    W : (K1, C, C) Wishart scale matrices
    nu : (K1,) degrees of freedom, > C - 1
    """

    m: np.ndarray
    beta: np.ndarray
    W: np.ndarray
    nu: np.ndarray

    def __post_init__(self):
        self.m = np.atleast_2d(np.asarray(self.m, dtype=np.float64))
        self.beta = np.atleast_1d(np.asarray(self.beta, dtype=np.float64))
        self.W = np.asarray(self.W, dtype=np.float64)
        if self.W.ndim == 2:
            self.W = self.W[:, :, None]
        self.nu = np.atleast_1d(np.asarray(self.nu, dtype=np.float64))
        k1, c = self.m.shape
        if self.beta.shape != (k1,) or self.nu.shape != (k1,) or self.W.shape != (k1, c, c):
            raise ValueError("inconsistent Gauss-Wishart shapes")
        if np.any(self.beta <= 0):
            raise ValueError("beta must be positive")
        if np.any(self.nu <= c - 1):
            raise ValueError("nu must exceed C - 1")
        if not np.allclose(self.W, np.swapaxes(self.W, 1, 2), rtol=1e-10, atol=0):
            raise ValueError("W must be symmetric")
        try:
            np.linalg.cholesky(self.W)
        except np.linalg.LinAlgError as exc:
            raise ValueError("W must be positive definite") from exc

    @property
    def classes(self) -> int:
        return self.m.shape[0]

    @property
    def channels(self) -> int:
        return self.m.shape[1]

    def copy(self) -> "GaussWishart":
        return GaussWishart(self.m.copy(), self.beta.copy(), self.W.copy(), self.nu.copy())

    def expected_logdet(self) -> np.ndarray:
        """E[ln |Lambda_k|]."""
        c = self.channels
        psi = sum(digamma((self.nu + 1 - i) / 2) for i in range(1, c + 1))
        return psi + c * np.log(2) + np.linalg.slogdet(self.W)[1]

    def expected_precision(self) -> np.ndarray:
        return self.nu[:, None, None] * self.W


def expected_loglik(x, gw: GaussWishart) -> np.ndarray:
    """E[ln N(x | mu_k, Lambda_k^-1)] for points ``x`` of shape (N, C); returns (N, K1)."""
    c = gw.channels
    diff = x[:, None, :] - gw.m[None]
    maha = np.einsum("nkc,kcd,nkd->nk", diff, gw.W, diff)
    return 0.5 * gw.expected_logdet() - 0.5 * c * LOG2PI - 0.5 * (c / gw.beta + gw.nu * maha)


# --------------------------------------------------------------------------
# bias field


def cosine_matrix(n: int, count: int) -> np.ndarray:
    """(n, count) matrix of cos(pi k (i + 1/2) / n)."""
    i = np.arange(n)[:, None] + 0.5
    k = np.arange(count)[None, :]
    return np.cos(np.pi * k * i / n)


def bases_for_extent(extent_mm: float, wavelength: float = 60.0) -> int:
    """Number of cosines whose shortest wavelength is about ``wavelength`` mm."""
    return max(2, int(round(2 * extent_mm / wavelength)) + 1)


@dataclass
class BiasField:
    """Log-bias ``log b_c = sum_k coef[c, k] * basis_k`` on a subject lattice.

    The basis is a separable 3-D cosine set without its constant term, so the
    log-field always averages to zero over the lattice.  The prior is the
    continuum bending energy of the log-field, weighted by ``reg``.
    """

    coef: np.ndarray          # (C, M1, M2, M3); the [.., 0, 0, 0] entry is unused
    shape: tuple
    voxel_size: tuple
    reg: float = 1e5

    def __post_init__(self):
        self.coef = np.asarray(self.coef, dtype=np.float64)
        self.shape = tuple(int(n) for n in self.shape)
        self.voxel_size = tuple(float(h) for h in np.broadcast_to(self.voxel_size, (3,)))

    @classmethod
    def zeros(cls, shape, voxel_size, channels=1, counts=None, reg=1e5, wavelength=60.0):
        vs = np.broadcast_to(np.asarray(voxel_size, dtype=np.float64), (3,))
        if counts is None:
            counts = [min(n, bases_for_extent(n * h, wavelength)) for n, h in zip(shape, vs)]
        return cls(np.zeros((channels,) + tuple(counts)), shape, tuple(vs), reg)

    @property
    def counts(self) -> tuple:
        return self.coef.shape[1:]

    def matrices(self):
        return [cosine_matrix(n, k) for n, k in zip(self.shape, self.counts)]

    def free(self) -> np.ndarray:
        """Boolean mask of estimated coefficients (everything except the constant)."""
        mask = np.ones(self.counts, dtype=bool)
        mask[0, 0, 0] = False
        return mask

    def prior_precision(self) -> np.ndarray:
        """Diagonal precision over coefficients, shape ``counts``."""
        lengths = np.asarray(self.shape) * np.asarray(self.voxel_size)
        freq2 = []
        norms = []
        for n, length in zip(self.counts, lengths):
            k = np.arange(n)
            freq2.append((np.pi * k / length) ** 2)
            norms.append(np.where(k == 0, length, length / 2))
        f2 = freq2[0][:, None, None] + freq2[1][None, :, None] + freq2[2][None, None, :]
        nrm = norms[0][:, None, None] * norms[1][None, :, None] * norms[2][None, None, :]
        return self.reg * f2 ** 2 * nrm

    def log_field(self) -> np.ndarray:
        bx, by, bz = self.matrices()
        return np.einsum("cabk,xa,yb,zk->xyzc", self.coef, bx, by, bz, optimize=True)

    def field(self) -> np.ndarray:
        return np.exp(self.log_field())

    def prior_energy(self) -> float:
        return 0.5 * float(np.sum(self.prior_precision() * self.coef ** 2))


def _project(values, mats):
    """Basis coefficients sum_i B_ia B_ib B_ic values_i for (X, Y, Z) values."""
    bx, by, bz = mats
    return np.einsum("xyz,xa,yb,zc->abc", values, bx, by, bz, optimize=True)


def _weighted_gram(h, mats):
    """sum_i h_i Y_i(a) Y_i(b) for a separable basis Y; returns (M, M)."""
    bx, by, bz = mats
    t = np.einsum("xyz,xa,xd->adyz", h, bx, bx, optimize=True)
    t = np.einsum("adyz,yb,ye->adbez", t, by, by, optimize=True)
    t = np.einsum("adbez,zc,zf->abcdef", t, bz, bz, optimize=True)
    m = bx.shape[1] * by.shape[1] * bz.shape[1]
    return t.reshape(m, m)


# --------------------------------------------------------------------------
# E-step and Gaussian updates


def _data_arrays(image, mask=None):
    f = image.data if isinstance(image, OrientedVolume) else image
    if f.ndim == 3:
        f = f[..., None]
    f = np.asarray(f, dtype=np.float64)
    finite = np.all(np.isfinite(f), axis=-1)
    mask = finite if mask is None else (np.asarray(mask, dtype=bool) & finite)
    return f, mask


def corrected(image, bias: BiasField | None, mask=None):
    """Bias-corrected intensities at masked voxels (N, C), log-bias (N, C), mask."""
    f, mask = _data_arrays(image, mask)
    if bias is None:
        logb = np.zeros(f.shape)
    else:
        logb = bias.log_field()
    return f[mask] * np.exp(logb[mask]), logb[mask], mask


def responsibilities(image, bias, gw: GaussWishart, prior, mask=None) -> np.ndarray:
    """Posterior class probabilities (X, Y, Z, K1); zero on masked voxels.

    ``prior`` holds the K+1 tissue prior probabilities on the subject lattice.
    """
    x, logb, mask = corrected(image, bias, mask)
    if not mask.any():
        raise ValueError("empty mask")
    prior = np.asarray(prior, dtype=np.float64)
    if prior.shape[:3] != mask.shape or prior.shape[-1] != gw.classes:
        raise ValueError("prior does not match image lattice or class count")
    with np.errstate(divide="ignore"):
        logp = np.log(prior[mask])
    logr = logp + expected_loglik(x, gw) + logb.sum(axis=1, keepdims=True)
    logr -= logsumexp(logr, axis=1, keepdims=True)
    z = np.zeros(prior.shape)
    z[mask] = np.exp(logr)
    return z


def update_gauss_wishart(image, bias, z, prior_hyper: GaussWishart, mask=None) -> GaussWishart:
    """Conjugate variational update of every class posterior.

    Classes with no responsibility fall back to the prior hyper-parameters.
    """
    x, _, mask = corrected(image, bias, mask)
    r = np.asarray(z, dtype=np.float64)[mask]
    p = prior_hyper
    nk = r.sum(axis=0)
    k1, c = p.m.shape
    m = p.m.copy()
    beta = p.beta.copy()
    W = p.W.copy()
    nu = p.nu.copy()
    for k in range(k1):
        if nk[k] <= 0:
            continue
        xbar = r[:, k] @ x / nk[k]
        d = x - xbar
        scatter = (r[:, k, None] * d).T @ d
        dm = (xbar - p.m[k])[:, None]
        beta[k] = p.beta[k] + nk[k]
        m[k] = (p.beta[k] * p.m[k] + nk[k] * xbar) / beta[k]
        winv = (np.linalg.inv(p.W[k]) + scatter
                + (p.beta[k] * nk[k] / beta[k]) * (dm @ dm.T))
        wk = np.linalg.inv(winv)
        W[k] = 0.5 * (wk + wk.T)
        nu[k] = p.nu[k] + nk[k]
    return GaussWishart(m, beta, W, nu)


# --------------------------------------------------------------------------
# ELBO pieces


def expected_log_prior(q: GaussWishart, p: GaussWishart) -> np.ndarray:
    """E_q[ln GW(mu, Lambda | p)] per class."""
    c = q.channels
    elogdet = q.expected_logdet()
    diff = q.m - p.m
    maha = np.einsum("kc,kcd,kd->k", diff, q.W, diff)
    normal = (0.5 * elogdet + 0.5 * c * np.log(p.beta / (2 * np.pi))
              - 0.5 * p.beta * (c / q.beta + q.nu * maha))
    pwinv = np.linalg.inv(p.W)
    trace = np.einsum("kcd,kdc->k", pwinv, q.W) * q.nu
    log_b = (-0.5 * p.nu * np.linalg.slogdet(p.W)[1] - 0.5 * p.nu * c * np.log(2)
             - multigammaln_vec(p.nu / 2, c))
    wishart = log_b + 0.5 * (p.nu - c - 1) * elogdet - 0.5 * trace
    return normal + wishart


def multigammaln_vec(a, d):
    return np.array([multigammaln(float(x), d) for x in np.atleast_1d(a)])


def kl_gauss_wishart(q: GaussWishart, p: GaussWishart) -> np.ndarray:
    """KL(q || p) per class."""
    return expected_log_prior(q, q) - expected_log_prior(q, p)


def data_term(image, bias, z, gw, log_prior, mask=None) -> float:
    """sum_i sum_k z_ik [ln pi_ik + E ln N(b_i f_i) + sum_c ln b_ic] - sum z ln z."""
    x, logb, mask = corrected(image, bias, mask)
    r = np.asarray(z, dtype=np.float64)[mask]
    lp = np.asarray(log_prior, dtype=np.float64)[mask]
    ell = expected_loglik(x, gw) + logb.sum(axis=1, keepdims=True)
    pos = r > 0
    total = np.sum(r[pos] * (lp[pos] + ell[pos]))
    total -= np.sum(r[pos] * np.log(r[pos]))
    return float(total)


def bias_objective(image, bias: BiasField, z, gw: GaussWishart, mask=None) -> float:
    """The part of the ELBO that depends on the bias coefficients."""
    x, logb, mask = corrected(image, bias, mask)
    r = np.asarray(z, dtype=np.float64)[mask]
    diff = x[:, None, :] - gw.m[None]
    maha = np.einsum("nkc,kcd,nkd->nk", diff, gw.W, diff)
    return float(-0.5 * np.sum(r * gw.nu * maha) + logb.sum() - bias.prior_energy())


def update_bias(image, bias: BiasField, z, gw: GaussWishart, mask=None,
                max_halvings: int = 8) -> BiasField:
    """One Gauss-Newton step on the bias coefficients with halving safeguard."""
    if not bias.free().any():
        return bias
    f, mask = _data_arrays(image, mask)
    logb = bias.log_field()
    x = np.where(mask[..., None], f * np.exp(logb), 0.0)
    r = np.where(mask[..., None], np.asarray(z, dtype=np.float64), 0.0)
    prec = gw.expected_precision()
    c = gw.channels
    # residual term per voxel and channel: sum_k z_k [P_k (x - m_k)]_c
    res = np.zeros(f.shape)
    curv = np.zeros(f.shape[:3] + (c, c))
    for k in range(gw.classes):
        d = x - gw.m[k]
        res += r[..., k, None] * np.einsum("cd,...d->...c", prec[k], d)
        curv += r[..., k, None, None] * prec[k]
    grad_lb = np.where(mask[..., None], 1.0 - res * x, 0.0)
    hess_lb = curv * x[..., :, None] * x[..., None, :]
    idx = np.arange(c)
    hess_lb[..., idx, idx] += np.abs(res * x)

    mats = bias.matrices()
    free = bias.free().ravel()
    nb = int(free.sum())
    pp = bias.prior_precision().ravel()[free]
    grad = np.zeros(c * nb)
    hess = np.zeros((c * nb, c * nb))
    for a in range(c):
        ga = _project(grad_lb[..., a], mats).ravel()[free]
        grad[a * nb:(a + 1) * nb] = ga - pp * bias.coef[a].ravel()[free]
        for b in range(a, c):
            block = _weighted_gram(hess_lb[..., a, b], mats)[np.ix_(free, free)]
            hess[a * nb:(a + 1) * nb, b * nb:(b + 1) * nb] = block
            hess[b * nb:(b + 1) * nb, a * nb:(a + 1) * nb] = block.T
    hess[np.diag_indices_from(hess)] += np.tile(pp, c)
    step = np.linalg.solve(hess, grad)
    if not np.all(np.isfinite(step)):
        raise FloatingPointError("non-finite bias step; check the bias regularisation")

    before = bias_objective(image, bias, z, gw, mask)
    scale = 1.0
    for _ in range(max_halvings + 1):
        coef = bias.coef.copy()
        for a in range(c):
            flat = coef[a].ravel()
            flat[free] += scale * step[a * nb:(a + 1) * nb]
            coef[a] = flat.reshape(bias.counts)
        trial = replace(bias, coef=coef)
        if bias_objective(image, trial, z, gw, mask) >= before:
            return trial
        scale *= 0.5
    log.debug("bias step rejected after %d halvings", max_halvings)
    return bias


# --------------------------------------------------------------------------
# population priors


def _profile_nu(posteriors, k, m0, beta0, c):
    n = len(posteriors)
    s = sum(q.nu[k] * q.W[k] for q in posteriors)
    elogdet = sum(q.expected_logdet()[k] for q in posteriors)

    def objective(log_excess):
        nu0 = c - 1 + np.exp(log_excess)
        w0 = s / (n * nu0)
        p = GaussWishart(m0[None], [beta0], w0[None], [nu0])
        return -sum(float(expected_log_prior(_single(q, k), p)[0]) for q in posteriors)

    return objective, s, elogdet


def _single(q, k):
    return GaussWishart(q.m[k:k + 1], q.beta[k:k + 1], q.W[k:k + 1], q.nu[k:k + 1])


def shared_prior_objective(posteriors, hyper: GaussWishart) -> float:
    return float(sum(expected_log_prior(q, hyper).sum() for q in posteriors))


def update_shared_priors(posteriors, current: GaussWishart | None = None) -> GaussWishart:
    """Empirical-Bayes update of the population Gauss-Wishart hyper-parameters.

    Maximises the summed expected log prior density of the subjects'
    posteriors: closed forms for ``m0``, ``beta0`` and ``W0`` given ``nu0``,
    and a bounded 1-D search for ``nu0``.  If ``current`` scores higher for a
    class (the search did not improve on it), that class is left unchanged.
    """
    if not posteriors:
        raise ValueError("need at least one subject")
    k1, c = posteriors[0].m.shape
    n = len(posteriors)
    m0 = np.empty((k1, c))
    beta0 = np.empty(k1)
    W0 = np.empty((k1, c, c))
    nu0 = np.empty(k1)
    for k in range(k1):
        prec = sum(q.nu[k] * q.W[k] for q in posteriors)
        m0[k] = np.linalg.solve(prec, sum(q.nu[k] * q.W[k] @ q.m[k] for q in posteriors))
        spread = 0.0
        for q in posteriors:
            d = q.m[k] - m0[k]
            spread += c / q.beta[k] + q.nu[k] * d @ q.W[k] @ d
        beta0[k] = n * c / spread
        objective, s, _ = _profile_nu(posteriors, k, m0[k], beta0[k], c)
        nus = [q.nu[k] for q in posteriors]
        centre = np.log(max(np.mean(nus) - c + 1, 1e-6))
        res = minimize_scalar(objective, bounds=(min(centre - 25, -20), centre + 25),
                              method="bounded", options={"xatol": 1e-10})
        best = res.x
        # the bounded search can miss the optimum of a flat profile; also
        # try the posterior mean degrees of freedom directly
        if objective(centre) < objective(best):
            best = centre
        nu0[k] = c - 1 + np.exp(best)
        W0[k] = s / (n * nu0[k])
        W0[k] = 0.5 * (W0[k] + W0[k].T)
    new = GaussWishart(m0, beta0, W0, nu0)
    if current is not None:
        keep = [sum(float(expected_log_prior(_single(q, k), _single(current, k))[0])
                    for q in posteriors)
                > sum(float(expected_log_prior(_single(q, k), _single(new, k))[0])
                      for q in posteriors) for k in range(k1)]
        for k in np.flatnonzero(keep):
            new.m[k], new.beta[k], new.W[k], new.nu[k] = (
                current.m[k], current.beta[k], current.W[k], current.nu[k])
    return new


# --------------------------------------------------------------------------
# initialisation


def uninformative_prior(images, classes: int, beta0: float = 0.01, masks=None) -> GaussWishart:
    """Shared hyper-parameters from pooled data: mean, weak confidence, nu0 = C."""
    pooled = []
    for i, img in enumerate(images):
        f, mask = _data_arrays(img, None if masks is None else masks[i])
        pooled.append(f[mask])
    x = np.concatenate(pooled)
    c = x.shape[1]
    mean = x.mean(axis=0)
    cov = np.atleast_2d(np.cov(x, rowvar=False)) + 1e-8 * np.eye(c)
    nu0 = float(c)
    w0 = np.linalg.inv(cov) / nu0
    return GaussWishart(np.tile(mean, (classes, 1)), np.full(classes, beta0),
                        np.tile(w0, (classes, 1, 1)), np.full(classes, nu0))


def quantile_posterior(image, hyper: GaussWishart, mask=None) -> GaussWishart:
    """Starting posterior: class means at evenly spaced intensity quantiles."""
    f, mask = _data_arrays(image, mask)
    x = f[mask]
    k1, c = hyper.m.shape
    probs = (np.arange(k1) + 0.5) / k1
    m = np.quantile(x, probs, axis=0)
    cov = np.atleast_2d(np.cov(x, rowvar=False)) + 1e-8 * np.eye(c)
    nu = hyper.nu + 1.0
    W = np.linalg.inv(cov / k1 ** 2) / nu[:, None, None]
    return GaussWishart(m, hyper.beta + 1.0, W, nu)
