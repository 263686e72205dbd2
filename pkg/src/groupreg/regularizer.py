"""Quadratic smoothness energies on periodic lattices.

Operators are built from forward differences ``D`` and their adjoints, so the
membrane operator is the usual 7-point central second difference and bending
applies it twice.  Every operator is scaled by the physical voxel volume so
that energies of a sampled continuum field do not depend on the resolution.
Under periodic boundaries all operators are circulant; :func:`greens_solve`
inverts them exactly with FFTs.
"""
from __future__ import annotations

from dataclasses import astuple, dataclass
from functools import lru_cache

import numpy as np


@dataclass(frozen=True)
class EnergySpec:
    """Weights of the absolute, membrane, bending and linear-elastic energies.

    ``elastic_mu`` penalises the symmetrised Jacobian and ``elastic_lambda``
    the divergence; both apply to vector fields only.
    """

    absolute: float = 0.0
    membrane: float = 0.0
    bending: float = 0.0
    elastic_mu: float = 0.0
    elastic_lambda: float = 0.0

    def __post_init__(self):
        if any(not np.isfinite(x) or x < 0 for x in astuple(self)):
            raise ValueError(f"energy weights must be finite and nonnegative: {self}")

    @classmethod
    def from_values(cls, values) -> "EnergySpec":
        """Build from ``(abs, mem, bend[, mu, lambda])``."""
        values = [float(x) for x in values]
        if len(values) not in (3, 5):
            raise ValueError("expected 3 or 5 energy weights")
        return cls(*values)

    @property
    def elastic(self) -> bool:
        return self.elastic_mu > 0 or self.elastic_lambda > 0

    def with_absolute(self, value: float) -> "EnergySpec":
        return EnergySpec(value, self.membrane, self.bending, self.elastic_mu, self.elastic_lambda)


def _voxel_size(voxel_size):
    vs = np.broadcast_to(np.asarray(voxel_size, dtype=np.float64), (3,)).copy()
    if np.any(vs <= 0):
        raise ValueError("voxel size must be strictly positive")
    return vs


def _check(f, spec, vector):
    if vector and f.shape[-1] != 3:
        raise ValueError("vector fields must have 3 components")
    if spec.elastic and not vector:
        raise ValueError("linear elasticity is only defined for vector fields")


def _fwd(f, axis, h):
    return (np.roll(f, -1, axis) - f) / h


def _fwd_t(g, axis, h):
    return (np.roll(g, 1, axis) - g) / h


def _membrane(f, vs):
    return sum(_fwd_t(_fwd(f, a, vs[a]), a, vs[a]) for a in range(3))


def operator_apply(f, spec: EnergySpec, voxel_size=1.0, vector=False, voxel_units=False):
    """Apply the discretised energy operator, including the voxel volume.

    Parameters
    ----------
    f : (X, Y, Z[, C]) array
        Scalar field (channels are independent) or, with ``vector=True``, a
        displacement-like field with 3 components.
    spec : EnergySpec
    voxel_size : float or 3 floats, mm
    vector : bool
    voxel_units : bool
        Vector components are expressed in voxels rather than mm.
    """
    f = np.asarray(f, dtype=np.float64)
    _check(f, spec, vector)
    vs = _voxel_size(voxel_size)
    dx = float(np.prod(vs))
    if vector and voxel_units:
        f = f * vs
    out = spec.absolute * f
    if spec.membrane or spec.bending:
        m = _membrane(f, vs)
        if spec.membrane:
            out = out + spec.membrane * m
        if spec.bending:
            out = out + spec.bending * _membrane(m, vs)
    if vector and spec.elastic:
        jac = [[_fwd(f[..., d], c, vs[c]) for d in range(3)] for c in range(3)]
        extra = np.zeros_like(f)
        if spec.elastic_lambda:
            div = jac[0][0] + jac[1][1] + jac[2][2]
            for d in range(3):
                extra[..., d] += spec.elastic_lambda * _fwd_t(div, d, vs[d])
        if spec.elastic_mu:
            for d in range(3):
                for c in range(3):
                    strain = 0.5 * (jac[c][d] + jac[d][c])
                    extra[..., d] += spec.elastic_mu * _fwd_t(strain, c, vs[c])
        out = out + extra
    if vector and voxel_units:
        out = out * vs
    return out * dx


def energy(f, spec: EnergySpec, voxel_size=1.0, vector=False, voxel_units=False) -> float:
    """Half the quadratic form ``<f, operator_apply(f)>``."""
    f = np.asarray(f, dtype=np.float64)
    return 0.5 * float(np.vdot(f, operator_apply(f, spec, voxel_size, vector, voxel_units)))


def _symbol(shape, spec, vs, vector):
    """Fourier symbol on the rfft grid: ``(...)`` scalar or ``(..., 3, 3)``."""
    return _cached_symbol(tuple(int(n) for n in shape), spec, tuple(float(h) for h in vs),
                          bool(vector))


@lru_cache(maxsize=32)
def _cached_symbol(shape, spec, vs, vector):
    a = []
    for d, n in enumerate(shape):
        k = np.fft.rfftfreq(n) if d == 2 else np.fft.fftfreq(n)
        ad = (np.exp(2j * np.pi * k) - 1.0) / vs[d]
        sh = [1, 1, 1]
        sh[d] = ad.size
        a.append(ad.reshape(sh))
    lap = sum(np.abs(ad) ** 2 for ad in a)
    scalar = spec.absolute + spec.membrane * lap + spec.bending * lap ** 2
    if not vector:
        scalar.setflags(write=False)
        return scalar
    grid = np.broadcast_shapes(*(ad.shape for ad in a))
    avec = np.stack([np.broadcast_to(ad, grid) for ad in a], axis=-1)
    eye = np.eye(3)
    mat = scalar[..., None, None] * eye
    if spec.elastic_mu:
        outer = avec[..., :, None] * np.conj(avec[..., None, :])
        mat = mat + spec.elastic_mu * 0.5 * (lap[..., None, None] * eye + outer)
    if spec.elastic_lambda:
        mat = mat + spec.elastic_lambda * (np.conj(avec[..., :, None]) * avec[..., None, :])
    mat.setflags(write=False)
    return mat


@lru_cache(maxsize=32)
def _inverse_symbol(shape, spec, vs):
    sym = _symbol(shape, spec, np.asarray(vs), True).copy()
    if np.all(sym[0, 0, 0] == 0):
        sym[0, 0, 0] = np.eye(3)
    inv = np.linalg.inv(sym)
    inv.setflags(write=False)
    return inv


def greens_solve(g, spec: EnergySpec, voxel_size=1.0, vector=False, voxel_units=False):
    """Solve ``operator_apply(f) = g`` exactly in the Fourier domain.

    With no absolute term the zero frequency is singular; ``g`` must then have
    zero mean and the returned ``f`` has zero mean.
    """
    g = np.asarray(g, dtype=np.float64)
    _check(g, spec, vector)
    vs = _voxel_size(voxel_size)
    dx = float(np.prod(vs))
    shape = g.shape[:3]
    if vector and voxel_units:
        g = g / vs
    sym = _symbol(shape, spec, vs, vector)
    gf = np.fft.rfftn(g, axes=(0, 1, 2))
    if not vector:
        sym = sym.reshape(sym.shape + (1,) * (g.ndim - 3))
        dc = sym[0, 0, 0]
        if np.all(sym[0, 0, 0] == 0):
            if np.max(np.abs(gf[0, 0, 0])) > 1e-8 * max(1.0, np.abs(gf).max()):
                raise ValueError("operator is singular: no absolute term and g has nonzero mean")
            sym = sym.copy()
            sym[0, 0, 0] = 1.0
            gf[0, 0, 0] = 0.0
        elif np.any(dc <= 0):
            raise ValueError("operator is singular")
        ff = gf / sym
    else:
        if np.all(sym[0, 0, 0] == 0):
            if np.max(np.abs(gf[0, 0, 0])) > 1e-8 * max(1.0, np.abs(gf).max()):
                raise ValueError("operator is singular: no absolute term and g has nonzero mean")
            gf[0, 0, 0] = 0.0
        ff = np.einsum("...ij,...j->...i", _inverse_symbol(shape, spec, tuple(vs)), gf)
    f = np.fft.irfftn(ff, s=shape, axes=(0, 1, 2)) / dx
    if vector and voxel_units:
        f = f / vs
    return f


def sample_field(shape, spec: EnergySpec, voxel_size=1.0, vector=False, voxel_units=False,
                 rng=None, channels=None):
    """Draw from the Normal prior whose precision is ``operator_apply``.

    Spectral sampling: white noise is coloured by the inverse square root of
    the operator symbol.
    """
    rng = np.random.default_rng(rng)
    vs = _voxel_size(voxel_size)
    dx = float(np.prod(vs))
    shape = tuple(int(n) for n in shape)
    if vector:
        noise = rng.standard_normal(shape + (3,))
    else:
        noise = rng.standard_normal(shape + ((channels,) if channels else ()))
    sym = _symbol(shape, spec, vs, vector)
    nf = np.fft.rfftn(noise, axes=(0, 1, 2))
    if vector:
        val, vec = np.linalg.eigh(sym)
        if np.any(val <= 0):
            raise ValueError("prior is improper; add an absolute term")
        root = (vec / np.sqrt(val)[..., None, :]) @ np.conj(np.swapaxes(vec, -1, -2))
        ff = (root @ nf[..., None])[..., 0]
    else:
        if np.any(sym <= 0):
            raise ValueError("prior is improper; add an absolute term")
        ff = nf / np.sqrt(sym).reshape(sym.shape + (1,) * (noise.ndim - 3))
    f = np.fft.irfftn(ff, s=shape, axes=(0, 1, 2)) / np.sqrt(dx)
    if vector and voxel_units:
        f = f / vs
    return f
