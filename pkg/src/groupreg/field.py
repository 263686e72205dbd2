"""Oriented volumes, trilinear sampling and its adjoint, implicit-class softmax.

Voxel coordinates are zero-based and refer to voxel centres.  Every map
(deformation) stores absolute coordinates in the voxel frame of the volume it
points into, never displacements.
"""
from __future__ import annotations

from dataclasses import dataclass
from itertools import product

import numpy as np
from scipy.ndimage import map_coordinates

BOUNDARIES = ("clamp", "zero", "wrap")
_NDIMAGE_MODE = {"clamp": "nearest", "zero": "grid-constant", "wrap": "grid-wrap"}


@dataclass(frozen=True)
class OrientedVolume:
    """A voxel lattice with a voxel-to-world affine and channel data.

    ``data`` has shape ``(X, Y, Z, C)``; a 3-D array is promoted to a single
    channel.  Non-finite values mark missing voxels.
    """

    data: np.ndarray
    affine: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim == 3:
            data = data[..., None]
        if data.ndim != 4 or min(data.shape) < 1:
            raise ValueError(f"volume data must be (X, Y, Z, C), got {data.shape}")
        affine = np.asarray(self.affine, dtype=np.float64)
        if affine.shape != (4, 4):
            raise ValueError(f"affine must be 4x4, got {affine.shape}")
        if not np.all(np.isfinite(affine)) or abs(np.linalg.det(affine[:3, :3])) < 1e-12:
            raise ValueError("affine is singular or non-finite")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "affine", affine)

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(int(n) for n in self.data.shape[:3])

    @property
    def channels(self) -> int:
        return int(self.data.shape[3])

    @property
    def voxel_size(self) -> np.ndarray:
        return np.sqrt((self.affine[:3, :3] ** 2).sum(axis=0))

    @property
    def mask(self) -> np.ndarray:
        """Voxels where every channel is finite."""
        return np.all(np.isfinite(self.data), axis=-1)


@dataclass(frozen=True)
class Deformation:
    """Per-voxel target coordinates.

    ``map`` has shape ``(X, Y, Z, 3)`` and is sampled on the lattice described
    by ``affine``; its values are voxel coordinates of the target lattice
    (``target_shape``, ``target_affine``).  Lattice metadata is optional and
    only used for consistency checks and I/O.
    """

    map: np.ndarray
    affine: np.ndarray | None = None
    target_shape: tuple | None = None
    target_affine: np.ndarray | None = None

    def __post_init__(self):
        m = np.asarray(self.map, dtype=np.float64)
        if m.ndim != 4 or m.shape[-1] != 3:
            raise ValueError(f"deformation map must be (X, Y, Z, 3), got {m.shape}")
        if not np.all(np.isfinite(m)):
            raise ValueError("deformation map has non-finite values")
        object.__setattr__(self, "map", m)
        if self.target_shape is not None:
            object.__setattr__(self, "target_shape", tuple(int(n) for n in self.target_shape))

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(int(n) for n in self.map.shape[:3])


def identity_map(shape) -> np.ndarray:
    """Coordinate grid mapping each voxel to itself, shape ``(*shape, 3)``."""
    axes = [np.arange(n, dtype=np.float64) for n in shape]
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)


def apply_affine(affine, coords) -> np.ndarray:
    affine = np.asarray(affine, dtype=np.float64)
    return coords @ affine[:3, :3].T + affine[:3, 3]


def _as_array(x):
    if isinstance(x, OrientedVolume):
        return x.data
    if isinstance(x, Deformation):
        return x.map
    return np.asarray(x, dtype=np.float64)


def _corners(coords, shape, boundary):
    """Flat indices and trilinear weights of the 8 neighbours of each point.

    Returns ``idx, wts, frac, inside`` where ``idx`` and ``wts`` have shape
    ``(8, P)``.  ``inside`` flags, per point and axis, whether the coordinate
    was inside the lattice before clamping (clamped axes have zero derivative).
    """
    if boundary not in BOUNDARIES:
        raise ValueError(f"unknown boundary {boundary!r}")
    c = np.asarray(coords, dtype=np.float64).reshape(-1, 3)
    hi = np.asarray(shape, dtype=np.float64) - 1
    inside = (c >= 0) & (c <= hi)
    if boundary == "clamp":
        c = np.clip(c, 0, hi)
    base = np.floor(c)
    frac = c - base
    base = base.astype(np.int64)
    strides = np.array([shape[1] * shape[2], shape[2], 1], dtype=np.int64)
    n = c.shape[0]
    idx = np.empty((8, n), dtype=np.int64)
    wts = np.empty((8, n), dtype=np.float64)
    for j, off in enumerate(product((0, 1), repeat=3)):
        pos = base + np.array(off)
        w = np.ones(n)
        valid = np.ones(n, dtype=bool)
        for d in range(3):
            w *= frac[:, d] if off[d] else 1.0 - frac[:, d]
            valid &= (pos[:, d] >= 0) & (pos[:, d] < shape[d])
        if boundary == "wrap":
            pos = np.mod(pos, shape)
            valid[:] = True
        else:
            pos = np.clip(pos, 0, np.asarray(shape) - 1)
        idx[j] = pos @ strides
        wts[j] = np.where(valid, w, 0.0)
    return idx, wts, frac, inside


def pull(vol, coords, boundary: str = "clamp"):
    """Trilinear interpolation of ``vol`` at ``coords``.

    Parameters
    ----------
    vol : (X, Y, Z, ...) array or OrientedVolume
    coords : (..., 3) array or Deformation
        Coordinates in voxel units of ``vol``.
    boundary : {'clamp', 'zero', 'wrap'}
        ``clamp`` replicates edge values, ``zero`` treats outside as 0 and
        ``wrap`` is periodic.

    Returns
    -------
    Values of shape ``coords.shape[:-1] + vol.shape[3:]``.  If both inputs are
    wrapped types an OrientedVolume on the deformation's lattice is returned.
    """
    data = _as_array(vol)
    c = _as_array(coords)
    if isinstance(coords, Deformation) and coords.target_shape is not None:
        if tuple(coords.target_shape) != tuple(data.shape[:3]):
            raise ValueError(
                f"deformation targets lattice {coords.target_shape}, volume is {data.shape[:3]}")
    if boundary not in BOUNDARIES:
        raise ValueError(f"unknown boundary {boundary!r}")
    shape = data.shape[:3]
    rest = data.shape[3:]
    flat = np.asarray(data, dtype=np.float64).reshape(shape + (-1,))
    pts = np.asarray(c, dtype=np.float64).reshape(-1, 3).T
    out = np.empty((pts.shape[1], flat.shape[-1]))
    for ch in range(flat.shape[-1]):
        out[:, ch] = map_coordinates(flat[..., ch], pts, order=1,
                                     mode=_NDIMAGE_MODE[boundary], prefilter=False)
    out = out.reshape(c.shape[:-1] + rest)
    if isinstance(vol, OrientedVolume) and isinstance(coords, Deformation):
        affine = coords.affine if coords.affine is not None else vol.affine
        return OrientedVolume(out, affine)
    return out


def pull_grad(vol, coords, boundary: str = "clamp"):
    """Interpolated values and their exact spatial derivatives.

    Returns ``(values, grad)`` with ``grad`` of shape ``values.shape + (3,)``,
    the derivative of the trilinear interpolant with respect to each
    coordinate.  Along axes where a clamped point lies outside the lattice the
    derivative is zero, matching the clamped interpolant.
    """
    data = _as_array(vol)
    c = _as_array(coords)
    shape = data.shape[:3]
    rest = data.shape[3:]
    flat = data.reshape(int(np.prod(shape)), -1)
    idx, wts, frac, inside = _corners(c, shape, boundary)
    n = idx.shape[1]
    val = np.zeros((n, flat.shape[1]))
    grad = np.zeros((n, flat.shape[1], 3))
    hi = np.asarray(shape) - 1
    cc = np.asarray(c, dtype=np.float64).reshape(-1, 3)
    if boundary == "clamp":
        cc = np.clip(cc, 0, hi)
    base = np.floor(cc).astype(np.int64)
    for j, off in enumerate(product((0, 1), repeat=3)):
        pos = base + np.array(off)
        if boundary == "wrap":
            valid = np.ones(n, dtype=bool)
        else:
            valid = np.all((pos >= 0) & (pos < np.asarray(shape)), axis=1)
        f = flat[idx[j]] * valid[:, None]
        val += wts[j][:, None] * f
        for d in range(3):
            dw = np.ones(n) if off[d] else -np.ones(n)
            for e in range(3):
                if e != d:
                    dw = dw * (frac[:, e] if off[e] else 1.0 - frac[:, e])
            grad[:, :, d] += dw[:, None] * f
    if boundary == "clamp":
        grad *= inside[:, None, :]
    return val.reshape(c.shape[:-1] + rest), grad.reshape(c.shape[:-1] + rest + (3,))


def push(values, coords, shape=None, boundary: str = "zero"):
    """Adjoint of :func:`pull`: splat ``values`` onto a lattice of ``shape``.

    For every ``a`` and ``b``, ``<pull(a, d), b> == <a, push(b, d)>`` under the
    same boundary policy.
    """
    vals = _as_array(values)
    c = _as_array(coords)
    if shape is None:
        if isinstance(coords, Deformation) and coords.target_shape is not None:
            shape = coords.target_shape
        else:
            raise ValueError("push needs an output lattice shape")
    shape = tuple(int(n) for n in shape)
    if vals.shape[: c.ndim - 1] != c.shape[:-1]:
        raise ValueError(f"values {vals.shape} do not match coordinates {c.shape}")
    rest = vals.shape[c.ndim - 1:]
    flat = vals.reshape(-1, int(np.prod(rest, dtype=np.int64)))
    idx, wts, _, _ = _corners(c, shape, boundary)
    size = int(np.prod(shape))
    out = np.empty((size, flat.shape[1]))
    ii = idx.ravel()
    for ch in range(flat.shape[1]):
        out[:, ch] = np.bincount(ii, weights=(wts * flat[:, ch]).ravel(), minlength=size)
    out = out.reshape(shape + rest)
    if isinstance(values, OrientedVolume) and isinstance(coords, Deformation):
        return OrientedVolume(out, coords.target_affine if coords.target_affine is not None
                              else values.affine)
    return out


def softmax_implicit(logits) -> np.ndarray:
    """Probabilities of K+1 classes from K logits, the last class having logit 0."""
    t = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(t)):
        raise ValueError("non-finite logit")
    top = np.maximum(t.max(axis=-1, keepdims=True), 0.0)
    e = np.exp(t - top)
    bg = np.exp(-top)
    total = e.sum(axis=-1, keepdims=True) + bg
    return np.concatenate([e, bg], axis=-1) / total


def log_softmax_implicit(logits) -> np.ndarray:
    t = np.asarray(logits, dtype=np.float64)
    full = np.concatenate([t, np.zeros(t.shape[:-1] + (1,))], axis=-1)
    top = full.max(axis=-1, keepdims=True)
    return full - top - np.log(np.exp(full - top).sum(axis=-1, keepdims=True))


def affine_chain(mt, r, mn_inv) -> np.ndarray:
    """Product ``mt @ r @ mn_inv`` of three invertible 4x4 matrices.

    With ``mt`` the template world-to-voxel matrix, ``r`` a rigid world
    transform and ``mn_inv`` the subject voxel-to-world matrix this is the
    affine part of the subject-to-template mapping; see
    :func:`subject_to_template`.
    """
    mats = [np.asarray(m, dtype=np.float64) for m in (mt, r, mn_inv)]
    for name, m in zip(("mt", "r", "mn_inv"), mats):
        if m.shape != (4, 4):
            raise ValueError(f"{name} must be 4x4")
        if np.linalg.cond(m) > 1e12:
            raise ValueError(f"{name} is singular")
    return mats[0] @ mats[1] @ mats[2]


def subject_to_template(template_affine, rigid, subject_affine) -> np.ndarray:
    """Matrix taking subject voxels to template voxels through the rigid map."""
    return affine_chain(np.linalg.inv(template_affine), rigid, subject_affine)
