"""Rigid transforms parameterised by their Lie-algebra coordinates.

``q[:3]`` are translations (mm) and ``q[3:]`` rotations (rad) about the world
x, y and z axes.  Rotations are about the world origin, so template world
coordinates should be roughly centred on the field of view.
"""
import numpy as np
from scipy.linalg import expm


def _generators() -> np.ndarray:
    basis = np.zeros((6, 4, 4))
    for i in range(3):
        basis[i, i, 3] = 1.0
    for i, (a, b) in enumerate(((1, 2), (2, 0), (0, 1))):
        basis[3 + i, a, b] = -1.0
        basis[3 + i, b, a] = 1.0
    return basis


GENERATORS = _generators()


def _check(q):
    q = np.asarray(q, dtype=np.float64)
    if q.shape != (6,) or not np.all(np.isfinite(q)):
        raise ValueError("rigid parameters must be 6 finite values")
    return q


def algebra(q) -> np.ndarray:
    return np.tensordot(_check(q), GENERATORS, axes=1)


def exp_rigid(q) -> np.ndarray:
    """4x4 rigid matrix ``expm(sum_i q_i B_i)``."""
    return expm(algebra(q))


def dexp_rigid(q) -> np.ndarray:
    """Derivatives of :func:`exp_rigid` with respect to each ``q_j``, shape (6, 4, 4).

    Uses the block identity ``expm([[X, E], [0, X]]) = [[e^X, dexp_X(E)], [0, e^X]]``.
    """
    x = algebra(q)
    out = np.empty((6, 4, 4))
    block = np.zeros((8, 8))
    block[:4, :4] = x
    block[4:, 4:] = x
    for j in range(6):
        block[:4, 4:] = GENERATORS[j]
        out[j] = expm(block)[:4, 4:]
    return out
