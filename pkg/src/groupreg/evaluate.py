"""Pairwise deformations through the template, label warping and overlap scores."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .field import Deformation, OrientedVolume, pull


def _same_lattice(shape_a, affine_a, shape_b, affine_b):
    return (tuple(shape_a) == tuple(shape_b)
            and np.allclose(affine_a, affine_b, rtol=0, atol=1e-6))


def compose_pairwise(src_inverse: Deformation, tgt_forward: Deformation) -> Deformation:
    """Map from target voxels to source voxels through the common space.

    ``tgt_forward`` takes target voxels to template voxels and
    ``src_inverse`` takes template voxels to source voxels.  The inverse map
    is sampled as its best affine fit plus a trilinearly interpolated
    residual, so points outside the template lattice extrapolate linearly.
    """
    if tgt_forward.target_shape is not None and src_inverse.affine is not None:
        if not _same_lattice(tgt_forward.target_shape, tgt_forward.target_affine,
                             src_inverse.shape, src_inverse.affine):
            raise ValueError("the two deformations refer to different template lattices")
    elif tgt_forward.target_shape is not None and tgt_forward.target_shape != src_inverse.shape:
        raise ValueError("the two deformations refer to different template lattices")
    m = src_inverse.map
    grid = np.stack(np.meshgrid(*[np.arange(n, dtype=np.float64) for n in m.shape[:3]],
                                indexing="ij"), -1).reshape(-1, 3)
    design = np.c_[grid, np.ones(len(grid))]
    coef, *_ = np.linalg.lstsq(design, m.reshape(-1, 3), rcond=None)
    residual = (m.reshape(-1, 3) - design @ coef).reshape(m.shape)
    pts = tgt_forward.map
    out = pts @ coef[:3] + coef[3] + pull(residual, pts, "clamp")
    return Deformation(out, affine=tgt_forward.affine, target_shape=src_inverse.target_shape,
                       target_affine=src_inverse.target_affine)


def nearest_index(coords) -> np.ndarray:
    """Round to the nearest voxel, exact halves going to the lower index."""
    return np.ceil(np.asarray(coords, dtype=np.float64) - 0.5).astype(np.int64)


def warp_labels(labels, d) -> np.ndarray | OrientedVolume:
    """Nearest-neighbour resampling of integer labels at the coordinates in ``d``.

    Coordinates outside the source lattice give background (0).  Returns an
    OrientedVolume on the deformation's lattice when both inputs carry
    geometry, else an integer array.
    """
    lab = labels.data[..., 0] if isinstance(labels, OrientedVolume) else np.asarray(labels)
    if lab.ndim == 4:
        lab = lab[..., 0]
    coords = d.map if isinstance(d, Deformation) else np.asarray(d, dtype=np.float64)
    idx = nearest_index(coords)
    inside = np.all((idx >= 0) & (idx < np.asarray(lab.shape)), axis=-1)
    safe = np.where(inside[..., None], idx, 0)
    out = np.where(inside, lab[safe[..., 0], safe[..., 1], safe[..., 2]], 0).astype(lab.dtype)
    if isinstance(labels, OrientedVolume) and isinstance(d, Deformation) and d.affine is not None:
        return OrientedVolume(out, d.affine)
    return out


@dataclass
class Overlap:
    """Per-region matched and target counts with derived true-positive rates."""

    regions: list
    matched: dict
    size: dict

    def tpr(self, region) -> float | None:
        """Undefined (None) when the region is absent from the target."""
        n = self.size[region]
        return self.matched[region] / n if n else None

    @property
    def present(self) -> list:
        return [r for r in self.regions if self.size[r] > 0]

    @property
    def pooled(self) -> float:
        """Matched volume over total target volume across all present regions."""
        total = sum(self.size[r] for r in self.present)
        if total == 0:
            return float("nan")
        return sum(self.matched[r] for r in self.present) / total

    @property
    def mean(self) -> float:
        """Unweighted mean of the per-region rates."""
        present = self.present
        if not present:
            return float("nan")
        return float(np.mean([self.tpr(r) for r in present]))

    def rows(self):
        """Table rows ``(region, matched, target_size, tpr)``; tpr is '' when undefined."""
        out = []
        for r in self.regions:
            t = self.tpr(r)
            out.append((str(r), self.matched[r], self.size[r], "" if t is None else repr(t)))
        out.append(("pooled", sum(self.matched[r] for r in self.present),
                    sum(self.size[r] for r in self.present), repr(self.pooled)))
        out.append(("mean", "", "", repr(self.mean)))
        return out


def _labels(x):
    a = x.data[..., 0] if isinstance(x, OrientedVolume) else np.asarray(x)
    return a[..., 0] if a.ndim == 4 else a


def tpr_overlap(warped, target, regions=None) -> Overlap:
    """True-positive rate per region: matched voxels over target region size.

    ``regions`` defaults to every nonzero label present in either volume.
    """
    a = _labels(warped)
    b = _labels(target)
    if a.shape != b.shape:
        raise ValueError(f"label volumes differ in shape: {a.shape} vs {b.shape}")
    if regions is None:
        regions = sorted(int(r) for r in np.union1d(np.unique(a), np.unique(b)) if r != 0)
    regions = list(regions)
    if not regions:
        raise ValueError("empty region set")
    matched = {r: int(np.count_nonzero((a == r) & (b == r))) for r in regions}
    size = {r: int(np.count_nonzero(b == r)) for r in regions}
    return Overlap(regions, matched, size)


def dice(a, b, regions=None) -> dict:
    """Dice coefficient per region (None if the region is absent from both)."""
    a = _labels(a)
    b = _labels(b)
    if regions is None:
        regions = sorted(int(r) for r in np.union1d(np.unique(a), np.unique(b)) if r != 0)
    out = {}
    for r in regions:
        pa, pb = a == r, b == r
        total = pa.sum() + pb.sum()
        out[r] = 2.0 * np.count_nonzero(pa & pb) / total if total else None
    return out


def mean_dice(a, b, regions=None) -> float:
    vals = [v for v in dice(a, b, regions).values() if v is not None]
    return float(np.mean(vals))


def endpoint_error(a, b) -> float:
    """Mean Euclidean distance between two coordinate maps."""
    a = a.map if isinstance(a, Deformation) else np.asarray(a)
    b = b.map if isinstance(b, Deformation) else np.asarray(b)
    return float(np.linalg.norm(a - b, axis=-1).mean())
