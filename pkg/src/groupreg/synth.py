"""Forward sampling of the generative model for self-recovery experiments."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from .appearance import BiasField, GaussWishart
from .field import Deformation, OrientedVolume, pull, softmax_implicit
from .regularizer import sample_field
from .shape import WarpContext


def centred_affine(shape, voxel_size=1.0) -> np.ndarray:
    """Axis-aligned voxel-to-world matrix with the world origin at the lattice centre."""
    vs = np.broadcast_to(np.asarray(voxel_size, dtype=np.float64), (3,))
    affine = np.diag(list(vs) + [1.0])
    affine[:3, 3] = -vs * (np.asarray(shape) - 1) / 2
    return affine


def make_phantom_template(shape, classes: int, seed=0, sharpness: float = 8.0,
                          smoothing: float = 2.5, voxel_size=1.0) -> OrientedVolume:
    """Random blob phantom as a K-channel log-template.

    Tissue classes are the argmax of smoothed random fields inside a central
    ellipsoid; the background class dominates outside it.  ``sharpness``
    scales the logits, so large values give nearly hard tissue boundaries.
    """
    rng = np.random.default_rng(seed)
    shape = tuple(int(n) for n in shape)
    fields = np.stack([gaussian_filter(rng.standard_normal(shape), smoothing, mode="wrap")
                       for _ in range(classes + 1)], axis=-1)
    fields /= fields.std()
    grid = np.stack(np.meshgrid(*[np.linspace(-1, 1, n) for n in shape], indexing="ij"), -1)
    radius = np.sqrt((grid ** 2).sum(-1))
    outside = np.clip((radius - 0.75) / 0.1, -1.5, 1.5)
    fields[..., classes] += 1.5 * outside
    fields[..., :classes] -= 1.5 * outside[..., None]
    logits = sharpness * (fields[..., :classes] - fields[..., classes:])
    return OrientedVolume(logits, centred_affine(shape, voxel_size))


def default_appearance(classes: int, channels: int = 1, separation: float = 1.0,
                       noise: float = 0.12, dof: float = 1e4) -> GaussWishart:
    """Well separated class intensities for synthetic data.

    Stored class ``k`` has mean ``separation * (k + 1)``, background 0.1; the
    Wishart is concentrated so the sampled noise s.d. is close to ``noise``.
    """
    k1 = classes + 1
    means = np.concatenate([separation * (np.arange(classes) + 1.0), [0.1]])
    m = np.repeat(means[:, None], channels, axis=1)
    prec = np.eye(channels) / noise ** 2
    return GaussWishart(m, np.full(k1, dof), np.tile(prec / dof, (k1, 1, 1)), np.full(k1, dof))


@dataclass
class Synthetic:
    image: OrientedVolume
    labels: OrientedVolume
    velocity: np.ndarray
    rigid: np.ndarray
    bias: BiasField
    forward: Deformation
    prior: np.ndarray


def synth_generate(template: OrientedVolume, gw: GaussWishart, config, seed=0,
                   displacement: float | None = 1.5, translation: float = 0.5,
                   rotation: float = 0.02, bias_scale: float = 1.0, velocity=None,
                   rigid=None) -> Synthetic:
    """Sample one subject from the model on the template's lattice.

    Parameters
    ----------
    template : OrientedVolume
        K-channel log-template.
    gw : GaussWishart
        Class intensity distributions; means ``gw.m`` and precisions ``nu W``.
    config : FitConfig
        Supplies the velocity prior, shooting steps and bias prior.
    displacement : float or None
        Rescale the sampled velocity so its largest component has this
        magnitude (voxels); ``None`` keeps the prior sample as drawn.
    translation, rotation : float
        Standard deviations of the rigid parameters (mm, rad).
    bias_scale : float
        Multiplies the bias coefficients drawn from their prior.
    velocity, rigid : arrays, optional
        Use these instead of sampling (the random draws still happen, so the
        remaining outputs do not depend on whether they are given).

    Returns
    -------
    Synthetic
        Labels use 0 for the background class and ``k + 1`` for stored class ``k``.
    """
    rng = np.random.default_rng(seed)
    shape = template.shape
    vs = template.voxel_size
    spec = config.velocity_spec
    v = sample_field(shape, spec, vs, vector=True, voxel_units=True, rng=rng)
    if displacement is not None:
        peak = np.abs(v).max()
        v = v * (displacement / peak) if peak > 0 else v
    q = np.concatenate([rng.normal(0, translation, 3), rng.normal(0, rotation, 3)])
    if velocity is not None:
        v = np.asarray(velocity, dtype=np.float64)
    if rigid is not None:
        q = np.asarray(rigid, dtype=np.float64)
    ctx = WarpContext(shape, template.affine, shape, template.affine, spec,
                      config.shooting_steps)
    warp = ctx.warp(v, q)
    prior = softmax_implicit(pull(template.data, warp.psi, "clamp"))
    cdf = np.cumsum(prior, axis=-1)
    u = rng.random(shape + (1,))
    cls = np.minimum((u > cdf).sum(-1), prior.shape[-1] - 1)
    c = gw.channels
    cov = np.linalg.inv(gw.expected_precision())
    chol = np.linalg.cholesky(cov)
    noise = rng.standard_normal(shape + (c,))
    x = gw.m[cls] + np.einsum("...cd,...d->...c", chol[cls], noise)
    bias = BiasField.zeros(shape, vs, c, reg=config.bias_reg, wavelength=config.bias_wavelength)
    free = bias.free()
    sd = np.zeros(bias.counts)
    sd[free] = 1.0 / np.sqrt(bias.prior_precision()[free])
    bias.coef = bias_scale * sd * rng.standard_normal(bias.coef.shape)
    f = x / bias.field()
    k = prior.shape[-1] - 1
    labels = np.where(cls == k, 0, cls + 1).astype(np.int32)
    forward = Deformation(warp.psi, template.affine, shape, template.affine)
    return Synthetic(OrientedVolume(f, template.affine), OrientedVolume(labels, template.affine),
                     v, q, bias, forward, prior)
