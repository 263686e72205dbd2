"""Variational EM driver: pyramid schedule, ELBO accounting and the two fitting modes.

Groupwise fitting learns the log-template together with every subject's
deformation and appearance; fixed-template fitting registers a single subject
to an already learned template and keeps the template and population priors
untouched.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .appearance import (BiasField, GaussWishart, bias_objective, data_term, kl_gauss_wishart,
                         quantile_posterior, responsibilities, uninformative_prior, update_bias,
                         update_gauss_wishart, update_shared_priors)
from .diffeo import ShootingError
from .field import (Deformation, OrientedVolume, apply_affine, identity_map, log_softmax_implicit,
                    pull, softmax_implicit)
from .regularizer import EnergySpec, energy
from .shape import (Warp, WarpContext, constrained_rigid_steps, damp, enforce_zero_mean,
                    halving_search, pcg, rigid_grad_hess, shape_objective, spectral_preconditioner,
                    update_template, velocity_grad_hess)

log = logging.getLogger(__name__)

GROUP_STEPS = ("responsibilities", "gauss_wishart", "bias", "rigid", "velocity", "template",
               "shared_priors", "zero_mean")
FIXED_STEPS = GROUP_STEPS[:5]
MODES = ("groupwise", "fixed-template")


class FitError(RuntimeError):
    """A solver failure annotated with where in the schedule it happened."""


# --------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class Level:
    voxel_size: float
    iterations: int


@dataclass(frozen=True)
class PyramidSchedule:
    """Ordered resolution levels, coarsest first.

    Level voxel sizes must be integer multiples of the finest one, which is
    the voxel size of the template lattice.
    """

    levels: tuple = (Level(8.0, 8), Level(4.0, 8), Level(2.0, 8), Level(1.0, 16))

    def __post_init__(self):
        levels = tuple(lv if isinstance(lv, Level) else Level(float(lv[0]), int(lv[1]))
                       for lv in self.levels)
        if not levels:
            raise ValueError("schedule needs at least one level")
        sizes = [lv.voxel_size for lv in levels]
        if any(b >= a for a, b in zip(sizes, sizes[1:])):
            raise ValueError(f"level voxel sizes must strictly decrease: {sizes}")
        if any(lv.iterations < 1 for lv in levels) or any(s <= 0 for s in sizes):
            raise ValueError("iteration counts must be >= 1 and voxel sizes positive")
        for s in sizes:
            r = s / sizes[-1]
            if abs(r - round(r)) > 1e-6:
                raise ValueError(f"voxel size {s} is not an integer multiple of {sizes[-1]}")
        object.__setattr__(self, "levels", levels)

    @classmethod
    def parse(cls, text: str) -> "PyramidSchedule":
        """``"8:8,4:8,2:8,1:16"`` (voxel size in mm : iterations)."""
        levels = []
        for part in text.split(","):
            size, _, iters = part.partition(":")
            levels.append(Level(float(size), int(iters) if iters else 8))
        return cls(tuple(levels))

    @classmethod
    def from_factors(cls, finest: float, factors, iterations) -> "PyramidSchedule":
        """Desk-scale preset: lattice subsampling factors relative to ``finest`` mm."""
        if np.isscalar(iterations):
            iterations = [iterations] * len(factors)
        return cls(tuple(Level(finest * f, n) for f, n in zip(factors, iterations)))

    @property
    def finest(self) -> float:
        return self.levels[-1].voxel_size

    def factors(self) -> list[int]:
        return [int(round(lv.voxel_size / self.finest)) for lv in self.levels]

    def __str__(self):
        return ",".join(f"{lv.voxel_size:g}:{lv.iterations}" for lv in self.levels)


@dataclass(frozen=True)
class FitConfig:
    """Model and optimiser settings.

    ``bound_classes`` selects the denominator of the constant Hessian bound:
    ``"K"`` as written in the mixed-Hessian formula or ``"K+1"``, which
    dominates the softmax Hessian for every probability vector and therefore
    makes the template update monotone at ``mix_weight = 0``.
    """

    classes: int = 11
    mix_weight: float = 0.8
    velocity_reg: tuple = (2e-4, 0.0, 0.4, 0.1, 0.4)
    template_reg: tuple = (1e-2, 0.5, 0.0)
    bias_reg: float = 1e5
    shooting_steps: int = 8
    schedule: PyramidSchedule = field(default_factory=PyramidSchedule)
    seed: int = 0
    mode: str = "groupwise"
    bound_classes: str = "K+1"
    cg_iterations: int = 32
    cg_tolerance: float = 1e-4
    max_halvings: int = 8
    rigid_trust: float = 1.0
    bias_wavelength: float = 60.0
    estimate_bias: bool = True
    threads: int = 1

    def __post_init__(self):
        if self.classes < 1:
            raise ValueError("classes must be >= 1")
        if not 0.0 <= self.mix_weight <= 1.0:
            raise ValueError("mix_weight must lie in [0, 1]")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.bound_classes not in ("K", "K+1"):
            raise ValueError("bound_classes must be 'K' or 'K+1'")
        if self.rigid_trust <= 0:
            raise ValueError("rigid_trust must be positive")
        if self.shooting_steps < 1 or self.threads < 1:
            raise ValueError("shooting_steps and threads must be >= 1")
        if self.bias_reg <= 0:
            raise ValueError("bias_reg must be positive")
        object.__setattr__(self, "velocity_reg", tuple(float(x) for x in self.velocity_reg))
        object.__setattr__(self, "template_reg", tuple(float(x) for x in self.template_reg))
        if len(self.velocity_reg) != 5 or len(self.template_reg) != 3:
            raise ValueError("velocity_reg needs 5 weights and template_reg 3")
        EnergySpec.from_values(self.velocity_reg)
        EnergySpec.from_values(self.template_reg)
        if not isinstance(self.schedule, PyramidSchedule):
            object.__setattr__(self, "schedule", PyramidSchedule(tuple(self.schedule)))

    @property
    def velocity_spec(self) -> EnergySpec:
        return EnergySpec.from_values(self.velocity_reg)

    @property
    def template_spec(self) -> EnergySpec:
        return EnergySpec.from_values(self.template_reg)

    @property
    def bound_denominator(self) -> int:
        return self.classes + (1 if self.bound_classes == "K+1" else 0)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["schedule"] = str(self.schedule)
        return d

    @classmethod
    def from_dict(cls, d) -> "FitConfig":
        d = dict(d)
        if isinstance(d.get("schedule"), str):
            d["schedule"] = PyramidSchedule.parse(d["schedule"])
        for key in ("velocity_reg", "template_reg"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)

    def digest(self) -> str:
        """Short hash of the settings, stamped into every output as provenance."""
        text = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(text.encode()).hexdigest()[:16]


# --------------------------------------------------------------------------
# pyramid


def level_lattice(shape, affine, factor: int):
    """Shape and voxel-to-world matrix of a lattice subsampled by ``factor``.

    Level voxel ``i`` covers full-resolution voxels ``factor*i .. factor*i +
    factor - 1`` and sits at their centre, so both lattices span the same
    field of view.
    """
    shape = tuple(int(math.ceil(n / factor)) for n in shape)
    scale = np.diag([factor, factor, factor, 1.0])
    scale[:3, 3] = (factor - 1) / 2
    return shape, np.asarray(affine, dtype=np.float64) @ scale


def prolong(f, coarse_factor: int, fine_factor: int, fine_shape, vector=False) -> np.ndarray:
    """Trilinear interpolation of a level field onto a finer level lattice.

    Vector fields in voxel units are multiplied by the voxel size ratio.
    """
    ratio = coarse_factor / fine_factor
    grid = identity_map(fine_shape)
    coords = (fine_factor * grid + (fine_factor - coarse_factor) / 2) / coarse_factor
    out = pull(f, coords, "clamp")
    return out * ratio if vector else out


def restrict(f, factor: int, vector=False) -> np.ndarray:
    """Block average onto a lattice subsampled by ``factor`` (edges replicated)."""
    f = np.asarray(f, dtype=np.float64)
    if factor == 1:
        return f.copy()
    shape = f.shape[:3]
    target = [int(math.ceil(n / factor)) for n in shape]
    pad = [(0, t * factor - n) for t, n in zip(target, shape)] + [(0, 0)] * (f.ndim - 3)
    g = np.pad(f, pad, mode="edge")
    g = g.reshape(target[0], factor, target[1], factor, target[2], factor, *f.shape[3:])
    out = g.mean(axis=(1, 3, 5))
    return out / factor if vector else out


# --------------------------------------------------------------------------
# state


@dataclass
class SubjectState:
    """Everything estimated for one subject."""

    image: OrientedVolume
    mask: np.ndarray
    velocity: np.ndarray
    rigid: np.ndarray
    posterior: GaussWishart
    bias: BiasField
    responsibilities: np.ndarray | None = None
    context: WarpContext | None = None
    warp: Warp | None = None
    name: str = ""

    def forward(self) -> Deformation:
        """Subject voxels -> template voxels."""
        return Deformation(self.warp.psi, affine=self.image.affine,
                           target_shape=self.context.template_shape,
                           target_affine=self.context.template_affine)

    def inverse(self) -> Deformation:
        """Template voxels -> subject voxels."""
        m = apply_affine(np.linalg.inv(self.warp.affine), self.warp.iphi)
        return Deformation(m, affine=self.context.template_affine,
                           target_shape=self.image.shape, target_affine=self.image.affine)


@dataclass
class TraceRow:
    level: int
    iteration: int
    step: str
    elbo: float


TRACE_HEADER = "level,iteration,step,elbo"


@dataclass
class FitResult:
    template: OrientedVolume
    hyper: GaussWishart
    subjects: list
    trace: list
    config: FitConfig
    warnings: list = field(default_factory=list)

    def trace_csv(self) -> str:
        """ELBO trace as CSV text with provenance comment lines."""
        lines = [f"# config_hash={self.config.digest()}", f"# seed={self.config.seed}",
                 TRACE_HEADER]
        lines += [f"{r.level},{r.iteration},{r.step},{r.elbo!r}" for r in self.trace]
        return "\n".join(lines) + "\n"


def elbo_terms(subjects, template, template_spec, template_voxel_size, hyper) -> dict:
    """Named ELBO contributions (up to constants of the Normal priors).

    ``data`` is the expected categorical + Gaussian log-likelihood with the
    bias Jacobian, plus the entropy of the responsibilities.
    """
    terms = {"data": 0.0, "gauss_wishart_kl": 0.0, "bias_prior": 0.0, "velocity_prior": 0.0}
    for s in subjects:
        logp = log_softmax_implicit(pull(template, s.warp.psi, "clamp"))
        terms["data"] += data_term(s.image, s.bias, s.responsibilities, s.posterior, logp, s.mask)
        terms["gauss_wishart_kl"] -= float(kl_gauss_wishart(s.posterior, hyper).sum())
        terms["bias_prior"] -= s.bias.prior_energy()
        terms["velocity_prior"] -= s.context.velocity_energy(s.velocity)
    terms["template_prior"] = -energy(template, template_spec, template_voxel_size)
    for name, value in terms.items():
        if not np.isfinite(value):
            raise FloatingPointError(f"ELBO term {name!r} is not finite")
    return terms


def elbo(subjects, template, template_spec, template_voxel_size, hyper) -> float:
    return float(sum(elbo_terms(subjects, template, template_spec, template_voxel_size,
                                hyper).values()))


# --------------------------------------------------------------------------
# driver


class _Run:
    def __init__(self, subjects, template_full, template_affine, hyper, config: FitConfig,
                 fixed_template: bool):
        self.subjects = subjects
        self.config = config
        self.fixed = fixed_template
        self.template_full = template_full
        self.full_shape = template_full.shape[:3]
        self.full_affine = template_affine
        self.hyper = hyper
        self.trace: list[TraceRow] = []
        self.warnings: list[str] = []
        self.t = None
        self.level = 0
        self.iteration = 0
        self.factor = None
        self.pool = ThreadPoolExecutor(config.threads) if config.threads > 1 else None

    # helpers ---------------------------------------------------------------
    def map(self, fn, items):
        items = list(items)
        if self.pool is None:
            return [fn(i, x) for i, x in enumerate(items)]
        return list(self.pool.map(fn, range(len(items)), items))

    def annotate(self, step, exc, subject=None):
        where = f"level {self.level}, iteration {self.iteration}, step {step}"
        if subject is not None:
            where += f", subject {subject}"
        return FitError(f"{where}: {exc}")

    @property
    def voxel_size(self):
        return np.sqrt((self.affine[:3, :3] ** 2).sum(axis=0))

    @property
    def w(self):
        return self.config.mix_weight

    @property
    def bound(self):
        return self.config.bound_denominator

    def current_elbo(self):
        return elbo(self.subjects, self.t, self.config.template_spec, self.voxel_size, self.hyper)

    def record(self, step):
        value = self.current_elbo()
        if self.trace and self.trace[-1].level == self.level:
            prev = self.trace[-1].elbo
            tol = 1e-6 if self.w == 0 else 1e-3
            if value < prev - tol * abs(prev):
                msg = (f"ELBO decreased by {prev - value:.3g} at level {self.level}, iteration "
                       f"{self.iteration}, step {step}")
                log.warning(msg)
                self.warnings.append(msg)
        self.trace.append(TraceRow(self.level, self.iteration, step, value))

    # levels ----------------------------------------------------------------
    def enter_level(self, index, factor):
        shape, affine = level_lattice(self.full_shape, self.full_affine, factor)
        previous = self.factor
        if self.fixed:
            t = restrict(self.template_full, factor)
        elif previous is None:
            t = np.zeros(shape + (self.config.classes,))
        else:
            t = prolong(self.t, previous, factor, shape)
        for s in self.subjects:
            if previous is None:
                s.velocity = np.zeros(shape + (3,))
            else:
                s.velocity = prolong(s.velocity, previous, factor, shape, vector=True)
            s.context = WarpContext(shape, affine, s.image.shape, s.image.affine,
                                    self.config.velocity_spec, self.config.shooting_steps)
        self.t = t
        self.shape = shape
        self.affine = affine
        self.factor = factor
        self.level = index

        def warp(i, s):
            try:
                s.warp = s.context.warp(s.velocity, s.rigid)
            except ShootingError as exc:
                raise self.annotate("prolong", exc, i) from exc
        self.map(warp, self.subjects)

    # updates ---------------------------------------------------------------
    def step_responsibilities(self):
        def run(i, s):
            prior = softmax_implicit(pull(self.t, s.warp.psi, "clamp"))
            s.responsibilities = responsibilities(s.image, s.bias, s.posterior, prior, s.mask)
        self.map(run, self.subjects)

    def step_gauss_wishart(self):
        def run(i, s):
            s.posterior = update_gauss_wishart(s.image, s.bias, s.responsibilities, self.hyper,
                                               s.mask)
        self.map(run, self.subjects)

    def step_bias(self):
        if not self.config.estimate_bias:
            return

        def run(i, s):
            s.bias = update_bias(s.image, s.bias, s.responsibilities, s.posterior, s.mask,
                                 self.config.max_halvings)
        self.map(run, self.subjects)

    def objective(self, subjects, warps, velocities):
        return sum(shape_objective(self.t, wp, s.responsibilities, s.mask, v, s.context)
                   for s, wp, v in zip(subjects, warps, velocities))

    def guarded(self, trial_params):
        """Joint halving over all subjects; ``trial_params(scale)`` gives (v, q) lists."""
        subs = self.subjects
        f0 = self.objective(subs, [s.warp for s in subs], [s.velocity for s in subs])

        def evaluate(scale):
            vs, qs = trial_params(scale)
            warps = []
            for s, v, q in zip(subs, vs, qs):
                try:
                    warps.append(s.context.warp(v, q))
                except ShootingError:
                    return None
            return self.objective(subs, warps, vs), (vs, qs, warps)

        scale, payload = halving_search(evaluate, f0, self.config.max_halvings)
        if payload is None:
            log.debug("shape step rejected at level %d iteration %d", self.level, self.iteration)
            return
        for s, v, q, wp in zip(subs, *payload):
            s.velocity, s.rigid, s.warp = v, q, wp

    def step_rigid(self):
        def run(i, s):
            return rigid_grad_hess(self.t, s.rigid, s.warp, s.context, s.responsibilities,
                                   s.mask, self.w, self.bound)
        gh = self.map(run, self.subjects)
        if self.fixed:
            steps = [-np.linalg.solve(damp(h), g) for g, h in gh]
        else:
            steps = constrained_rigid_steps([g for g, _ in gh], [h for _, h in gh])
        # trust region: one common scale keeps the zero-sum constraint
        reach = max(rigid_reach(s, d) for s, d in zip(self.subjects, steps))
        if reach > self.config.rigid_trust:
            steps = [d * (self.config.rigid_trust / reach) for d in steps]
        self.guarded(lambda a: ([s.velocity for s in self.subjects],
                                [s.rigid + a * d for s, d in zip(self.subjects, steps)]))

    def step_velocity(self):
        subs = self.subjects
        ctx0 = subs[0].context

        def run(i, s):
            return velocity_grad_hess(self.t, s.velocity, s.warp, s.context, s.responsibilities,
                                      s.mask, self.w, self.bound)
        gh = self.map(run, subs)
        g = np.stack([x[0] for x in gh])
        h = np.stack([x[1] for x in gh])
        # constant velocities duplicate the rigid translation; leave those to q
        def project(x):
            x = x - x.mean(axis=(1, 2, 3), keepdims=True)
            return x if self.fixed else x - x.mean(axis=0)
        hmean = float(np.mean(np.trace(h, axis1=-2, axis2=-1))) / 3
        pre = spectral_preconditioner(ctx0.velocity_spec, ctx0.template_voxel_size, hmean,
                                vector=True, voxel_units=True)

        def apply(d):
            out = np.einsum("n...ij,n...j->n...i", h, d)
            out += np.stack([ctx0.velocity_operator(x) for x in d])
            return project(out)

        step, _, _ = pcg(apply, project(-g), lambda r: project(np.stack([pre(x) for x in r])),
                         self.config.cg_iterations, self.config.cg_tolerance)
        self.guarded(lambda a: ([s.velocity + a * d for s, d in zip(subs, step)],
                                [s.rigid for s in subs]))

    def step_template(self):
        items = [(s.responsibilities, s.warp.psi, s.mask, 1.0) for s in self.subjects]
        self.t = update_template(self.t, items, self.config.template_spec, self.voxel_size,
                                 self.w, self.bound, self.config.cg_iterations,
                                 self.config.cg_tolerance)

    def step_shared_priors(self):
        self.hyper = update_shared_priors([s.posterior for s in self.subjects], self.hyper)

    def step_zero_mean(self):
        vs, qs = enforce_zero_mean([s.velocity for s in self.subjects],
                                   [s.rigid for s in self.subjects])
        for s, v, q in zip(self.subjects, vs, qs):
            s.velocity, s.rigid = v, q

        def warp(i, s):
            s.warp = s.context.warp(s.velocity, s.rigid)
        self.map(warp, self.subjects)

    def run(self, callback=None):
        steps = FIXED_STEPS if self.fixed else GROUP_STEPS
        try:
            for index, (lv, factor) in enumerate(zip(self.config.schedule.levels,
                                                     self.config.schedule.factors())):
                self.iteration = 0
                self.enter_level(index, factor)
                for it in range(lv.iterations):
                    self.iteration = it
                    for name in steps:
                        try:
                            getattr(self, "step_" + name)()
                        except FitError:
                            raise
                        except Exception as exc:
                            raise self.annotate(name, exc) from exc
                        self.record(name)
                    if callback is not None:
                        callback(self)
        finally:
            if self.pool is not None:
                self.pool.shutdown()
        template = OrientedVolume(self.t, self.full_affine)
        return FitResult(template, self.hyper, self.subjects, self.trace, self.config,
                         self.warnings)


def rigid_reach(subject: SubjectState, step) -> float:
    """Largest displacement (level voxels) of a subject's lattice corners under ``step``."""
    ctx = subject.context
    ext = np.array(subject.image.shape) - 1
    corners = np.array([[i, j, k] for i in (0, ext[0]) for j in (0, ext[1]) for k in (0, ext[2])],
                       dtype=np.float64)
    moved = apply_affine(ctx.affine(subject.rigid + step), corners)
    return float(np.linalg.norm(moved - apply_affine(ctx.affine(subject.rigid), corners),
                                axis=1).max())


def _as_volume(image, default_affine=None):
    if isinstance(image, OrientedVolume):
        return image
    return OrientedVolume(np.asarray(image, dtype=np.float64),
                          np.eye(4) if default_affine is None else default_affine)


def _new_subject(image, mask, config, hyper, posterior=None, name=""):
    image = _as_volume(image)
    finite = image.mask
    mask = finite if mask is None else (np.asarray(mask, dtype=bool) & finite)
    if not mask.any():
        raise ValueError(f"subject {name or '?'} has no usable voxels")
    bias = BiasField.zeros(image.shape, image.voxel_size, image.channels, reg=config.bias_reg,
                           wavelength=config.bias_wavelength)
    if posterior is None:
        posterior = quantile_posterior(image, hyper, mask)
    return SubjectState(image, mask, None, np.zeros(6), posterior, bias, name=name)


def template_lattice(images, voxel_size: float):
    """Axis-aligned lattice covering every subject's field of view."""
    corners = []
    for img in images:
        ext = np.array(img.shape) - 1
        box = np.array([[i, j, k] for i in (0, ext[0]) for j in (0, ext[1]) for k in (0, ext[2])],
                       dtype=np.float64)
        corners.append(apply_affine(img.affine, box))
    corners = np.concatenate(corners)
    lo, hi = corners.min(axis=0), corners.max(axis=0)
    shape = tuple(int(round((b - a) / voxel_size)) + 1 for a, b in zip(lo, hi))
    affine = np.diag([voxel_size] * 3 + [1.0])
    centre = (lo + hi) / 2
    affine[:3, 3] = centre - voxel_size * (np.array(shape) - 1) / 2
    return shape, affine


def fit_groupwise(images, config: FitConfig = FitConfig(), masks=None, names=None,
                  callback=None) -> FitResult:
    """Learn a log-template and every subject's parameters from a population.

    Parameters
    ----------
    images : list of OrientedVolume or arrays
    config : FitConfig
    masks : list of boolean arrays, optional
        Voxels to use in addition to the finite ones.
    callback : callable, optional
        Called with the running state after every outer iteration.
    """
    images = [_as_volume(im) for im in images]
    if len(images) < 2:
        raise ValueError("groupwise fitting needs at least two subjects")
    if len({im.channels for im in images}) != 1:
        raise ValueError("all subjects need the same number of channels")
    config = replace(config, mode="groupwise")
    masks = masks or [None] * len(images)
    names = names or [str(i) for i in range(len(images))]
    hyper = uninformative_prior(images, config.classes + 1,
                                masks=[m if m is None else m & im.mask
                                       for m, im in zip(masks, images)])
    subjects = [_new_subject(im, m, config, hyper, name=n)
                for im, m, n in zip(images, masks, names)]
    shape, affine = template_lattice(images, config.schedule.finest)
    full = np.zeros(shape + (config.classes,))
    return _Run(subjects, full, affine, hyper, config, fixed_template=False).run(callback)


def fit_to_template(image, template: OrientedVolume, hyper: GaussWishart,
                    config: FitConfig = FitConfig(), mask=None, callback=None) -> FitResult:
    """Register one subject to a fixed template with fixed population priors.

    The template's voxel size is the finest level; coarser levels are block
    averages.  Class intensities start from the template prior at the identity
    transform.
    """
    image = _as_volume(image)
    if template.channels != hyper.classes - 1:
        raise ValueError(f"template has {template.channels} classes, priors "
                         f"{hyper.classes - 1}")
    config = replace(config, mode="fixed-template", classes=template.channels)
    ratio = template.voxel_size.mean() / config.schedule.finest
    schedule = PyramidSchedule(tuple(Level(lv.voxel_size * ratio, lv.iterations)
                                     for lv in config.schedule.levels))
    config = replace(config, schedule=schedule)
    subject = _new_subject(image, mask, config, hyper, posterior=hyper)
    # initial class statistics from the template prior seen through the identity warp
    ctx = WarpContext(template.shape, template.affine, subject.image.shape,
                      subject.image.affine, config.velocity_spec, config.shooting_steps)
    psi = ctx.warp(np.zeros(template.shape + (3,)), subject.rigid).psi
    prior = softmax_implicit(pull(template.data, psi, "clamp"))
    subject.posterior = update_gauss_wishart(subject.image, None, prior, hyper, subject.mask)
    run = _Run([subject], np.asarray(template.data, dtype=np.float64), template.affine, hyper,
               config, fixed_template=True)
    return run.run(callback)
