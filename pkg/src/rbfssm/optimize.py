"""Cohort fitting by direct optimization of control points and normals.

Each shape owns ``J`` control points and normals. Minibatches of shapes are
updated with Adam on the weighted loss; the correspondence term switches on
from the second epoch and always compares against a mean shape that is only
refreshed at epoch boundaries.
"""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .errors import ConfigError, Diverged, EmptyBand, SingularSystem
from .losses import (
    LossBreakdown,
    LossWeights,
    ShapeState,
    correspondence_loss,
    correspondence_loss_grad,
    evaluate_shape,
    mean_shape,
)
from .rbfshape import KERNELS, ControlPointSet, build_dipoles, solve_rbf, unit_normals
from .volume import SdfVolume, sample_narrow_band

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class FitConfig:
    num_points: int = 128
    band_halfwidth: float | None = None  # None: twice the largest voxel spacing
    band_samples: int = 10000
    kernel: str = "biharmonic"
    weights: LossWeights = field(default_factory=LossWeights)
    eps: float = 1e-6
    epochs: int = 100
    minibatch: int = 4
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    project_tol: float = 0.05
    project_iters: int = 50
    workers: int = 1

    def __post_init__(self):
        if isinstance(self.weights, dict):
            object.__setattr__(self, "weights", LossWeights(**self.weights))
        checks = [
            (self.num_points >= 1, "num_points must be >= 1"),
            (self.band_samples >= 1, "band_samples must be >= 1"),
            (self.minibatch >= 2, "minibatch must be >= 2"),
            (self.epochs >= 1, "epochs must be >= 1"),
            (self.learning_rate > 0, "learning_rate must be positive"),
            (self.eps > 0, "eps must be positive"),
            (self.band_halfwidth is None or self.band_halfwidth > 0, "band_halfwidth must be positive"),
            (self.kernel in KERNELS, f"kernel must be one of {KERNELS}"),
            (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1, "Adam betas must lie in [0, 1)"),
            (self.workers >= 1, "workers must be >= 1"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown fit config keys {sorted(unknown)}")
        d = dict(d)
        if isinstance(d.get("weights"), dict):
            extra = set(d["weights"]) - {"alpha", "beta", "gamma", "zeta"}
            if extra:
                raise ConfigError(f"unknown loss weight keys {sorted(extra)}")
            d["weights"] = LossWeights(**d["weights"])
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    def halfwidth_for(self, volumes):
        if self.band_halfwidth is not None:
            return float(self.band_halfwidth)
        return 2.0 * max(max(v.spacing) for v in volumes)


@dataclass
class AdamState:
    step_count: int
    first_moment: np.ndarray
    second_moment: np.ndarray

    @classmethod
    def zeros(cls, shape):
        return cls(0, np.zeros(shape), np.zeros(shape))


def adam_step(state: AdamState, grads, lr=1e-3, beta1=0.9, beta2=0.999, adam_eps=1e-8):
    """One bias-corrected Adam update; returns ``(new_state, delta)``."""
    g = np.asarray(grads, dtype=np.float64)
    t = state.step_count + 1
    m = beta1 * state.first_moment + (1 - beta1) * g
    v = beta2 * state.second_moment + (1 - beta2) * g * g
    m_hat = m / (1 - beta1 ** t)
    v_hat = v / (1 - beta2 ** t)
    delta = -lr * m_hat / (np.sqrt(v_hat) + adam_eps)
    return AdamState(t, m, v), delta


def renormalize_normals(cps: ControlPointSet) -> ControlPointSet:
    return ControlPointSet(cps.points, unit_normals(cps.normals))


def project_to_surface(vol: SdfVolume, x, max_iters: int = 50, tol: float = 0.05):
    """Newton steps ``x <- x - D(x) grad D / |grad D|^2`` towards the zero level."""
    y, status = _project_batch(vol, np.reshape(np.asarray(x, dtype=float), (1, 3)), max_iters, tol)
    if status[0] < 0:
        raise Diverged(f"projection from {np.ravel(x).tolist()} left the volume or hit a flat gradient")
    return y[0]


def _project_batch(vol, points, max_iters, tol):
    """Vectorized projection. ``status``: 1 converged, 0 ran out of iterations,
    -1 diverged (left the usable hull or hit a vanishing gradient)."""
    x = np.array(points, dtype=np.float64)
    status = np.zeros(len(x), dtype=np.int64)
    lo, hi = vol.bounds
    margin = 0.5 * np.asarray(vol.spacing)
    active = np.ones(len(x), dtype=bool)
    for it in range(max_iters + 1):
        idx = np.flatnonzero(active)
        if len(idx) == 0:
            break
        inside = np.all((x[idx] >= lo + margin) & (x[idx] <= hi - margin), axis=1)
        status[idx[~inside]] = -1
        active[idx[~inside]] = False
        idx = idx[inside]
        d = vol.sample(x[idx])
        done = np.abs(d) <= tol
        status[idx[done]] = 1
        active[idx[done]] = False
        idx, d = idx[~done], d[~done]
        if it == max_iters or len(idx) == 0:
            break
        g = vol.fd_gradient(x[idx])
        g2 = np.einsum("ij,ij->i", g, g)
        flat = g2 < 1e-18
        status[idx[flat]] = -1
        active[idx[flat]] = False
        keep = ~flat
        x[idx[keep]] -= (d[keep] / g2[keep])[:, None] * g[keep]
    return x, status


def farthest_point_sample(points, count, seed):
    points = np.asarray(points, dtype=np.float64)
    rng = np.random.default_rng(seed)
    chosen = [int(rng.integers(len(points)))]
    dist = np.linalg.norm(points - points[chosen[0]], axis=1)
    for _ in range(count - 1):
        nxt = int(np.argmax(dist))
        chosen.append(nxt)
        dist = np.minimum(dist, np.linalg.norm(points - points[nxt], axis=1))
    return points[chosen]


def initialize_cohort(volumes, config: FitConfig):
    """Seed correspondences: farthest-point sample shape 0, project to the rest."""
    ref = volumes[0]
    diag = float(np.linalg.norm(ref.spacing))
    centers = ref.voxel_centers()
    cand = centers[np.abs(ref.values.ravel()) <= diag]
    if len(cand) == 0:
        raise EmptyBand("reference shape has no voxels near its zero level")
    cand, status = _project_batch(ref, cand, config.project_iters, config.project_tol)
    cand = cand[status == 1]
    if len(cand) < config.num_points:
        raise EmptyBand(f"only {len(cand)} surface candidates for {config.num_points} control points")
    seeds = farthest_point_sample(cand, config.num_points, np.random.SeedSequence(config.seed, spawn_key=(2,)))

    sets = []
    for i, vol in enumerate(volumes):
        pts, status = _project_batch(vol, seeds, config.project_iters, config.project_tol)
        bad = np.flatnonzero(status != 1)
        if len(bad):
            raise Diverged(f"initial projection failed for shape {i}, point {bad[0]}")
        normals = vol.fd_gradient(pts)
        try:
            normals = unit_normals(normals)
        except Exception:
            raise Diverged(f"flat SDF gradient at an initial point of shape {i}") from None
        sets.append(ControlPointSet(pts, normals))
    return sets


@dataclass
class FitResult:
    particle_sets: list
    loss_history: list
    config: FitConfig
    seed: int


def _minibatches(order, k):
    batches = [order[i:i + k] for i in range(0, len(order), k)]
    if len(batches) > 1 and len(batches[-1]) == 1:
        batches[-2] = np.concatenate([batches[-2], batches[-1]])
        batches.pop()
    return batches


def fit_cohort(volumes, config: FitConfig, callback=None, initial=None) -> FitResult:
    """Optimize one control point set per volume, in correspondence.

    ``callback(event)`` is called after every minibatch with a dict holding
    ``epoch``, ``iteration``, ``shapes``, ``mean`` (the lagged mean used) and
    ``loss`` (that minibatch's :class:`LossBreakdown`).
    """
    volumes = list(volumes)
    if len(volumes) < 2:
        raise ConfigError(f"a cohort needs at least 2 shapes, got {len(volumes)}")
    halfwidth = config.halfwidth_for(volumes)
    sets = list(initial) if initial is not None else initialize_cohort(volumes, config)
    sets = [renormalize_normals(s) for s in sets]
    adam = [AdamState.zeros((len(s), 6)) for s in sets]
    mu = mean_shape(sets)
    shuffle_rng = np.random.default_rng(np.random.SeedSequence(config.seed, spawn_key=(0,)))
    history = []
    executor = ThreadPoolExecutor(config.workers) if config.workers > 1 else None
    map_fn = executor.map if executor else map
    iteration = 0
    try:
        for epoch in range(1, config.epochs + 1):
            weights = config.weights if epoch > 1 else replace(config.weights, zeta=0.0)
            use_corr = weights.zeta > 0
            sums = np.zeros(3)
            evals = 0
            corr_vals = []
            for batch in _minibatches(shuffle_rng.permutation(len(volumes)), config.minibatch):
                states = []
                for i in batch:
                    cps = renormalize_normals(sets[i])
                    try:
                        model = solve_rbf(build_dipoles(cps, halfwidth), config.kernel)
                    except SingularSystem as exc:
                        raise SingularSystem(f"shape {i}, epoch {epoch}: {exc}") from None
                    band = sample_narrow_band(
                        volumes[i], halfwidth, config.band_samples,
                        np.random.SeedSequence(config.seed, spawn_key=(1, epoch, iteration, int(i))))
                    states.append(ShapeState(cps, volumes[i], model, band, halfwidth))
                results = list(map_fn(lambda st: evaluate_shape(st, weights), states))
                terms = np.array([r[0] for r in results])
                grads = [r[1] for r in results]
                corr = 0.0
                if use_corr:
                    batch_sets = [st.cps for st in states]
                    corr = correspondence_loss(batch_sets, mu, config.eps)
                    for g, gc in zip(grads, correspondence_loss_grad(batch_sets, mu, config.eps)):
                        g[0][...] += weights.zeta * gc
                sums += terms.sum(axis=0)
                evals += len(batch)
                corr_vals.append(corr)
                if callback is not None:
                    s = terms.sum(axis=0)
                    callback({"epoch": epoch, "iteration": iteration, "shapes": [int(i) for i in batch],
                              "mean": mu, "loss": LossBreakdown.combine(weights, s[0], s[1], s[2], corr)})
                for st, i, (gp, gn) in zip(states, batch, grads):
                    adam[i], delta = adam_step(adam[i], np.hstack([gp, gn]), config.learning_rate,
                                               config.adam_beta1, config.adam_beta2, config.adam_eps)
                    sets[i] = renormalize_normals(ControlPointSet(st.cps.points + delta[:, :3],
                                                                  st.cps.normals + delta[:, 3:]))
                iteration += 1
            mu = mean_shape(sets)
            s = sums / evals
            record = LossBreakdown.combine(config.weights, s[0], s[1], s[2], float(np.mean(corr_vals)))
            history.append(record)
            log.info("epoch %d: %s", epoch, record)
    finally:
        if executor is not None:
            executor.shutdown()
    return FitResult(sets, history, config, config.seed)
