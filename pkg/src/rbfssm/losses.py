"""Surface, normal, sampling and correspondence losses with their gradients.

Gradients are taken with each shape's RBF coefficients frozen at their
solved values: derivatives flow through the control points, the dipole
centers built from them, and the SDF lookups, but never through the linear
solve.  :func:`fd_grad_total_loss` is a finite-difference reference for the
analytic :func:`grad_total_loss`.
"""
from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from .errors import ConfigError, DegenerateNormal, EmptyBand, ShapeMismatch
from .rbfshape import (
    ControlPointSet,
    DipoleSet,
    RbfModel,
    build_dipoles,
    eval_implicit_batch,
    kernel_slope,
)
from .volume import NarrowBandBatch, SdfVolume

DEGREES = 180.0 / np.pi
_CHUNK = 2048


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 1e2
    beta: float = 1e2
    gamma: float = 1e4
    zeta: float = 1e3

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not (np.isfinite(v) and v >= 0):
                raise ConfigError(f"loss weight {f.name} must be finite and >= 0, got {v}")


@dataclass(frozen=True)
class LossBreakdown:
    surface: float
    normal: float
    sampling: float
    correspondence: float
    total: float

    @classmethod
    def combine(cls, weights: LossWeights, surface, normal, sampling, correspondence):
        total = (weights.alpha * surface + weights.beta * normal
                 + weights.gamma * sampling + weights.zeta * correspondence)
        return cls(float(surface), float(normal), float(sampling), float(correspondence), float(total))


@dataclass(frozen=True)
class SamplingLossTerms:
    pairdist: np.ndarray
    weights: np.ndarray
    sqerr: np.ndarray
    errmatrix: np.ndarray


def softmin(k):
    """Row-wise softmin with max-subtraction (of -k) for stability."""
    k = np.asarray(k, dtype=np.float64)
    z = -(k - k.min(axis=1, keepdims=True))
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def mean_shape(sets) -> np.ndarray:
    """Flattened arithmetic mean of the control points of ``sets``."""
    stacked = _stack_points(sets)
    return stacked.mean(axis=0)


def _stack_points(sets):
    sizes = {len(s.points) for s in sets}
    if len(sizes) != 1:
        raise ShapeMismatch(f"control point counts differ across shapes: {sorted(sizes)}")
    return np.stack([s.points.ravel() for s in sets])


# --- surface ------------------------------------------------------------------

def surface_loss(cps: ControlPointSet, vol: SdfVolume) -> float:
    return float(np.sum(np.abs(vol.sample(cps.points))))


def surface_loss_grad(cps, vol):
    d = vol.sample(cps.points)
    return np.sign(d)[:, None] * vol.sample_grad(cps.points)


# --- normal -------------------------------------------------------------------

def _cosines(cps, vol):
    g = vol.fd_gradient(cps.points)
    gnorm = np.linalg.norm(g, axis=1)
    nnorm = np.linalg.norm(cps.normals, axis=1)
    bad = np.flatnonzero((gnorm < 1e-12) | (nnorm < 1e-12))
    if len(bad):
        raise DegenerateNormal(f"zero normal or SDF gradient at control point {bad[0]}")
    cos = np.einsum("ij,ij->i", cps.normals, g) / (nnorm * gnorm)
    return cos, g, gnorm, nnorm


def normal_loss(cps: ControlPointSet, vol: SdfVolume) -> float:
    """Summed angle in degrees between each normal and the SDF gradient."""
    cos, *_ = _cosines(cps, vol)
    return float(DEGREES * np.sum(np.arccos(np.clip(cos, -1.0, 1.0))))


def normal_angles(cps, vol):
    cos, *_ = _cosines(cps, vol)
    return DEGREES * np.arccos(np.clip(cos, -1.0, 1.0))


def normal_loss_grad(cps, vol):
    cos, g, gnorm, nnorm = _cosines(cps, vol)
    inside = np.abs(cos) < 1.0
    dcos = np.zeros_like(cos)
    dcos[inside] = -DEGREES / np.sqrt(1.0 - cos[inside] ** 2)
    nhat = cps.normals / nnorm[:, None]
    ghat = g / gnorm[:, None]
    d_n = dcos[:, None] * (ghat - cos[:, None] * nhat) / nnorm[:, None]
    d_g = dcos[:, None] * (nhat - cos[:, None] * ghat) / gnorm[:, None]
    # g_k(p) = (D(p + h_k e_k) - D(p - h_k e_k)) / (2 h_k)
    h = 0.5 * np.asarray(vol.spacing)
    d_p = np.zeros_like(cps.points)
    for axis in range(3):
        e = np.zeros(3)
        e[axis] = h[axis]
        jac = (vol.sample_grad(cps.points + e) - vol.sample_grad(cps.points - e)) / (2 * h[axis])
        d_p += d_g[:, axis:axis + 1] * jac
    return d_p, d_n


# --- correspondence -----------------------------------------------------------

def _deviations(batch, mean):
    if len(batch) < 2:
        raise ConfigError(f"correspondence needs at least 2 shapes, got {len(batch)}")
    x = _stack_points(batch)
    mean = np.asarray(mean, dtype=np.float64).ravel()
    if mean.shape[0] != x.shape[1]:
        raise ShapeMismatch(f"mean shape has {mean.shape[0]} entries, shapes have {x.shape[1]}")
    return (x - mean).T


def correspondence_loss(batch, mean, eps: float = 1e-6) -> float:
    """Gaussian entropy of the minibatch, evaluated in the K x K dual space.

    Returns ``0.5 * sum(log(lambda_m + eps))`` over the ``min(3J, K)`` largest
    eigenvalues of ``Y^T Y / (3 J K)``.
    """
    if not eps > 0:
        raise ConfigError(f"eps must be positive, got {eps}")
    y = _deviations(batch, mean)
    dim, k = y.shape
    gram = (y.T @ y) / (dim * k)
    lam = np.sort(np.linalg.eigvalsh(gram))[::-1][:min(dim, k)]
    lam = np.maximum(lam, 0.0)
    return float(0.5 * np.sum(np.log(lam + eps)))


def correspondence_loss_grad(batch, mean, eps: float = 1e-6):
    """Per-shape ``(J, 3)`` gradients with the mean held fixed."""
    y = _deviations(batch, mean)
    dim, k = y.shape
    gram = (y.T @ y) / (dim * k)
    # push-through: (Y Y^T/c + eps)^-1 Y == Y (Y^T Y/c + eps)^-1
    dy = np.linalg.solve(gram + eps * np.eye(k), y.T).T / (dim * k)
    return [dy[:, i].reshape(-1, 3) for i in range(k)]


# --- sampling -----------------------------------------------------------------

def sampling_loss(cps: ControlPointSet, model: RbfModel, dipoles: DipoleSet,
                  band: NarrowBandBatch):
    """Softmin-weighted distance from band points to control points, scaled by
    the squared RBF error at each band point and averaged over all R x J pairs.
    """
    b = np.asarray(band.points)
    if len(b) == 0:
        raise EmptyBand("sampling loss needs at least one band point")
    diff = b[:, None, :] - cps.points[None, :, :]
    k = np.sqrt(np.einsum("rjc,rjc->rj", diff, diff))
    w = softmin(k)
    err = (eval_implicit_batch(model, dipoles, b) - band.distances) ** 2
    errmatrix = np.repeat(err[:, None], k.shape[1], axis=1)
    value = float(np.mean(w * k * errmatrix))
    return value, SamplingLossTerms(k, w, err, errmatrix)


def sampling_loss_grad(cps, model, dipoles, band):
    return sampling_loss_and_grad(cps, model, dipoles, band)[1:]


def sampling_loss_and_grad(cps, model, dipoles, band):
    """``(value, dP, dN)`` of the sampling loss in one pass."""
    b = np.asarray(band.points)
    if len(b) == 0:
        raise EmptyBand("sampling loss needs at least one band point")
    p = cps.points
    r_count, j_count = len(b), len(p)
    scale = 1.0 / (r_count * j_count)
    diff = b[:, None, :] - p[None, :, :]
    k = np.sqrt(np.einsum("rjc,rjc->rj", diff, diff))
    s = softmin(k)
    h = np.sum(s * k, axis=1)
    resid = eval_implicit_batch(model, dipoles, b) - band.distances
    err = resid ** 2

    # through the pairwise distances
    dk = scale * err[:, None] * s * (1.0 - k + h[:, None])
    with np.errstate(divide="ignore", invalid="ignore"):
        coef = np.where(k > 0, dk / k, 0.0)
    d_p = p * coef.sum(axis=0)[:, None] - coef.T @ b

    # through the implicit function at the band points, weights frozen
    df = scale * h * 2.0 * resid
    centers = dipoles.centers
    g_centers = np.zeros_like(centers)
    for start in range(0, r_count, _CHUNK):
        bb = b[start:start + _CHUNK]
        dd = bb[:, None, :] - centers[None, :, :]
        rho = np.sqrt(np.einsum("rac,rac->ra", dd, dd))
        with np.errstate(divide="ignore", invalid="ignore"):
            radial = np.where(rho > 0, kernel_slope(model.kernel, rho) / rho, 0.0)
        c = df[start:start + _CHUNK, None] * radial * model.weights[None, :]
        g_centers += centers * c.sum(axis=0)[:, None] - c.T @ bb

    g0, gplus, gminus = np.split(g_centers, 3)
    d_p = d_p + g0 + gplus + gminus
    nnorm = np.linalg.norm(cps.normals, axis=1)
    nhat = cps.normals / nnorm[:, None]
    d_nhat = dipoles.offset * (gplus - gminus)
    d_n = (d_nhat - np.einsum("ij,ij->i", d_nhat, nhat)[:, None] * nhat) / nnorm[:, None]
    value = float(np.mean(s * k * err[:, None]))
    return value, d_p, d_n


# --- minibatch totals ---------------------------------------------------------

@dataclass(frozen=True)
class ShapeState:
    """One shape's contribution to a minibatch: its control points, SDF,
    frozen RBF model and current narrow-band sample."""

    cps: ControlPointSet
    volume: SdfVolume
    model: RbfModel
    band: NarrowBandBatch
    offset: float

    @property
    def dipoles(self):
        return build_dipoles(self.cps, self.offset)


def shape_terms(state: ShapeState):
    """(surface, normal, sampling) for one shape."""
    dip = state.dipoles
    return (surface_loss(state.cps, state.volume),
            normal_loss(state.cps, state.volume),
            sampling_loss(state.cps, state.model, dip, state.band)[0])


def total_loss(states, weights: LossWeights, mean=None, eps: float = 1e-6) -> LossBreakdown:
    """Minibatch loss: per-shape terms summed over shapes, correspondence once.

    With ``mean=None`` (or ``zeta == 0``) the correspondence field is 0.
    """
    surf = norm = samp = 0.0
    for st in states:
        s, n, sa = shape_terms(st)
        surf += s
        norm += n
        samp += sa
    corr = 0.0
    if mean is not None and weights.zeta > 0:
        corr = correspondence_loss([st.cps for st in states], mean, eps)
    return LossBreakdown.combine(weights, surf, norm, samp, corr)


def shape_grad(state: ShapeState, weights: LossWeights):
    """Weighted gradient of one shape's per-shape terms, ``(dP, dN)``."""
    return evaluate_shape(state, weights)[1]


def evaluate_shape(state: ShapeState, weights: LossWeights):
    """Per-shape ``(surface, normal, sampling)`` values and weighted ``(dP, dN)``."""
    cps, vol = state.cps, state.volume
    d_p = weights.alpha * surface_loss_grad(cps, vol)
    gp, d_n = normal_loss_grad(cps, vol)
    d_p += weights.beta * gp
    d_n = weights.beta * d_n
    samp, gp, gn = sampling_loss_and_grad(cps, state.model, state.dipoles, state.band)
    d_p += weights.gamma * gp
    d_n += weights.gamma * gn
    terms = (surface_loss(cps, vol), normal_loss(cps, vol), samp)
    return terms, (d_p, d_n)


def grad_total_loss(states, weights: LossWeights, mean=None, eps: float = 1e-6, map_fn=map):
    """Gradient of :func:`total_loss` for every shape, as a list of ``(dP, dN)``.

    ``map_fn`` may be an ordered parallel map (e.g. ``Executor.map``); results
    are always reduced in shape order.
    """
    grads = list(map_fn(lambda st: shape_grad(st, weights), states))
    if mean is not None and weights.zeta > 0:
        corr = correspondence_loss_grad([st.cps for st in states], mean, eps)
        grads = [(gp + weights.zeta * gc, gn) for (gp, gn), gc in zip(grads, corr)]
    return grads


def fd_grad_total_loss(states, weights: LossWeights, mean=None, eps: float = 1e-6, step: float = 1e-3):
    """Central finite differences of :func:`total_loss`, RBF weights frozen."""
    states = list(states)
    out = []
    for i, st in enumerate(states):
        grads = []
        for attr in ("points", "normals"):
            base = getattr(st.cps, attr)
            g = np.zeros_like(base)
            for idx in np.ndindex(base.shape):
                vals = []
                for sign in (1.0, -1.0):
                    arr = base.copy()
                    arr[idx] += sign * step
                    kw = {"points": st.cps.points, "normals": st.cps.normals, attr: arr}
                    moved = ShapeState(ControlPointSet(**kw), st.volume, st.model, st.band, st.offset)
                    trial = states[:i] + [moved] + states[i + 1:]
                    vals.append(total_loss(trial, weights, mean, eps).total)
                g[idx] = (vals[0] - vals[1]) / (2 * step)
            grads.append(g)
        out.append(tuple(grads))
    return out


__all__ = [
    "LossWeights", "LossBreakdown", "SamplingLossTerms", "ShapeState",
    "softmin", "mean_shape", "surface_loss", "normal_loss", "normal_angles",
    "correspondence_loss", "sampling_loss", "total_loss", "grad_total_loss",
    "fd_grad_total_loss", "shape_terms", "evaluate_shape",
]
