"""PCA shape statistics over corresponding control points.

Only point positions enter the shape space; normals are ignored. Shapes are
flattened to ``3J`` vectors ``[x0, y0, z0, x1, ...]``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import BadModeCount, ConfigError, ShapeMismatch


@dataclass(frozen=True)
class SsmModel:
    mean: np.ndarray         # (3J,)
    eigenvalues: np.ndarray  # (M,), descending
    modes: np.ndarray        # (M, 3J), orthonormal rows
    num_points: int
    num_shapes: int

    @property
    def num_modes(self):
        return len(self.eigenvalues)

    def to_dict(self):
        return {
            "num_points": int(self.num_points),
            "num_shapes": int(self.num_shapes),
            "mean": self.mean.tolist(),
            "eigenvalues": self.eigenvalues.tolist(),
            "modes": self.modes.tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        mean = np.asarray(d["mean"], dtype=np.float64)
        eig = np.asarray(d["eigenvalues"], dtype=np.float64)
        modes = np.asarray(d["modes"], dtype=np.float64).reshape(len(eig), -1)
        if mean.shape[0] != 3 * int(d["num_points"]) or modes.shape[1] != mean.shape[0]:
            raise ShapeMismatch("SSM model arrays disagree with num_points")
        return cls(mean, eig, modes, int(d["num_points"]), int(d["num_shapes"]))


def shape_matrix(sets):
    """Stack control point sets (or ``(J, 3)`` arrays) into an ``(I, 3J)`` matrix."""
    arrays = [np.asarray(getattr(s, "points", s), dtype=np.float64).reshape(-1, 3) for s in sets]
    sizes = {len(a) for a in arrays}
    if len(sizes) != 1:
        raise ShapeMismatch(f"control point counts differ across shapes: {sorted(sizes)}")
    return np.stack([a.ravel() for a in arrays])


def _sign_fix(modes):
    idx = np.argmax(np.abs(modes), axis=1)
    signs = np.sign(modes[np.arange(len(modes)), idx])
    signs[signs == 0] = 1.0
    return modes * signs[:, None]


def compute_pca(sets) -> SsmModel:
    """PCA of the sample covariance, solved through the I x I Gram matrix.

    Modes with (numerically) zero variance are completed to an orthonormal
    set so that ``modes`` always has ``min(3J, I - 1)`` rows.
    """
    x = shape_matrix(sets)
    n, dim = x.shape
    if n < 2:
        raise ConfigError(f"PCA needs at least 2 shapes, got {n}")
    mean = x.mean(axis=0)
    y = x - mean
    gram = (y @ y.T) / (n - 1)
    lam, vec = np.linalg.eigh(gram)
    order = np.argsort(lam)[::-1]
    keep = min(dim, n - 1)
    lam, vec = lam[order][:keep], vec[:, order][:, :keep]
    lam = np.where(lam < 0, 0.0, lam)
    tol = 1e-10 * max(lam.max(initial=0.0), 1e-300)
    good = lam > tol
    lifted = (y.T @ vec[:, good]) / np.sqrt((n - 1) * lam[good])
    lifted /= np.linalg.norm(lifted, axis=0, keepdims=True)
    lam = np.where(good, lam, 0.0)
    if good.all():
        modes = lifted
    else:
        q, _ = np.linalg.qr(np.hstack([lifted, np.eye(dim)]))
        modes = np.hstack([lifted, q[:, lifted.shape[1]:keep]])
    return SsmModel(mean, lam, _sign_fix(modes.T), dim // 3, n)


def _check_modes(model, m, allow_zero=True):
    lo = 0 if allow_zero else 1
    if not lo <= m <= model.num_modes:
        raise BadModeCount(f"mode count {m} outside [{lo}, {model.num_modes}]")


def compactness(model: SsmModel, m: int) -> float:
    """Fraction of total variance captured by the first ``m`` modes."""
    _check_modes(model, m, allow_zero=False)
    total = float(model.eigenvalues.sum())
    if total == 0:
        return 1.0
    return float(model.eigenvalues[:m].sum() / total)


def mean_point_distance(a, b):
    """Mean Euclidean distance between corresponding points of flattened shapes."""
    d = np.asarray(a).reshape(*np.shape(a)[:-1], -1, 3) - np.asarray(b).reshape(*np.shape(b)[:-1], -1, 3)
    return np.linalg.norm(d, axis=-1).mean(axis=-1)


def project(model: SsmModel, shape, m: int):
    """Reconstruct a flattened shape from its first ``m`` mode coefficients."""
    basis = model.modes[:m]
    coeff = basis @ (np.asarray(shape, dtype=np.float64) - model.mean)
    return model.mean + basis.T @ coeff


def generalization(sets, m: int) -> float:
    """Leave-one-out reconstruction error using ``m`` modes.

    Each held-out model keeps ``min(3J, I - 2)`` modes; larger ``m`` raises
    :class:`BadModeCount`.
    """
    x = shape_matrix(sets)
    if len(x) < 3:
        raise ConfigError(f"generalization needs at least 3 shapes, got {len(x)}")
    errors = []
    for i in range(len(x)):
        model = compute_pca(np.delete(x, i, axis=0).reshape(len(x) - 1, -1, 3))
        _check_modes(model, m)
        errors.append(mean_point_distance(project(model, x[i], m), x[i]))
    return float(np.mean(errors))


def specificity(model: SsmModel, sets, m: int, num_samples: int = 1000, seed=0) -> float:
    """Mean distance from random model instances to their closest training shape."""
    _check_modes(model, m)
    if num_samples < 1:
        raise ConfigError("num_samples must be >= 1")
    train = shape_matrix(sets)
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((num_samples, m)) * np.sqrt(model.eigenvalues[:m])
    samples = model.mean + z @ model.modes[:m]
    nearest = [mean_point_distance(s, train).min() for s in samples]
    return float(np.mean(nearest))


def sample_mode(model: SsmModel, mode_index: int, stddevs: float) -> np.ndarray:
    if not 0 <= mode_index < model.num_modes:
        raise BadModeCount(f"mode {mode_index} outside [0, {model.num_modes})")
    return model.mean + stddevs * np.sqrt(model.eigenvalues[mode_index]) * model.modes[mode_index]
