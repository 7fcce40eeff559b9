"""Implicit surfaces from control points, normals and polyharmonic kernels.

Each control point ``p`` with normal ``n`` contributes three centers: ``p``
itself (target 0) and the dipole pair ``p +/- s n/|n|`` (targets ``+s`` and
``-s``).  Interpolating these with a polyharmonic kernel plus a linear
polynomial gives an implicit function that is negative inside the shape.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DegenerateNormal, NonPositiveOffset, SingularSystem
from .volume import SdfVolume

KERNELS = ("biharmonic", "thin-plate-spline", "triharmonic")

_EVAL_CHUNK = 8192


def _check_kernel(kind):
    if kind not in KERNELS:
        raise ConfigError(f"unknown kernel {kind!r}; expected one of {KERNELS}")


def kernel_profile(kind, r):
    """phi(r) for an array of distances."""
    _check_kernel(kind)
    r = np.asarray(r, dtype=np.float64)
    if kind == "biharmonic":
        return r.copy()
    if kind == "triharmonic":
        return r * r * r
    with np.errstate(divide="ignore", invalid="ignore"):
        out = r * r * np.log(r)
    return np.where(r > 0, out, 0.0)


def kernel_slope(kind, r):
    """d phi / d r; zero at r = 0 for every kernel."""
    _check_kernel(kind)
    r = np.asarray(r, dtype=np.float64)
    if kind == "biharmonic":
        return np.where(r > 0, 1.0, 0.0)
    if kind == "triharmonic":
        return 3.0 * r * r
    with np.errstate(divide="ignore", invalid="ignore"):
        out = r * (2.0 * np.log(r) + 1.0)
    return np.where(r > 0, out, 0.0)


def kernel_eval(kind, x, y) -> float:
    r = np.sqrt(np.sum((np.asarray(x, dtype=float) - np.asarray(y, dtype=float)) ** 2))
    return float(kernel_profile(kind, r))


@dataclass(frozen=True)
class ControlPointSet:
    """Control points and their (not necessarily unit) normals, both ``(J, 3)``."""

    points: np.ndarray
    normals: np.ndarray

    def __post_init__(self):
        p = np.array(self.points, dtype=np.float64).reshape(-1, 3)
        n = np.array(self.normals, dtype=np.float64).reshape(-1, 3)
        if len(p) == 0 or p.shape != n.shape:
            raise ConfigError(f"need J >= 1 points with matching normals, got {p.shape} and {n.shape}")
        p.setflags(write=False)
        n.setflags(write=False)
        object.__setattr__(self, "points", p)
        object.__setattr__(self, "normals", n)

    def __len__(self):
        return len(self.points)


@dataclass(frozen=True)
class DipoleSet:
    """``centers`` ordered as all points, then all ``p+``, then all ``p-``."""

    centers: np.ndarray
    offset: float

    @property
    def num_points(self):
        return len(self.centers) // 3

    def targets(self):
        """Interpolation targets for the centers, followed by four zeros."""
        j = self.num_points
        return np.concatenate([np.zeros(j), np.full(j, self.offset), np.full(j, -self.offset), np.zeros(4)])


@dataclass(frozen=True)
class RbfModel:
    weights: np.ndarray
    linear: np.ndarray
    constant: float
    kernel: str = "biharmonic"


def unit_normals(normals):
    normals = np.asarray(normals, dtype=np.float64)
    norm = np.linalg.norm(normals, axis=1)
    bad = np.flatnonzero(norm < 1e-12)
    if len(bad):
        raise DegenerateNormal(f"normal {bad[0]} has magnitude {norm[bad[0]]:.3g}")
    return normals / norm[:, None]


def build_dipoles(cps: ControlPointSet, offset: float) -> DipoleSet:
    if not offset > 0:
        raise NonPositiveOffset(f"dipole offset must be positive, got {offset}")
    n = unit_normals(cps.normals)
    p = cps.points
    return DipoleSet(np.concatenate([p, p + offset * n, p - offset * n]), float(offset))


def _system_matrix(centers, kernel):
    m = len(centers)
    diff = centers[:, None, :] - centers[None, :, :]
    r = np.sqrt(np.einsum("abk,abk->ab", diff, diff))
    a = np.zeros((m + 4, m + 4))
    a[:m, :m] = kernel_profile(kernel, r)
    a[:m, m] = 1.0
    a[:m, m + 1:] = centers
    a[m, :m] = 1.0
    a[m + 1:, :m] = centers.T
    return a, r


def solve_rbf(dipoles: DipoleSet, kernel: str = "biharmonic") -> RbfModel:
    """Solve the bordered interpolation system by LU with partial pivoting.

    Raises :class:`SingularSystem` for coincident centers, a failed
    factorization, or a relative residual above 1e-4.
    """
    _check_kernel(kernel)
    centers = np.asarray(dipoles.centers, dtype=np.float64)
    m = len(centers)
    a, r = _system_matrix(centers, kernel)
    extent = float(np.ptp(centers, axis=0).max()) if m > 1 else 1.0
    np.fill_diagonal(r, np.inf)
    if m > 1 and r.min() <= 1e-12 * max(extent, 1.0):
        pair = np.unravel_index(np.argmin(r), r.shape)
        raise SingularSystem(f"dipole centers {pair[0]} and {pair[1]} coincide")
    b = dipoles.targets()
    try:
        sol = np.linalg.solve(a, b)
    except np.linalg.LinAlgError as exc:
        raise SingularSystem(f"RBF factorization failed: {exc}") from None
    if not np.all(np.isfinite(sol)):
        raise SingularSystem("RBF solve produced non-finite weights")
    resid = np.max(np.abs(a @ sol - b)) / max(np.max(np.abs(b)), 1e-300)
    if resid > 1e-4:
        raise SingularSystem(f"RBF system is ill-conditioned (relative residual {resid:.3g})")
    return RbfModel(sol[:m], sol[m + 1:].copy(), float(sol[m]), kernel)


def eval_implicit_batch(model: RbfModel, dipoles: DipoleSet, points) -> np.ndarray:
    """f(x) = sum_a w_a phi(|x - c_a|) + c . x + c0 for each row of ``points``."""
    x = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    centers = dipoles.centers
    out = np.empty(len(x))
    for start in range(0, len(x), _EVAL_CHUNK):
        chunk = x[start:start + _EVAL_CHUNK]
        d = chunk[:, None, :] - centers[None, :, :]
        r = np.sqrt(np.einsum("nak,nak->na", d, d))
        out[start:start + _EVAL_CHUNK] = kernel_profile(model.kernel, r) @ model.weights
    return out + x @ model.linear + model.constant


def eval_implicit(model: RbfModel, dipoles: DipoleSet, x) -> float:
    return float(eval_implicit_batch(model, dipoles, np.reshape(x, (1, 3)))[0])


def fit_implicit(cps: ControlPointSet, offset: float, kernel: str = "biharmonic"):
    """Convenience: dipoles and solved model for one control point set."""
    dipoles = build_dipoles(cps, offset)
    return solve_rbf(dipoles, kernel), dipoles


def reconstruct_sdf_grid(model: RbfModel, dipoles: DipoleSet, dims, spacing=(1.0, 1.0, 1.0),
                         origin=(0.0, 0.0, 0.0)) -> SdfVolume:
    """Sample the implicit function at every voxel center of a grid."""
    dims = tuple(int(n) for n in dims)
    if len(dims) != 3 or min(dims) < 1:
        raise ConfigError(f"grid dims must be 3 positive integers, got {dims}")
    axes = [o + s * np.arange(n) for o, s, n in zip(origin, spacing, dims)]
    grid = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([g.ravel() for g in grid], axis=1)
    values = eval_implicit_batch(model, dipoles, pts).reshape(dims)
    return SdfVolume(values, spacing, origin)
