"""Signed distance volumes on regular grids.

Volumes are stored as numpy arrays indexed ``[i, j, k]`` along x, y, z;
``values.ravel(order="F")`` gives the x-fastest voxel order used on disk.
Physical position of voxel ``(i, j, k)`` is ``origin + (i, j, k) * spacing``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .errors import (
    AllOneLabel,
    ConfigError,
    EmptyBand,
    OutOfBounds,
    SamplingStalled,
    SpecOutOfGrid,
)

# index-space slack for points that land on the far hull face after round-off
_HULL_TOL = 1e-9


def _as_triple(values, name, dtype=float):
    arr = np.asarray(values, dtype=dtype).reshape(-1)
    if arr.shape != (3,):
        raise ConfigError(f"{name} must have 3 components, got {arr.shape[0]}")
    return tuple(arr.tolist())


@dataclass(frozen=True)
class Segmentation:
    """Binary label volume. ``labels`` is a boolean array of shape ``dims``."""

    labels: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    origin: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        labels = np.asarray(self.labels).astype(bool)
        if labels.ndim != 3 or min(labels.shape) < 2:
            raise ConfigError(f"segmentation dims must be 3 values >= 2, got {labels.shape}")
        labels.setflags(write=False)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "spacing", _as_triple(self.spacing, "spacing"))
        object.__setattr__(self, "origin", _as_triple(self.origin, "origin"))
        if min(self.spacing) <= 0:
            raise ConfigError(f"spacing must be positive, got {self.spacing}")

    @property
    def dims(self):
        return self.labels.shape


@dataclass(frozen=True)
class SdfVolume:
    """Signed distance samples on a regular grid (negative inside)."""

    values: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    origin: tuple = (0.0, 0.0, 0.0)
    _flat: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64)
        if values.ndim != 3 or min(values.shape) < 1:
            raise ConfigError(f"volume must be 3-dimensional, got shape {values.shape}")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "spacing", _as_triple(self.spacing, "spacing"))
        object.__setattr__(self, "origin", _as_triple(self.origin, "origin"))
        if min(self.spacing) <= 0:
            raise ConfigError(f"spacing must be positive, got {self.spacing}")
        object.__setattr__(self, "_flat", values.ravel())

    @property
    def dims(self):
        return self.values.shape

    @property
    def bounds(self):
        """Physical box spanned by the voxel centers, as ``(lo, hi)``."""
        lo = np.asarray(self.origin)
        hi = lo + (np.asarray(self.dims) - 1) * np.asarray(self.spacing)
        return lo, hi

    def voxel_centers(self):
        """All voxel centers as an ``(n, 3)`` array in C order of ``values``."""
        axes = [o + s * np.arange(n) for o, s, n in zip(self.origin, self.spacing, self.dims)]
        grid = np.meshgrid(*axes, indexing="ij")
        return np.stack([g.ravel() for g in grid], axis=1)

    def contains(self, points):
        u = self._index_coords(points)
        hi = np.asarray(self.dims) - 1
        return np.all((u >= -_HULL_TOL) & (u <= hi + _HULL_TOL), axis=-1)

    def _index_coords(self, points):
        points = np.asarray(points, dtype=np.float64)
        return (points - np.asarray(self.origin)) / np.asarray(self.spacing)

    def _cells(self, points):
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        u = self._index_coords(pts)
        dims = np.asarray(self.dims)
        if not np.all((u >= -_HULL_TOL) & (u <= dims - 1 + _HULL_TOL)):
            bad = np.flatnonzero(~np.all((u >= -_HULL_TOL) & (u <= dims - 1 + _HULL_TOL), axis=1))
            raise OutOfBounds(f"point {pts[bad[0]].tolist()} lies outside the volume hull")
        u = np.clip(u, 0.0, dims - 1)
        i0 = np.minimum(np.floor(u).astype(np.int64), np.maximum(dims - 2, 0))
        t = u - i0
        nx, ny, nz = self.dims
        strides = np.array([ny * nz, nz, 1])
        step = np.where(dims > 1, strides, 0)
        base = i0 @ strides
        return base, step, t

    def sample(self, points):
        """Trilinear interpolation at an ``(n, 3)`` array of points."""
        base, step, t = self._cells(points)
        v = self._flat
        sx, sy, sz = step
        tx, ty, tz = t[:, 0], t[:, 1], t[:, 2]
        c00 = v[base] * (1 - tx) + v[base + sx] * tx
        c10 = v[base + sy] * (1 - tx) + v[base + sx + sy] * tx
        c01 = v[base + sz] * (1 - tx) + v[base + sx + sz] * tx
        c11 = v[base + sy + sz] * (1 - tx) + v[base + sx + sy + sz] * tx
        c0 = c00 * (1 - ty) + c10 * ty
        c1 = c01 * (1 - ty) + c11 * ty
        return c0 * (1 - tz) + c1 * tz

    def sample_grad(self, points):
        """Exact spatial derivative of the trilinear interpolant, ``(n, 3)``.

        On a cell face the derivative of the cell chosen by :meth:`sample` is
        returned (one-sided).
        """
        base, step, t = self._cells(points)
        v = self._flat
        sx, sy, sz = step
        tx, ty, tz = t[:, 0], t[:, 1], t[:, 2]
        c000 = v[base]
        c100 = v[base + sx]
        c010 = v[base + sy]
        c110 = v[base + sx + sy]
        c001 = v[base + sz]
        c101 = v[base + sx + sz]
        c011 = v[base + sy + sz]
        c111 = v[base + sx + sy + sz]
        gx = ((1 - ty) * (1 - tz) * (c100 - c000) + ty * (1 - tz) * (c110 - c010)
              + (1 - ty) * tz * (c101 - c001) + ty * tz * (c111 - c011))
        gy = ((1 - tx) * (1 - tz) * (c010 - c000) + tx * (1 - tz) * (c110 - c100)
              + (1 - tx) * tz * (c011 - c001) + tx * tz * (c111 - c101))
        gz = ((1 - tx) * (1 - ty) * (c001 - c000) + tx * (1 - ty) * (c101 - c100)
              + (1 - tx) * ty * (c011 - c010) + tx * ty * (c111 - c110))
        g = np.stack([gx, gy, gz], axis=1)
        # axes of extent 1 carry no variation
        inv = np.where(np.asarray(self.dims) > 1, 1.0 / np.asarray(self.spacing), 0.0)
        return g * inv

    def fd_gradient(self, points):
        """Central differences of the trilinear field with half-spacing steps."""
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        h = 0.5 * np.asarray(self.spacing)
        out = np.empty_like(pts)
        for axis in range(3):
            e = np.zeros(3)
            e[axis] = h[axis]
            out[:, axis] = (self.sample(pts + e) - self.sample(pts - e)) / (2 * h[axis])
        return out


def sample_trilinear(vol: SdfVolume, x) -> float:
    return float(vol.sample(np.reshape(x, (1, 3)))[0])


def gradient(vol: SdfVolume, x) -> np.ndarray:
    """SDF gradient at ``x`` by half-spacing central differences."""
    return vol.fd_gradient(np.reshape(x, (1, 3)))[0]


# --- exact Euclidean distance transform -------------------------------------

@njit(cache=True)
def _envelope_lines(f, h, out):
    # Lower envelope of parabolas h^2 (x - q)^2 + f[q], one line per row.
    nlines, n = f.shape
    v = np.empty(n, dtype=np.int64)
    z = np.empty(n + 1, dtype=np.float64)
    h2 = h * h
    for line in range(nlines):
        row = f[line]
        k = -1
        for q in range(n):
            fq = row[q]
            if fq == np.inf:
                continue
            if k < 0:
                k = 0
                v[0] = q
                z[0] = -np.inf
                z[1] = np.inf
                continue
            while True:
                p = v[k]
                s = ((fq + h2 * q * q) - (row[p] + h2 * p * p)) / (2.0 * h2 * (q - p))
                if s <= z[k]:
                    k -= 1
                else:
                    break
            k += 1
            v[k] = q
            z[k] = s
            z[k + 1] = np.inf
        if k < 0:
            for q in range(n):
                out[line, q] = np.inf
            continue
        k = 0
        for q in range(n):
            while z[k + 1] < q:
                k += 1
            d = q - v[k]
            out[line, q] = h2 * d * d + row[v[k]]


def squared_edt(features, spacing=(1.0, 1.0, 1.0)):
    """Squared distance from every voxel center to the nearest feature voxel.

    Separable lower-envelope transform applied along x, y and z in turn.
    Voxels with no feature anywhere get ``inf``.
    """
    g = np.where(np.asarray(features, dtype=bool), 0.0, np.inf)
    for axis in range(3):
        moved = np.ascontiguousarray(np.moveaxis(g, axis, -1))
        shape = moved.shape
        lines = moved.reshape(-1, shape[-1])
        out = np.empty_like(lines)
        _envelope_lines(lines, float(spacing[axis]), out)
        g = np.moveaxis(out.reshape(shape), -1, axis)
    return np.ascontiguousarray(g)


def sdf_from_segmentation(seg: Segmentation) -> SdfVolume:
    """Signed distance between voxel centers of opposite label.

    Background voxels get the distance to the closest foreground center,
    foreground voxels the negated distance to the closest background center.
    """
    fg = seg.labels
    n_fg = int(fg.sum())
    if n_fg == 0 or n_fg == fg.size:
        raise AllOneLabel("segmentation has a single label; signed distance is undefined")
    to_fg = squared_edt(fg, seg.spacing)
    to_bg = squared_edt(~fg, seg.spacing)
    values = np.where(fg, -np.sqrt(to_bg), np.sqrt(to_fg))
    return SdfVolume(values, seg.spacing, seg.origin)


# --- narrow band sampling ----------------------------------------------------

@dataclass(frozen=True)
class NarrowBandBatch:
    points: np.ndarray
    distances: np.ndarray
    halfwidth: float


def sample_narrow_band(vol: SdfVolume, halfwidth: float, count: int, seed,
                       chunk: int = 65536) -> NarrowBandBatch:
    """Rejection-sample ``count`` points uniformly from ``|D| <= halfwidth``.

    ``seed`` is anything accepted by :func:`numpy.random.default_rng`.
    """
    if not halfwidth > 0:
        raise ConfigError(f"halfwidth must be positive, got {halfwidth}")
    if count < 0:
        raise ConfigError(f"count must be non-negative, got {count}")
    if not np.any(np.abs(vol.values) <= halfwidth):
        raise EmptyBand(f"no voxel within |D| <= {halfwidth}")
    rng = np.random.default_rng(seed)
    lo, hi = vol.bounds
    pts_out, dist_out = [], []
    accepted = drawn = 0
    while accepted < count:
        cand = rng.uniform(lo, hi, size=(chunk, 3))
        d = vol.sample(cand)
        keep = np.abs(d) <= halfwidth
        pts_out.append(cand[keep])
        dist_out.append(d[keep])
        accepted += int(keep.sum())
        drawn += chunk
        if drawn >= 10_000_000 and accepted < 1e-6 * drawn:
            raise SamplingStalled(f"acceptance rate {accepted / drawn:.2e} below 1e-6")
    if count == 0:
        return NarrowBandBatch(np.zeros((0, 3)), np.zeros(0), float(halfwidth))
    points = np.concatenate(pts_out)[:count]
    distances = np.concatenate(dist_out)[:count]
    return NarrowBandBatch(points, distances, float(halfwidth))


# --- synthetic shapes ----------------------------------------------------------

SHAPE_KINDS = ("sphere", "ellipsoid", "capsule", "sphere-with-bump")


@dataclass(frozen=True)
class ShapeSpec:
    """Analytic solid used to build synthetic cohorts.

    ``sphere``: ``center``, ``radius``.  ``ellipsoid``: ``center``, semi-axes
    ``axes``.  ``capsule``: segment ``center +/- half_axis`` swept by
    ``radius``.  ``sphere-with-bump``: a sphere united with a second ball of
    ``bump_radius`` centred at ``center + bump_offset``.
    """

    kind: str
    center: tuple
    radius: float = 0.0
    axes: tuple | None = None
    half_axis: tuple | None = None
    bump_offset: tuple | None = None
    bump_radius: float = 0.0

    def validate(self):
        if self.kind not in SHAPE_KINDS:
            raise ConfigError(f"unknown shape kind {self.kind!r}")
        _as_triple(self.center, "center")
        if self.kind == "ellipsoid":
            if self.axes is None or min(_as_triple(self.axes, "axes")) <= 0:
                raise ConfigError("ellipsoid axes must be positive")
        elif not self.radius > 0:
            raise ConfigError(f"{self.kind} radius must be positive")
        if self.kind == "capsule" and self.half_axis is None:
            raise ConfigError("capsule needs half_axis")
        if self.kind == "sphere-with-bump":
            if self.bump_offset is None or not self.bump_radius > 0:
                raise ConfigError("sphere-with-bump needs bump_offset and a positive bump_radius")

    def bounds(self):
        c = np.asarray(self.center, dtype=float)
        if self.kind == "sphere":
            return c - self.radius, c + self.radius
        if self.kind == "ellipsoid":
            a = np.asarray(self.axes, dtype=float)
            return c - a, c + a
        if self.kind == "capsule":
            h = np.abs(np.asarray(self.half_axis, dtype=float))
            return c - h - self.radius, c + h + self.radius
        b = c + np.asarray(self.bump_offset, dtype=float)
        return (np.minimum(c - self.radius, b - self.bump_radius),
                np.maximum(c + self.radius, b + self.bump_radius))

    def inside(self, points):
        p = np.asarray(points, dtype=float) - np.asarray(self.center, dtype=float)
        if self.kind == "sphere":
            return np.einsum("ij,ij->i", p, p) <= self.radius ** 2
        if self.kind == "ellipsoid":
            q = p / np.asarray(self.axes, dtype=float)
            return np.einsum("ij,ij->i", q, q) <= 1.0
        if self.kind == "capsule":
            h = np.asarray(self.half_axis, dtype=float)
            hh = float(h @ h)
            t = np.clip(p @ h / hh, -1.0, 1.0) if hh > 0 else np.zeros(len(p))
            d = p - t[:, None] * h
            return np.einsum("ij,ij->i", d, d) <= self.radius ** 2
        b = p - np.asarray(self.bump_offset, dtype=float)
        return ((np.einsum("ij,ij->i", p, p) <= self.radius ** 2)
                | (np.einsum("ij,ij->i", b, b) <= self.bump_radius ** 2))

    def to_dict(self):
        d = {"kind": self.kind, "center": list(self.center)}
        for key in ("radius", "bump_radius"):
            if getattr(self, key):
                d[key] = getattr(self, key)
        for key in ("axes", "half_axis", "bump_offset"):
            if getattr(self, key) is not None:
                d[key] = list(getattr(self, key))
        return d

    @classmethod
    def from_dict(cls, d):
        known = {"kind", "center", "radius", "axes", "half_axis", "bump_offset", "bump_radius"}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown shape fields {sorted(extra)}")
        if "kind" not in d or "center" not in d:
            raise ConfigError("shape needs 'kind' and 'center'")
        kw = dict(d)
        for key in ("center", "axes", "half_axis", "bump_offset"):
            if kw.get(key) is not None:
                kw[key] = _as_triple(kw[key], key)
        spec = cls(**kw)
        spec.validate()
        return spec


def synth_segmentation(spec: ShapeSpec, dims, spacing=(1.0, 1.0, 1.0),
                       origin=(0.0, 0.0, 0.0)) -> Segmentation:
    """Voxelize ``spec``: a voxel is foreground iff its center is inside."""
    spec.validate()
    dims = tuple(int(n) for n in dims)
    spacing = np.asarray(_as_triple(spacing, "spacing"))
    origin = np.asarray(_as_triple(origin, "origin"))
    lo, hi = spec.bounds()
    grid_lo = origin + 2 * spacing
    grid_hi = origin + (np.asarray(dims) - 3) * spacing
    if np.any(lo < grid_lo) or np.any(hi > grid_hi):
        raise SpecOutOfGrid(
            f"{spec.kind} with bounds {lo.tolist()}..{hi.tolist()} does not fit the grid "
            f"with a 2-voxel margin ({grid_lo.tolist()}..{grid_hi.tolist()})")
    axes = [o + s * np.arange(n) for o, s, n in zip(origin, spacing, dims)]
    grid = np.meshgrid(*axes, indexing="ij")
    centers = np.stack([g.ravel() for g in grid], axis=1)
    labels = spec.inside(centers).reshape(dims)
    return Segmentation(labels, tuple(spacing), tuple(origin))
