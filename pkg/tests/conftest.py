import numpy as np
import pytest

from rbfssm.volume import SdfVolume


def brute_force_sq_distances(labels, spacing=(1.0, 1.0, 1.0)):
    """Squared distance from every voxel to the nearest opposite-label voxel, O(n^2)."""
    idx = np.argwhere(np.ones(labels.shape, dtype=bool)).astype(float) * np.asarray(spacing)
    flat = labels.ravel()
    out = np.empty(len(idx))
    for mask in (flat, ~flat):
        p, other = idx[mask], idx[~mask]
        out[mask] = ((p[:, None, :] - other[None]) ** 2).sum(-1).min(1)
    return out.reshape(labels.shape)


def analytic_sphere_sdf(dims, center, radius, spacing=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0)):
    axes = [o + s * np.arange(n) for o, s, n in zip(origin, spacing, dims)]
    g = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    return SdfVolume(np.linalg.norm(g - np.asarray(center), axis=-1) - radius, spacing, origin)


def analytic_ellipsoid_sdf(dims, center, axes_len):
    """Scaled implicit ``(|q / a| - 1) * min(a)``; smooth, zero on the ellipsoid."""
    g = np.stack(np.meshgrid(*[np.arange(float(n)) for n in dims], indexing="ij"), axis=-1)
    q = (g - np.asarray(center)) / np.asarray(axes_len)
    return SdfVolume((np.linalg.norm(q, axis=-1) - 1.0) * min(axes_len))


@pytest.fixture(scope="session")
def sphere_sdf():
    return analytic_sphere_sdf((24, 24, 24), (11.5, 11.7, 11.3), 7.0)


def off_lattice(points, spacing=1.0, margin=0.02):
    """True where every index coordinate is at least ``margin`` voxels away from
    the half-integer lattice, i.e. the FD stencil does not straddle a kink of
    the trilinear field or of its half-spacing difference gradient."""
    frac = np.mod(2.0 * np.asarray(points) / spacing, 1.0)
    return np.all((frac > 2 * margin) & (frac < 1 - 2 * margin), axis=-1)


def ellipsoid_volume():
    from rbfssm.volume import ShapeSpec, sdf_from_segmentation, synth_segmentation

    seg = synth_segmentation(ShapeSpec("ellipsoid", (12.0, 12.0, 12.0), axes=(7.0, 6.0, 5.0)), (25, 25, 25))
    return sdf_from_segmentation(seg)


def gradient_instance(seed, vol, j=None, shapes=2, offset=2.0):
    """Random minibatch for gradient checks: ``shapes`` shapes with ``j`` (2..8)
    control points near the ellipsoid surface, uniformly random unit normals,
    ``R`` (8..64) band points each, and a perturbed mean."""
    from rbfssm.losses import ShapeState, mean_shape
    from rbfssm.rbfshape import ControlPointSet, fit_implicit
    from rbfssm.volume import sample_narrow_band

    rng = np.random.default_rng(seed)
    j = int(rng.integers(2, 9)) if j is None else j
    r = int(rng.integers(8, 65))
    states = []
    for _ in range(shapes):
        pts, normals = [], []
        while len(pts) < j:
            u = rng.normal(size=3)
            u /= np.linalg.norm(u)
            p = 12.0 + u * np.array([7.0, 6.0, 5.0]) + rng.normal(scale=0.3, size=3)
            if off_lattice(p):
                n = rng.normal(size=3)
                pts.append(p)
                normals.append(n / np.linalg.norm(n))
        cps = ControlPointSet(pts, normals)
        model, _ = fit_implicit(cps, offset)
        band = sample_narrow_band(vol, offset, r, int(rng.integers(1 << 30)))
        states.append(ShapeState(cps, vol, model, band, offset))
    mu = mean_shape([s.cps for s in states]) + rng.normal(scale=0.5, size=3 * j)
    return states, mu


def max_relative_error(analytic, reference, floor=1e-6):
    worst = 0.0
    for (ap, an), (rp, rn) in zip(analytic, reference):
        for a, r in ((ap, rp), (an, rn)):
            m = np.abs(r) > floor
            if m.any():
                worst = max(worst, float(np.max(np.abs(a - r)[m] / np.abs(r)[m])))
    return worst


# --- acceptance report --------------------------------------------------------

ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def record(request):
    """Collect one pass/fail line per acceptance criterion for the terminal summary."""
    lines = request.config.stash.setdefault(ACCEPTANCE, [])

    def _record(number, title, ok, detail):
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {number} {title}: {detail}"
        lines.append(line)
        print(line)
        return ok

    return _record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[2])):
            terminalreporter.write_line(line)
