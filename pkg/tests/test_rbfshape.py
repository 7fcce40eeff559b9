import numpy as np
import pytest
import scipy.linalg
from hypothesis import given, settings, strategies as st
from scipy.optimize import brentq

from rbfssm.errors import ConfigError, DegenerateNormal, NonPositiveOffset, SingularSystem
from rbfssm.rbfshape import (
    KERNELS,
    ControlPointSet,
    build_dipoles,
    eval_implicit,
    eval_implicit_batch,
    fit_implicit,
    kernel_eval,
    reconstruct_sdf_grid,
    solve_rbf,
)

OCTAHEDRON = np.array([[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]], dtype=float)


def random_cps(rng, j):
    """Points near a unit sphere with jittered outward normals."""
    u = rng.normal(size=(j, 3))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    pts = u * rng.uniform(0.8, 1.2, size=(j, 1)) * rng.uniform(0.5, 10)
    return ControlPointSet(pts + rng.normal(size=3) * 5, u + 0.2 * rng.normal(size=(j, 3)))


def dense_oracle(centers, targets, kernel):
    """Assemble the bordered system entry by entry and solve it with scipy."""
    m = len(centers)
    a = np.zeros((m + 4, m + 4))
    for i in range(m):
        for j in range(m):
            a[i, j] = kernel_eval(kernel, centers[i], centers[j])
        a[i, m:] = [1.0, *centers[i]]
        a[m:, i] = [1.0, *centers[i]]
    return scipy.linalg.solve(a, targets)


class TestKernel:
    def test_biharmonic(self):
        assert kernel_eval("biharmonic", (0, 0, 0), (3, 4, 0)) == 5.0

    def test_triharmonic(self):
        assert kernel_eval("triharmonic", (0, 0, 0), (2, 0, 0)) == 8.0

    def test_thin_plate(self):
        assert kernel_eval("thin-plate-spline", (0, 0, 0), (1, 0, 0)) == 0.0
        assert kernel_eval("thin-plate-spline", (1, 1, 1), (1, 1, 1)) == 0.0
        assert kernel_eval("thin-plate-spline", (0, 0, 0), (0, 2, 0)) == pytest.approx(4 * np.log(2))

    def test_unknown(self):
        with pytest.raises(ConfigError):
            kernel_eval("gaussian", (0, 0, 0), (1, 0, 0))

    @pytest.mark.parametrize("kind", KERNELS)
    @given(st.tuples(*[st.floats(-50, 50) for _ in range(6)]))
    def test_symmetric(self, kind, xy):
        x, y = xy[:3], xy[3:]
        assert kernel_eval(kind, x, y) == kernel_eval(kind, y, x)


class TestDipoles:
    def test_example(self):
        d = build_dipoles(ControlPointSet([[1, 2, 3]], [[0, 0, 2]]), 0.5)
        np.testing.assert_array_equal(d.centers, [[1, 2, 3], [1, 2, 3.5], [1, 2, 2.5]])
        np.testing.assert_array_equal(d.targets(), [0, 0.5, -0.5, 0, 0, 0, 0])

    def test_zero_normal(self):
        with pytest.raises(DegenerateNormal):
            build_dipoles(ControlPointSet([[1, 2, 3]], [[0, 0, 0]]), 0.5)

    @pytest.mark.parametrize("offset", [0.0, -1.0])
    def test_offset(self, offset):
        with pytest.raises(NonPositiveOffset):
            build_dipoles(ControlPointSet([[1, 2, 3]], [[0, 0, 1]]), offset)

    def test_geometry(self):
        cps = random_cps(np.random.default_rng(0), 10)
        d = build_dipoles(cps, 0.7)
        p, plus, minus = np.split(d.centers, 3)
        np.testing.assert_allclose(np.linalg.norm(plus - p, axis=1), 0.7)
        np.testing.assert_allclose(plus - p, -(minus - p), atol=1e-14)


class TestSolve:
    @pytest.mark.parametrize("kernel", KERNELS)
    def test_octahedron(self, kernel):
        model, dip = fit_implicit(ControlPointSet(OCTAHEDRON, OCTAHEDRON), 0.1, kernel)
        vals = eval_implicit_batch(model, dip, dip.centers)
        assert np.max(np.abs(vals - dip.targets()[:18])) <= 1e-8
        ref = dense_oracle(dip.centers, dip.targets(), kernel)
        np.testing.assert_allclose(model.weights, ref[:18], atol=1e-9)
        assert eval_implicit(model, dip, (0, 0, 0)) < 0

    def test_duplicate_points(self):
        cps = ControlPointSet([[0, 0, 0], [0, 0, 0], [1, 0, 0]], [[1, 0, 0], [1, 0, 0], [0, 1, 0]])
        with pytest.raises(SingularSystem):
            fit_implicit(cps, 0.5)

    @pytest.mark.parametrize("seed", range(10))
    def test_side_conditions(self, seed):
        rng = np.random.default_rng(seed)
        model, dip = fit_implicit(random_cps(rng, int(rng.integers(1, 33))), rng.uniform(0.1, 2))
        assert abs(model.weights.sum()) <= 1e-8
        np.testing.assert_allclose(model.weights @ dip.centers, 0, atol=1e-8)

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_dense_oracle(self, seed):
        rng = np.random.default_rng(100 + seed)
        kernel = KERNELS[seed % 3]
        model, dip = fit_implicit(random_cps(rng, 12), 0.5, kernel)
        ref = dense_oracle(dip.centers, dip.targets(), kernel)
        got = np.concatenate([model.weights, [model.constant], model.linear])
        np.testing.assert_allclose(got, ref, rtol=1e-7, atol=1e-9)


class TestEvaluate:
    @pytest.fixture
    def solved(self):
        return fit_implicit(random_cps(np.random.default_rng(3), 16), 0.4)

    def test_interpolates_targets(self, solved):
        model, dip = solved
        j = dip.num_points
        for a, t in [(0, 0.0), (j + 2, 0.4), (2 * j + 5, -0.4)]:
            assert eval_implicit(model, dip, dip.centers[a]) == pytest.approx(t, abs=1e-8)

    def test_batch_edge_cases(self, solved):
        model, dip = solved
        assert eval_implicit_batch(model, dip, np.zeros((0, 3))).shape == (0,)
        x = np.array([[0.3, -0.2, 1.1]])
        assert eval_implicit_batch(model, dip, x)[0] == eval_implicit(model, dip, x[0])

    @settings(max_examples=20, deadline=None)
    @given(st.tuples(*[st.floats(-20, 20) for _ in range(3)]), st.integers(0, 2**31))
    def test_translation_equivariance(self, t, seed):
        rng = np.random.default_rng(seed)
        cps = random_cps(rng, 8)
        x = rng.normal(size=3) * 3
        model, dip = fit_implicit(cps, 0.5)
        moved = ControlPointSet(cps.points + np.asarray(t), cps.normals)
        model2, dip2 = fit_implicit(moved, 0.5)
        assert eval_implicit(model2, dip2, x + np.asarray(t)) == pytest.approx(
            eval_implicit(model, dip, x), abs=1e-6)

    def test_centroid_inside(self):
        rng = np.random.default_rng(9)
        u = rng.normal(size=(30, 3))
        u /= np.linalg.norm(u, axis=1, keepdims=True)
        model, dip = fit_implicit(ControlPointSet(3 * u + 1, u), 0.3)
        assert eval_implicit(model, dip, (1, 1, 1)) < 0


class TestReconstructGrid:
    def test_octahedron_crossing(self):
        model, dip = fit_implicit(ControlPointSet(OCTAHEDRON, OCTAHEDRON), 0.1)
        vol = reconstruct_sdf_grid(model, dip, (32, 32, 32), (0.1, 0.1, 0.1), (-1.6, -1.6, -1.6))
        line = vol.values[16:, 16, 16]
        xs = -1.6 + 0.1 * np.arange(16, 32)
        k = np.flatnonzero(np.sign(line[:-1]) != np.sign(line[1:]))[0]
        grid_root = xs[k] - line[k] * (xs[k + 1] - xs[k]) / (line[k + 1] - line[k])
        root = brentq(lambda x: eval_implicit(model, dip, (x, 0, 0)), 0.5, 1.5)
        assert abs(root - 1.0) <= 0.1 and abs(grid_root - 1.0) <= 0.1
        assert abs(grid_root - root) <= 0.01

    def test_values_are_evaluations(self):
        model, dip = fit_implicit(random_cps(np.random.default_rng(1), 6), 0.5)
        vol = reconstruct_sdf_grid(model, dip, (4, 3, 5), (0.5, 1.0, 0.25), (1.0, 2.0, -1.0))
        np.testing.assert_array_equal(vol.values.ravel(), eval_implicit_batch(model, dip, vol.voxel_centers()))

    def test_single_voxel(self):
        model, dip = fit_implicit(random_cps(np.random.default_rng(2), 5), 0.5)
        vol = reconstruct_sdf_grid(model, dip, (1, 1, 1), (1, 1, 1), (0.2, 0.3, 0.4))
        assert vol.values[0, 0, 0] == eval_implicit(model, dip, (0.2, 0.3, 0.4))

    def test_control_points_on_grid(self):
        pts = np.array([[2, 2, 2], [4, 2, 2], [3, 4, 2], [3, 3, 4]], dtype=float)
        model, dip = fit_implicit(ControlPointSet(pts, pts - pts.mean(0)), 0.5)
        vol = reconstruct_sdf_grid(model, dip, (7, 7, 7))
        for p in pts.astype(int):
            assert abs(vol.values[tuple(p)]) <= 1e-8
