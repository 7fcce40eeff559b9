import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from conftest import analytic_sphere_sdf, brute_force_sq_distances
from rbfssm.errors import AllOneLabel, ConfigError, EmptyBand, OutOfBounds, SpecOutOfGrid
from rbfssm.volume import (
    SdfVolume,
    Segmentation,
    ShapeSpec,
    gradient,
    sample_narrow_band,
    sample_trilinear,
    sdf_from_segmentation,
    squared_edt,
    synth_segmentation,
)


class TestSdfFromSegmentation:
    def test_single_center_voxel(self):
        labels = np.zeros((3, 3, 3), dtype=bool)
        labels[1, 1, 1] = True
        sdf = sdf_from_segmentation(Segmentation(labels))
        assert sdf.values[1, 1, 1] == -1.0
        assert sdf.values[0, 0, 0] == pytest.approx(1.7320508, abs=1e-7)

    @pytest.mark.parametrize("fill", [True, False])
    def test_uniform_label_rejected(self, fill):
        with pytest.raises(AllOneLabel):
            sdf_from_segmentation(Segmentation(np.full((4, 4, 4), fill)))

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_brute_force(self, seed):
        rng = np.random.default_rng(seed)
        labels = rng.random((9, 8, 7)) < rng.uniform(0.05, 0.6)
        labels[0, 0, 0], labels[-1, -1, -1] = True, False
        sdf = sdf_from_segmentation(Segmentation(labels))
        sq = brute_force_sq_distances(labels)
        edt = np.where(labels, squared_edt(~labels), squared_edt(labels))
        np.testing.assert_array_equal(edt, sq)
        np.testing.assert_array_equal(np.abs(sdf.values), np.sqrt(sq))

    def test_anisotropic_spacing(self):
        rng = np.random.default_rng(11)
        labels = rng.random((7, 6, 8)) < 0.3
        spacing = (0.5, 1.25, 2.0)
        sdf = sdf_from_segmentation(Segmentation(labels, spacing))
        sq = brute_force_sq_distances(labels, spacing)
        np.testing.assert_allclose(sdf.values ** 2, sq, rtol=1e-12)

    def test_signs(self):
        rng = np.random.default_rng(3)
        labels = rng.random((6, 6, 6)) < 0.5
        v = sdf_from_segmentation(Segmentation(labels)).values
        assert np.all(v[labels] < 0) and np.all(v[~labels] > 0)

    @settings(max_examples=25, deadline=None)
    @given(arrays(bool, (5, 4, 6)))
    def test_property_brute_force(self, labels):
        if labels.all() or not labels.any():
            return
        sdf = sdf_from_segmentation(Segmentation(labels))
        np.testing.assert_array_equal(np.abs(sdf.values), np.sqrt(brute_force_sq_distances(labels)))


def test_squared_edt_without_features_is_inf():
    assert np.all(np.isinf(squared_edt(np.zeros((3, 3, 3), dtype=bool))))


class TestTrilinear:
    def test_reproduces_nodes(self):
        rng = np.random.default_rng(0)
        vol = SdfVolume(rng.normal(size=(5, 4, 3)), (0.5, 2.0, 1.0), (1.0, -2.0, 0.5))
        np.testing.assert_array_equal(vol.sample(vol.voxel_centers()), vol.values.ravel())

    def test_midpoint(self):
        values = np.zeros((2, 2, 2))
        values[0, :, :] = 2.0
        values[1, :, :] = 4.0
        assert sample_trilinear(SdfVolume(values), (0.5, 0.0, 0.0)) == 3.0

    @pytest.mark.parametrize("x", [(-0.1, 0, 0), (0, 0, 3.01), (5, 5, 5)])
    def test_out_of_bounds(self, x):
        with pytest.raises(OutOfBounds):
            sample_trilinear(SdfVolume(np.zeros((4, 4, 4))), x)

    @given(st.tuples(*[st.floats(0, 3) for _ in range(3)]))
    def test_linear_fields_exact(self, x):
        g = np.stack(np.meshgrid(*[np.arange(4.0)] * 3, indexing="ij"), -1)
        vol = SdfVolume(g @ np.array([0.3, -1.2, 2.0]) + 0.7)
        assert sample_trilinear(vol, x) == pytest.approx(np.dot(x, [0.3, -1.2, 2.0]) + 0.7, abs=1e-12)

    def test_sample_grad_matches_difference_quotient(self):
        rng = np.random.default_rng(5)
        vol = SdfVolume(rng.normal(size=(6, 6, 6)), (1.0, 0.5, 2.0))
        x = rng.uniform(0.5, 2.2, size=(20, 3))
        h = 1e-6
        fd = np.stack([(vol.sample(x + h * e) - vol.sample(x - h * e)) / (2 * h) for e in np.eye(3)], 1)
        np.testing.assert_allclose(vol.sample_grad(x), fd, atol=1e-6)


class TestGradient:
    def test_linear_ramp(self):
        g = np.stack(np.meshgrid(*[np.arange(6.0)] * 3, indexing="ij"), -1)
        vol = SdfVolume(g[..., 0])
        np.testing.assert_allclose(gradient(vol, (2.3, 2.1, 3.7)), [1, 0, 0], atol=1e-9)

    @settings(max_examples=30)
    @given(st.tuples(*[st.floats(-2, 2) for _ in range(4)]),
           st.tuples(*[st.floats(1.0, 4.0) for _ in range(3)]))
    def test_linear_fields(self, coef, x):
        a, b, c, d = coef
        g = np.stack(np.meshgrid(*[np.arange(6.0)] * 3, indexing="ij"), -1)
        vol = SdfVolume(a * g[..., 0] + b * g[..., 1] + c * g[..., 2] + d)
        np.testing.assert_allclose(gradient(vol, x), [a, b, c], atol=1e-9)

    def test_sphere_on_x_axis(self, sphere_sdf):
        c = np.array([11.5, 11.7, 11.3])
        np.testing.assert_allclose(gradient(sphere_sdf, c + [9.2, 0, 0]), [1, 0, 0], atol=1e-2)

    def test_constant(self):
        np.testing.assert_array_equal(gradient(SdfVolume(np.full((4, 4, 4), 3.0)), (1.5, 1.5, 1.5)), 0.0)


class TestNarrowBand:
    def test_containment_and_radius(self):
        vol = analytic_sphere_sdf((16, 16, 16), (7.5, 7.5, 7.5), 5.0)
        band = sample_narrow_band(vol, 1.0, 500, 42)
        assert band.points.shape == (500, 3)
        assert np.all(np.abs(band.distances) <= 1.0)
        np.testing.assert_array_equal(band.distances, vol.sample(band.points))
        r = np.linalg.norm(band.points - 7.5, axis=1)
        delta = 0.5 * np.sqrt(3)
        assert r.min() >= 4 - delta and r.max() <= 6 + delta

    def test_seed_determinism(self, sphere_sdf):
        a = sample_narrow_band(sphere_sdf, 1.5, 300, 7)
        b = sample_narrow_band(sphere_sdf, 1.5, 300, 7)
        np.testing.assert_array_equal(a.points, b.points)
        c = sample_narrow_band(sphere_sdf, 1.5, 300, 8)
        assert not np.array_equal(a.points, c.points)

    def test_empty_band(self):
        with pytest.raises(EmptyBand):
            sample_narrow_band(SdfVolume(np.full((4, 4, 4), 5.0)), 1.0, 10, 0)

    def test_nonpositive_halfwidth(self, sphere_sdf):
        with pytest.raises(ConfigError):
            sample_narrow_band(sphere_sdf, 0.0, 10, 0)


class TestSynth:
    def test_sphere_voxel_count(self):
        seg = synth_segmentation(ShapeSpec("sphere", (31.5, 31.5, 31.5), radius=10), (64, 64, 64))
        g = np.stack(np.meshgrid(*[np.arange(64.0)] * 3, indexing="ij"), -1)
        exact = int((np.sum((g - 31.5) ** 2, -1) <= 100).sum())
        assert seg.labels.sum() == exact
        assert abs(exact - 4 / 3 * np.pi * 1000) < 0.01 * 4188.8

    def test_out_of_grid(self):
        with pytest.raises(SpecOutOfGrid):
            synth_segmentation(ShapeSpec("sphere", (8, 8, 8), radius=7), (16, 16, 16))

    def test_margin_is_two_voxels(self):
        ok = ShapeSpec("sphere", (8, 8, 8), radius=6)
        synth_segmentation(ok, (17, 17, 17))
        with pytest.raises(SpecOutOfGrid):
            synth_segmentation(ok, (16, 16, 16))

    def test_ellipsoid_degenerates_to_sphere(self):
        c = (15.2, 15.9, 16.1)
        a = synth_segmentation(ShapeSpec("ellipsoid", c, axes=(10, 10, 10)), (32, 32, 32))
        b = synth_segmentation(ShapeSpec("sphere", c, radius=10), (32, 32, 32))
        np.testing.assert_array_equal(a.labels, b.labels)

    @pytest.mark.parametrize("spec", [
        ShapeSpec("capsule", (12, 12, 12), radius=3, half_axis=(4, 1, 0)),
        ShapeSpec("sphere-with-bump", (12, 12, 12), radius=5, bump_offset=(5, 0, 0), bump_radius=2),
    ])
    def test_other_kinds_nonempty_and_bounded(self, spec):
        seg = synth_segmentation(spec, (25, 25, 25))
        idx = np.argwhere(seg.labels)
        lo, hi = spec.bounds()
        assert len(idx) > 0 and np.all(idx >= np.floor(lo)) and np.all(idx <= np.ceil(hi))

    @pytest.mark.parametrize("d", [
        {"kind": "cube", "center": [0, 0, 0]},
        {"kind": "sphere", "center": [0, 0, 0], "radius": -1},
        {"kind": "ellipsoid", "center": [0, 0, 0], "axes": [1, 0, 1]},
        {"kind": "sphere", "center": [0, 0, 0], "radius": 1, "colour": "red"},
    ])
    def test_invalid_specs(self, d):
        with pytest.raises(ConfigError):
            ShapeSpec.from_dict(d)

    def test_dict_round_trip(self):
        spec = ShapeSpec("sphere-with-bump", (1.0, 2.0, 3.0), radius=4.0, bump_offset=(1.0, 0.0, 0.0),
                         bump_radius=1.5)
        assert ShapeSpec.from_dict(spec.to_dict()) == spec

    def test_generated_sdf_consistent(self):
        seg = synth_segmentation(ShapeSpec("ellipsoid", (10, 10, 10), axes=(6, 4, 3)), (21, 21, 21))
        sdf = sdf_from_segmentation(seg)
        np.testing.assert_array_equal(sdf.values < 0, seg.labels)
