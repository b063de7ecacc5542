import numpy as np
import pytest

from windinr import synth
from windinr.synth import (
    ParameterError,
    TerrainField,
    WindCaseParams,
    downsample_background,
    enumerate_case_params,
    generate_terrain,
    generate_wind_case,
    make_splits,
    sample_hr_points,
    truth_wind,
)


def params(direction=0, speed=16.0, shear=0.10, seed=7):
    return WindCaseParams(direction, speed, shear, seed)


class TestTerrain:
    def test_flat_mode(self):
        t = generate_terrain(3, 16, amplitude_m=0.0)
        assert np.all(t.elevation == 0.0)
        assert np.all(t.grad_x == 0.0) and np.all(t.grad_y == 0.0)

    def test_determinism(self):
        a = generate_terrain(99, 32)
        b = generate_terrain(99, 32)
        np.testing.assert_array_equal(a.elevation, b.elevation)
        np.testing.assert_array_equal(a.grad_x, b.grad_x)

    def test_gradients_are_central_differences(self):
        t = generate_terrain(5, 32)
        gy, gx = np.gradient(t.elevation, t.cell_size_m)
        np.testing.assert_array_equal(t.grad_x, gx / synth.GRAD_SCALE)
        np.testing.assert_array_equal(t.grad_y, gy / synth.GRAD_SCALE)

    def test_elevation_bounds(self):
        t = generate_terrain(5, 48, amplitude_m=800.0)
        assert t.elevation.min() >= 0.0
        assert t.elevation.max() <= synth.Z_TOP_M

    def test_resolution_minimum(self):
        with pytest.raises(ParameterError):
            generate_terrain(1, 8)

    def test_analytic_gradient_matches_finite_differences(self):
        fld = TerrainField(11)
        rng = np.random.default_rng(0)
        xy = rng.uniform(-0.9, 0.9, size=(50, 2))
        eps = 1e-6
        for axis in (0, 1):
            d = np.zeros(2)
            d[axis] = eps
            num = (fld.elevation(xy + d) - fld.elevation(xy - d)) / (2 * eps)
            num_slope = num / synth.HALF_DOMAIN_M
            np.testing.assert_allclose(fld.gradient(xy)[:, axis], num_slope,
                                       rtol=1e-5, atol=1e-10)


class TestTruthWind:
    def test_flat_low_shear_uniform(self):
        fld = TerrainField(1, amplitude_m=0.0)
        pts = np.column_stack([np.zeros(5), np.zeros(5), np.linspace(0.01, 1, 5)])
        w = truth_wind(fld, params(shear=0.01), pts)
        assert np.all(np.abs(w[:, 2]) < 1e-12)
        spread = np.ptp(np.linalg.norm(w[:, :2], axis=1))
        assert spread < 0.06 * 16.0  # a few percent of the inflow speed

    def test_linear_in_speed(self):
        fld = TerrainField(2)
        rng = np.random.default_rng(1)
        pts = np.column_stack([rng.uniform(-1, 1, 40), rng.uniform(-1, 1, 40),
                               rng.uniform(0, 1, 40)])
        w8 = truth_wind(fld, params(speed=8.0), pts)
        w16 = truth_wind(fld, params(speed=16.0), pts)
        np.testing.assert_allclose(w16, 2.0 * w8, rtol=1e-12)

    def test_opposite_direction_negates_over_flat(self):
        fld = TerrainField(3, amplitude_m=0.0)
        rng = np.random.default_rng(2)
        pts = np.column_stack([rng.uniform(-1, 1, 30), rng.uniform(-1, 1, 30),
                               rng.uniform(0, 1, 30)])
        w = truth_wind(fld, params(direction=5), pts)
        w_op = truth_wind(fld, params(direction=29), pts)
        np.testing.assert_allclose(w_op[:, :2], -w[:, :2], atol=1e-12)

    @pytest.mark.parametrize("seed", range(3))
    def test_magnitude_bound(self, seed):
        fld = TerrainField(seed, amplitude_m=800.0)
        rng = np.random.default_rng(seed)
        pts = np.column_stack([rng.uniform(-1, 1, 500), rng.uniform(-1, 1, 500),
                               rng.uniform(0, 1, 500)])
        for sp in synth.SPEEDS:
            for sh in synth.SHEARS:
                w = truth_wind(fld, params(direction=seed * 7 % 48, speed=sp, shear=sh), pts)
                assert np.linalg.norm(w, axis=1).max() <= 2.0 * sp


class TestDownsample:
    def test_constant_field(self):
        # Flat terrain with negligible shear: wind at 20 m AGL is constant,
        # so every coarse cell equals that constant.
        fld = TerrainField(4, amplitude_m=0.0)
        p = params(direction=3, shear=0.01)
        lr = downsample_background(fld, p)
        h = synth.LR_HEIGHT_M / synth.Z_TOP_M
        ref = truth_wind(fld, p, np.array([[0.0, 0.0, h]]))[0]
        np.testing.assert_allclose(lr.u, ref[0], rtol=1e-12)
        np.testing.assert_allclose(lr.v, ref[1], rtol=1e-12)

    def test_linear_field_exact_at_node(self):
        # A synthetic linear field integrates to its cell-centre value under
        # the symmetric block average.
        class LinearField:
            def gradient(self, xy):
                return np.zeros(xy.shape[:-1] + (2,))

            def elevation(self, xy):
                return np.zeros(xy.shape[:-1])

        fld = LinearField()
        p = params()
        orig = synth.truth_wind

        def linear_truth(f, pr, pts):
            out = np.zeros((len(pts), 3))
            out[:, 0] = 2.0 * pts[:, 0] + 1.0
            out[:, 1] = -3.0 * pts[:, 1]
            return out

        synth.truth_wind = linear_truth
        try:
            lr = downsample_background(fld, p)
        finally:
            synth.truth_wind = orig
        nodes = np.linspace(-synth.LR_EXTENT, synth.LR_EXTENT, synth.LR_N)
        np.testing.assert_allclose(lr.u, np.tile(2.0 * nodes + 1.0, (7, 1)), atol=1e-12)
        np.testing.assert_allclose(lr.v, np.tile(-3.0 * nodes[:, None], (1, 7)), atol=1e-12)

    def test_mask_all_ones(self):
        lr = downsample_background(TerrainField(5), params())
        np.testing.assert_array_equal(lr.mask, np.ones((synth.LR_N, synth.LR_N)))

    def test_lr_matches_block_average_of_truth(self):
        fld = TerrainField(6)
        p = params(direction=11, speed=12.0, shear=0.30)
        lr = downsample_background(fld, p)
        again = downsample_background(fld, p)
        np.testing.assert_allclose(lr.u, again.u, atol=1e-12)
        np.testing.assert_allclose(lr.v, again.v, atol=1e-12)


class TestCases:
    def test_case_determinism(self):
        t = generate_terrain(7, 32)
        a = generate_wind_case(t, params(), n_hr_points=512)
        b = generate_wind_case(t, params(), n_hr_points=512)
        np.testing.assert_array_equal(a.hr_points, b.hr_points)
        np.testing.assert_array_equal(a.lr.u, b.lr.u)

    def test_hr_point_ranges(self):
        t = generate_terrain(8, 32)
        c = generate_wind_case(t, params(), n_hr_points=512)
        pts = c.hr_points
        assert pts.shape == (512, 6)
        assert pts[:, 0].min() >= -1 and pts[:, 0].max() <= 1
        assert pts[:, 1].min() >= -1 and pts[:, 1].max() <= 1
        assert pts[:, 2].min() >= 0 and pts[:, 2].max() <= 1

    def test_stratification_covers_cells(self):
        pts = sample_hr_points(TerrainField(9), params(), 512)
        # each of the 8x8x8 cells contains exactly one point
        ix = np.floor((pts[:, 0] + 1) / 2 * 8).astype(int).clip(0, 7)
        iy = np.floor((pts[:, 1] + 1) / 2 * 8).astype(int).clip(0, 7)
        iz = np.floor(pts[:, 2] * 8).astype(int).clip(0, 7)
        assert len(set(zip(ix, iy, iz))) == 512


class TestEnumeration:
    def test_full_enumeration_size(self):
        assert len(enumerate_case_params(1200, 0)) == 1200

    def test_enumeration_unique(self):
        ps = enumerate_case_params(1200, 0)
        combos = {(p.direction_index, p.speed, p.shear) for p in ps}
        assert len(combos) == 48 * 5 * 5

    def test_subset_deterministic(self):
        a = enumerate_case_params(20, 5)
        b = enumerate_case_params(20, 5)
        assert a == b

    def test_invalid_params_rejected(self):
        with pytest.raises(ParameterError):
            WindCaseParams(48, 16.0, 0.10, 0)
        with pytest.raises(ParameterError):
            WindCaseParams(0, 17.0, 0.10, 0)
        with pytest.raises(ParameterError):
            WindCaseParams(0, 16.0, 0.2, 0)


class TestSplits:
    def test_standard_sizes(self):
        tr, va, te = make_splits(1200, 0)
        assert (len(tr), len(va), len(te)) == (840, 180, 180)

    def test_desk_sizes(self):
        tr, va, te = make_splits(20, 0)
        assert (len(tr), len(va), len(te)) == (14, 3, 3)

    def test_disjoint_exhaustive(self):
        tr, va, te = make_splits(37, 3)
        all_idx = sorted(tr + va + te)
        assert all_idx == list(range(37))

    def test_deterministic(self):
        assert make_splits(50, 9) == make_splits(50, 9)
