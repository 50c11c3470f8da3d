import numpy as np
import pytest

from ctpredict.volume import (
    AIR_HU,
    Ctp4d,
    Grid3,
    LabelVol,
    Vol3,
    downsample_mean,
    gaussian_smooth,
    remove_gantry_tilt,
    resample_trilinear,
)


def make_vol(shape=(8, 8, 4), spacing=(1.0, 1.0, 2.0), seed=0):
    rng = np.random.default_rng(seed)
    return Vol3(Grid3(shape, spacing), rng.uniform(0, 100, shape))


class TestGrid3:
    def test_rejects_bad_shape(self):
        with pytest.raises(ValueError):
            Grid3((0, 4, 4), (1, 1, 1))

    def test_rejects_nonpositive_spacing(self):
        with pytest.raises(ValueError):
            Grid3((4, 4, 4), (1, 0, 1))

    def test_rejects_large_tilt(self):
        with pytest.raises(ValueError):
            Grid3((4, 4, 4), (1, 1, 1), tilt_deg=45.0)

    def test_voxel_volume(self):
        g = Grid3((4, 4, 4), (1.5, 1.5, 4.0))
        assert g.voxel_volume_ml == pytest.approx(0.009)


class TestContainers:
    def test_vol3_shape_mismatch(self):
        with pytest.raises(ValueError):
            Vol3(Grid3((4, 4, 4), (1, 1, 1)), np.zeros((4, 4, 3)))

    def test_vol3_rejects_nan(self):
        data = np.zeros((4, 4, 4))
        data[0, 0, 0] = np.nan
        with pytest.raises(ValueError):
            Vol3(Grid3((4, 4, 4), (1, 1, 1)), data)

    def test_labelvol_range(self):
        g = Grid3((2, 2, 2), (1, 1, 1))
        LabelVol(g, np.full((2, 2, 2), 0.5))
        with pytest.raises(ValueError):
            LabelVol(g, np.full((2, 2, 2), 1.5))

    def test_ctp4d_times_strictly_increasing(self):
        g = Grid3((2, 2, 2), (1, 1, 1))
        with pytest.raises(ValueError):
            Ctp4d(g, [0.0, 0.0, 2.0], np.zeros((2, 2, 2, 3)))

    def test_ctp4d_frame_count_matches_times(self):
        g = Grid3((2, 2, 2), (1, 1, 1))
        with pytest.raises(ValueError):
            Ctp4d(g, [0.0, 2.0, 4.0], np.zeros((2, 2, 2, 2)))

    def test_volume_data_is_immutable(self):
        v = make_vol()
        with pytest.raises(ValueError):
            v.data[0, 0, 0] = 1.0


class TestResampleTrilinear:
    def test_identity_grid_is_bit_exact(self):
        v = make_vol()
        out = resample_trilinear(v, v.grid)
        assert out.data.tobytes() == v.data.tobytes()

    def test_constant_volume_stays_constant(self):
        g = Grid3((8, 8, 4), (2.0, 2.0, 2.0))
        v = Vol3(g, np.full(g.shape, 37.0))
        target = Grid3((6, 6, 3), (2.0, 2.0, 2.0))
        out = resample_trilinear(v, target)
        assert np.allclose(out.data, 37.0)

    def test_upsampled_ramp_matches_analytic_values(self):
        # f(x, y, z) = 0.01*x_mm + 0.02*y_mm, sampled on a coarse grid, then
        # evaluated on a 2x finer in-plane grid. Oracle: the ramp itself.
        g = Grid3((9, 9, 3), (2.0, 2.0, 2.0))
        xs = np.arange(9) * 2.0
        ramp = 0.01 * xs[:, None, None] + 0.02 * xs[None, :, None]
        ramp = np.broadcast_to(ramp, g.shape)
        v = Vol3(g, ramp)
        target = Grid3((15, 15, 3), (1.0, 1.0, 2.0))
        out = resample_trilinear(v, target)
        tx = np.arange(15) * 1.0
        expected = np.broadcast_to(
            0.01 * tx[:, None, None] + 0.02 * tx[None, :, None], target.shape
        )
        assert np.abs(out.data - expected).max() < 1e-6

    def test_fill_value_outside_domain(self):
        v = make_vol(shape=(4, 4, 2))
        target = Grid3((10, 10, 5), v.grid.spacing)
        out = resample_trilinear(v, target)
        assert out.data[-1, -1, -1] == AIR_HU

    def test_output_within_source_and_fill_bounds(self):
        v = make_vol(seed=3)
        target = Grid3((11, 13, 5), (0.7, 0.6, 1.7))
        out = resample_trilinear(v, target)
        lo = min(v.data.min(), AIR_HU)
        hi = max(v.data.max(), AIR_HU)
        assert out.data.min() >= lo - 1e-9
        assert out.data.max() <= hi + 1e-9


def make_ctp(shape=(8, 12, 4), tilt=0.0, seed=1):
    rng = np.random.default_rng(seed)
    g = Grid3(shape, (1.0, 1.0, 2.0), tilt_deg=tilt)
    data = rng.uniform(0, 100, shape + (3,))
    return Ctp4d(g, [0.0, 2.0, 4.0], data)


class TestRemoveGantryTilt:
    def test_zero_tilt_passthrough(self):
        c = make_ctp(tilt=0.0)
        out = remove_gantry_tilt(c)
        assert out is c

    def test_round_trip_recovers_original(self):
        # smooth field: linear interpolation error stays within tolerance
        g = Grid3((4, 40, 4), (1.0, 1.0, 2.0), tilt_deg=10.0)
        ys = np.arange(40)
        band = 50.0 + 30.0 * np.sin(2 * np.pi * ys / 32.0)
        data = np.broadcast_to(band[None, :, None, None], g.shape + (2,)).copy()
        c = Ctp4d(g, [0.0, 2.0], data)
        ortho = remove_gantry_tilt(c)
        back = remove_gantry_tilt(
            Ctp4d(ortho.grid.with_tilt(-10.0), ortho.times_s, ortho.data)
        )
        err = np.abs(back.data[:, 4:-4, :, :] - c.data[:, 4:-4, :, :])
        assert err.max() < 0.5

    def test_impulse_shifts_by_analytic_shear(self):
        g = Grid3((5, 32, 4), (1.0, 1.0, 2.0), tilt_deg=15.0)
        data = np.zeros(g.shape + (2,))
        x, y, z = 2, 16, 3
        data[x, y, z, :] = 1.0
        c = Ctp4d(g, [0.0, 2.0], data)
        out = remove_gantry_tilt(c, fill=0.0)
        shift = z * 2.0 * np.tan(np.radians(15.0)) / 1.0
        ys = np.arange(32)
        profile = out.data[x, :, z, 0]
        centroid = (ys * profile).sum() / profile.sum()
        assert centroid == pytest.approx(y - shift, abs=1e-6)
        assert out.grid.tilt_deg == 0.0

    def test_idempotent_once_orthogonal(self):
        c = make_ctp(tilt=7.0)
        once = remove_gantry_tilt(c)
        twice = remove_gantry_tilt(once)
        assert twice is once


class TestGaussianSmooth:
    def test_sigma_zero_identity(self):
        v = make_vol()
        assert gaussian_smooth(v, 0.0) is v

    def test_negative_sigma_rejected(self):
        with pytest.raises(ValueError):
            gaussian_smooth(make_vol(), -1.0)

    def test_constant_preserved(self):
        g = Grid3((10, 10, 6), (1.5, 1.5, 4.0))
        v = Vol3(g, np.full(g.shape, 12.5))
        out = gaussian_smooth(v, 2.5)
        assert np.abs(out.data - 12.5).max() < 1e-9

    def test_interior_impulse_mass_is_one(self):
        # impulse far enough from every face that boundary renormalization
        # never touches the deposited mass
        g = Grid3((21, 21, 21), (1.0, 1.0, 1.0))
        data = np.zeros(g.shape)
        data[10, 10, 10] = 1.0
        out = gaussian_smooth(Vol3(g, data), 1.5)
        assert out.data.sum() == pytest.approx(1.0, abs=1e-6)

    def test_reduces_variance(self):
        v = make_vol(shape=(16, 16, 8), seed=5)
        out = gaussian_smooth(v, 2.0)
        assert out.data.std() < v.data.std()


class TestDownsampleMean:
    def test_identity_factors(self):
        v = make_vol()
        assert downsample_mean(v, (1, 1, 1)) is v

    def test_constant_blocks(self):
        g = Grid3((9, 9, 4), (1.0, 1.0, 1.0))
        v = Vol3(g, np.full(g.shape, 3.25))
        out = downsample_mean(v, (3, 3, 1))
        assert out.grid.shape == (3, 3, 4)
        assert out.grid.spacing == (3.0, 3.0, 1.0)
        assert np.allclose(out.data, 3.25)

    def test_checkerboard_block_means(self):
        g = Grid3((6, 6, 1), (1.0, 1.0, 1.0))
        xs = np.arange(6)
        board = ((xs[:, None] + xs[None, :]) % 2).astype(float)[:, :, None]
        out = downsample_mean(Vol3(g, board), (3, 3, 1))
        near_4 = np.isclose(out.data, 4.0 / 9.0)
        near_5 = np.isclose(out.data, 5.0 / 9.0)
        assert (near_4 | near_5).all()

    def test_partial_trailing_block_uses_available_voxels(self):
        g = Grid3((7, 1, 1), (1.0, 1.0, 1.0))
        v = Vol3(g, np.arange(7, dtype=float).reshape(7, 1, 1))
        out = downsample_mean(v, (3, 1, 1))
        assert out.data[:, 0, 0] == pytest.approx([1.0, 4.0, 6.0])

    def test_global_mean_preserved_for_complete_blocks(self):
        v = make_vol(shape=(12, 12, 4), seed=7)
        out = downsample_mean(v, (3, 3, 2))
        assert out.data.mean() == pytest.approx(v.data.mean(), abs=1e-9)

    def test_rejects_bad_factor(self):
        with pytest.raises(ValueError):
            downsample_mean(make_vol(), (0, 1, 1))
