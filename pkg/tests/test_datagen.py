"""Data generation tests: Gaussian pairs, scene rendering, dataset assembly."""

import json
import math

import numpy as np
import pytest
from scipy import integrate

from xmc import datagen as dg
from xmc.datagen import (
    CLASS_TABLE,
    GaussianPairConfig,
    SceneLatent,
    SimulatorConfig,
    analytic_mi,
    gen_gaussian_pairs,
    make_dataset,
    render_image,
    render_radar,
    sample_scene,
)
from xmc.errors import ConfigError, DomainError, ResampleError
from xmc.seeding import rng_for

CFG = SimulatorConfig()
NOISELESS = SimulatorConfig(sigma_radar=0.0, sigma_image=0.0)


def mi_by_quadrature(rho: float, n: int = 2001, lim: float = 8.0) -> float:
    """Independent oracle: 2-D Simpson quadrature of the bivariate density."""
    x = np.linspace(-lim, lim, n)
    gx, gy = np.meshgrid(x, x, indexing="ij")
    det = 1.0 - rho**2
    joint = np.exp(-(gx**2 - 2 * rho * gx * gy + gy**2) / (2 * det))
    joint /= 2 * np.pi * np.sqrt(det)
    log_marg = -x**2 / 2 - 0.5 * math.log(2 * math.pi)
    integrand = joint * (np.log(np.maximum(joint, 1e-300))
                         - log_marg[:, None] - log_marg[None, :])
    return float(integrate.simpson(integrate.simpson(integrand, x=x, axis=1), x=x))


class TestGaussianPairs:
    def test_zero_rho_gives_near_zero_sample_correlation(self):
        x, y = gen_gaussian_pairs(GaussianPairConfig(dim=1, rho=0.0, count=100_000, seed=1))
        r = np.corrcoef(x[:, 0], y[:, 0])[0, 1]
        assert abs(r) < 0.02

    def test_high_rho_sample_correlation(self):
        x, y = gen_gaussian_pairs(GaussianPairConfig(dim=1, rho=0.9, count=100_000, seed=2))
        r = np.corrcoef(x[:, 0], y[:, 0])[0, 1]
        assert abs(r - 0.9) < 0.02

    def test_coordinates_are_standardized(self):
        x, y = gen_gaussian_pairs(GaussianPairConfig(dim=3, rho=0.5, count=100_000, seed=3))
        for arr in (x, y):
            assert np.abs(arr.mean(axis=0)).max() < 0.02
            assert np.abs(arr.std(axis=0) - 1.0).max() < 0.02

    def test_same_seed_bit_identical(self):
        cfg = GaussianPairConfig(dim=2, rho=0.4, count=100, seed=9)
        x1, y1 = gen_gaussian_pairs(cfg)
        x2, y2 = gen_gaussian_pairs(cfg)
        assert x1.tobytes() == x2.tobytes() and y1.tobytes() == y2.tobytes()

    def test_rho_out_of_range_rejected(self):
        with pytest.raises(ConfigError):
            GaussianPairConfig(dim=1, rho=1.0, count=10, seed=0)


class TestAnalyticMi:
    def test_independence_means_zero(self):
        assert analytic_mi(0.0, 5) == 0.0

    def test_frozen_values(self):
        assert math.isclose(analytic_mi(0.9, 1), 0.8303656034108255, rel_tol=1e-12)
        assert math.isclose(analytic_mi(0.5, 4), 0.5753641449035618, rel_tol=1e-12)

    @pytest.mark.parametrize("rho", [0.3, 0.5, 0.9])
    def test_matches_quadrature_oracle(self, rho):
        assert math.isclose(analytic_mi(rho, 1), mi_by_quadrature(rho), abs_tol=1e-9)

    def test_domain_errors(self):
        with pytest.raises(DomainError):
            analytic_mi(1.0, 1)
        with pytest.raises(DomainError):
            analytic_mi(0.5, 0)


class TestScenes:
    def test_empty_scene_has_no_target(self):
        scene = sample_scene("empty", rng_for(0, "s"), CFG)
        assert scene.range_m is None and scene.reflectivity is None

    def test_car_extent_range(self):
        rng = rng_for(1, "s")
        for _ in range(100):
            scene = sample_scene("car", rng, CFG)
            assert 1.5 <= scene.extent_m <= 2.5

    def test_pedestrian_extent_monte_carlo_mean(self):
        rng = rng_for(2, "s")
        draws = [sample_scene("pedestrian", rng, CFG).extent_m for _ in range(10_000)]
        expected = sum(CLASS_TABLE["pedestrian"].extent) / 2
        assert abs(np.mean(draws) - expected) < 0.05 * expected

    def test_unknown_class_rejected(self):
        with pytest.raises(ConfigError):
            sample_scene("drone", rng_for(0, "s"), CFG)


class TestRenderRadar:
    def test_argmax_at_target_cell(self):
        # place the target exactly at a cell center
        d_range = (CFG.range_max - CFG.range_min) / CFG.range_bins
        d_az = 2 * CFG.azimuth_max / CFG.azimuth_bins
        scene = SceneLatent("car", range_m=CFG.range_min + 10.5 * d_range,
                            azimuth_rad=-CFG.azimuth_max + 20.5 * d_az,
                            extent_m=2.0, reflectivity=4.0)
        heat = render_radar(scene, NOISELESS)
        assert np.unravel_index(heat.argmax(), heat.shape) == (10, 20)

    def test_empty_noiseless_is_all_zero(self):
        heat = render_radar(SceneLatent("empty"), NOISELESS)
        assert np.all(heat == 0.0)

    def test_doubling_reflectivity_doubles_peak(self):
        base = dict(range_m=8.0, azimuth_rad=0.2, extent_m=1.0)
        h1 = render_radar(SceneLatent("cyclist", reflectivity=1.5, **base), NOISELESS)
        h2 = render_radar(SceneLatent("cyclist", reflectivity=3.0, **base), NOISELESS)
        assert math.isclose(h2.max(), 2.0 * h1.max(), rel_tol=1e-12)

    def test_noise_keeps_values_nonnegative(self):
        heat = render_radar(SceneLatent("empty"), CFG, rng_for(3, "n"))
        assert np.all(heat >= 0.0)
        assert heat.max() > 0.0


class TestRenderImage:
    def test_zero_azimuth_centers_patch_horizontally(self):
        scene = SceneLatent("pedestrian", range_m=5.0, azimuth_rad=0.0,
                            extent_m=0.5, reflectivity=0.7)
        img = render_image(scene, NOISELESS)
        col_mass = img.sum(axis=0)
        centroid = (col_mass * np.arange(CFG.image_width)).sum() / col_mass.sum()
        assert abs(centroid - (CFG.image_width - 1) / 2) < 1e-6

    def test_nearer_means_larger_patch(self):
        def footprint(range_m):
            scene = SceneLatent("car", range_m=range_m, azimuth_rad=0.0,
                                extent_m=2.0, reflectivity=4.0)
            img = render_image(scene, NOISELESS)
            return (img > 0.1).sum()

        assert footprint(4.0) > footprint(16.0)

    def test_empty_noiseless_is_all_zero(self):
        img = render_image(SceneLatent("empty"), NOISELESS)
        assert np.all(img == 0.0)

    def test_out_of_frame_projection_raises(self):
        narrow = SimulatorConfig(range_min=2.0, range_max=10.0,
                                 sigma_radar=0.0, sigma_image=0.0)
        scene = SceneLatent("car", range_m=1.0, azimuth_rad=0.0,
                            extent_m=2.0, reflectivity=4.0)  # nearer than range_min
        with pytest.raises(ResampleError):
            render_image(scene, narrow)

    def test_patch_shapes_differ_by_class(self):
        imgs = {}
        for cls in ("pedestrian", "cyclist", "car"):
            scene = SceneLatent(cls, range_m=6.0, azimuth_rad=0.0,
                                extent_m=sum(CLASS_TABLE[cls].extent) / 2,
                                reflectivity=1.0)
            imgs[cls] = render_image(scene, NOISELESS)
        ped, car = imgs["pedestrian"], imgs["car"]
        # pedestrian is tall (rows > cols), car is wide (cols > rows)
        assert (ped.sum(axis=1) > 0.1 * ped.max()).sum() > (ped.sum(axis=0) > 0.1 * ped.max()).sum()
        assert (car.sum(axis=0) > 0.1 * car.max()).sum() > (car.sum(axis=1) > 0.1 * car.max()).sum()


class TestCrossModalGeometry:
    def test_shared_latent_links_argmax_and_centroid(self):
        """Inverting the heatmap argmax geometry predicts the image patch
        position up to grid quantization, with noise off."""
        rng = rng_for(11, "geom")
        for _ in range(25):
            scene = sample_scene("car", rng, NOISELESS)
            heat = render_radar(scene, NOISELESS)
            img = render_image(scene, NOISELESS)
            ri, aj = np.unravel_index(heat.argmax(), heat.shape)
            d_range = (CFG.range_max - CFG.range_min) / CFG.range_bins
            d_az = 2 * CFG.azimuth_max / CFG.azimuth_bins
            cell_range = CFG.range_min + (ri + 0.5) * d_range
            cell_az = -CFG.azimuth_max + (aj + 0.5) * d_az
            decoded = SceneLatent("car", range_m=cell_range, azimuth_rad=cell_az,
                                  extent_m=scene.extent_m,
                                  reflectivity=scene.reflectivity)
            pred_row, pred_col = dg.project_to_image(decoded, NOISELESS)
            true_row, true_col = dg.project_to_image(scene, NOISELESS)
            # one radar cell maps to at most ~2 pixels of image displacement
            assert abs(pred_row - true_row) < 2.5
            assert abs(pred_col - true_col) < 2.5


class TestMakeDataset:
    def test_exact_balance_at_400(self):
        ds = make_dataset(CFG, 400, seed=5)
        counts = np.bincount(ds.labels, minlength=4)
        assert list(counts) == [100, 100, 100, 100]

    def test_balance_within_one_at_402(self):
        ds = make_dataset(CFG, 402, seed=5)
        counts = np.bincount(ds.labels, minlength=4)
        assert set(counts) <= {100, 101}

    def test_split_is_disjoint_and_covers(self):
        ds = make_dataset(CFG, 120, seed=6)
        union = np.sort(np.concatenate([ds.train_idx, ds.test_idx]))
        np.testing.assert_array_equal(union, np.arange(120))
        assert len(np.intersect1d(ds.train_idx, ds.test_idx)) == 0

    def test_split_balance_within_one(self):
        ds = make_dataset(CFG, 402, seed=7)
        for idx in (ds.train_idx, ds.test_idx):
            counts = np.bincount(ds.labels[idx], minlength=4)
            assert counts.max() - counts.min() <= 1

    def test_vision_and_contrastive_partition_train(self):
        ds = make_dataset(CFG, 200, seed=8)
        union = np.sort(np.concatenate([ds.vision_idx, ds.contrastive_idx]))
        np.testing.assert_array_equal(union, ds.train_idx)
        assert len(np.intersect1d(ds.vision_idx, ds.test_idx)) == 0

    def test_same_seed_identical_hash(self):
        a = make_dataset(CFG, 60, seed=9)
        b = make_dataset(CFG, 60, seed=9)
        assert a.content_hash() == b.content_hash()
        c = make_dataset(CFG, 60, seed=10)
        assert a.content_hash() != c.content_hash()

    def test_too_small_rejected(self):
        with pytest.raises(ConfigError):
            make_dataset(CFG, 4, seed=0)


class TestDatasetFile:
    def test_round_trip_preserves_everything(self, tmp_path):
        ds = make_dataset(CFG, 40, seed=12)
        path = tmp_path / "toy.xmcd"
        dg.save_dataset(path, ds)
        loaded = dg.load_dataset(path)
        assert loaded.content_hash() == ds.content_hash()

    def test_header_layout(self, tmp_path):
        ds = make_dataset(CFG, 16, seed=13)
        blob = dg.dataset_to_bytes(ds)
        assert blob[:4] == b"XMCD"
        import struct
        version, r, a, h, w, n = struct.unpack("<H5I", blob[4:26])
        assert (version, r, a, h, w, n) == (1, 32, 32, 32, 32, 16)

    def test_sidecar_is_json(self, tmp_path):
        ds = make_dataset(CFG, 16, seed=14)
        path = tmp_path / "toy.xmcd"
        dg.save_dataset(path, ds)
        sidecar = json.loads((tmp_path / "toy.splits.json").read_text())
        assert set(sidecar) == {"train", "test", "vision", "contrastive"}

    def test_bad_magic_rejected(self):
        from xmc.errors import FormatError
        with pytest.raises(FormatError):
            dg.dataset_from_bytes(b"NOPE" + b"\x00" * 30, "{}")
