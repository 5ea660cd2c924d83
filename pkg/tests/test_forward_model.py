from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from xtsi.errors import AlignmentError, DegenerateBinError, ValidationError
from xtsi.forward_model import (
    LINEARIZATION_THRESHOLD,
    DetectorModel,
    PathSpec,
    PixelDistribution,
    aggregate_attenuation,
    bin_counts,
    combine_shot_noise,
    decorrelate,
    exact_poisson_alt_error,
    exact_poisson_gaussian_error,
    ideal_detector,
    interval_weights,
    linearization_ok,
    linearized_flux_covariance,
    load_pixel_distribution,
    mean_flux,
    pixel_distribution,
    poisson_alt_gaussian_error,
    poisson_gaussian_error,
    remainder_bound,
    save_pixel_distribution,
)
from xtsi.material_model import MaterialStats
from xtsi.oracles import two_stage_covariance
from xtsi.spectral_data import EnergyGrid, SourceSpectrum, normalize_density

FIXTURES = Path(__file__).parent / "fixtures"


def rel_frob(a, b):
    return np.linalg.norm(a - b) / np.linalg.norm(b)


def random_stats(grid, rng, name, scale=0.05):
    a = rng.normal(size=(grid.size, 3)) * scale
    return MaterialStats(name, "threat", grid, rng.uniform(0.1, 0.5, grid.size), a @ a.T, 100)


class TestAttenuation:
    def test_empty_path_is_vacuum(self, grid):
        att = aggregate_attenuation(PathSpec(), grid)
        assert not att.tau0.any() and not att.sigma_tau.any()

    def test_empty_path_needs_grid(self):
        with pytest.raises(AlignmentError):
            aggregate_attenuation(PathSpec())

    def test_single_item_scaling(self, library_stats):
        s = library_stats["milk"]
        att = aggregate_attenuation(PathSpec(((s, 2.0),)))
        np.testing.assert_allclose(att.tau0, 2 * s.mu0, rtol=1e-15)
        np.testing.assert_allclose(att.sigma_tau, 4 * s.sigma_mu, rtol=1e-15)

    def test_grid_mismatch(self, rng):
        g1, g2 = EnergyGrid.uniform(30, 160, 5), EnergyGrid.uniform(30, 160, 6)
        path = PathSpec(((random_stats(g1, rng, "a"), 1.0), (random_stats(g2, rng, "b"), 1.0)))
        with pytest.raises(AlignmentError):
            aggregate_attenuation(path)

    def test_non_positive_length(self, rng):
        with pytest.raises(ValidationError):
            PathSpec(((random_stats(EnergyGrid.uniform(30, 160, 4), rng, "a"), 0.0),))

    def test_two_items_against_monte_carlo(self, rng):
        g = EnergyGrid.uniform(30, 160, 6)
        a, b = random_stats(g, rng, "a"), random_stats(g, rng, "b")
        la, lb = 1.5, 4.0
        att = aggregate_attenuation(PathSpec(((a, la), (b, lb))))
        n = 200_000
        tau = la * a.sample(rng, n) + lb * b.sample(rng, n)
        np.testing.assert_allclose(tau.mean(axis=0), att.tau0, rtol=5e-3)
        assert rel_frob(np.cov(tau, rowvar=False), att.sigma_tau) < 0.02


class TestFlux:
    def test_unattenuated(self, spectrum):
        src = spectrum.with_budget(1e5)
        np.testing.assert_allclose(mean_flux(src, np.zeros(src.grid.size)), 1e5 * src.s)

    def test_ln2_halves(self, spectrum):
        src = spectrum.with_budget(7.0)
        half = mean_flux(src, np.full(src.grid.size, np.log(2.0)))
        np.testing.assert_allclose(half, 3.5 * src.s, rtol=1e-15)

    def test_exposure_time_divides(self, grid):
        s = normalize_density(grid, np.ones(grid.size))
        src = SourceSpectrum(grid, s, 10.0, 2.0)
        np.testing.assert_allclose(mean_flux(src, np.zeros(grid.size)), 5.0 * s)

    def test_golden_vector(self, spectrum, library_stats):
        src = spectrum.with_budget(1e6)
        att = aggregate_attenuation(PathSpec(((library_stats["water"], 5.0), (library_stats["tnt_flake"], 3.0))))
        golden = np.loadtxt(FIXTURES / "golden_mean_flux.csv", delimiter=",", skiprows=2)
        np.testing.assert_allclose(src.grid.energies, golden[:, 0])
        np.testing.assert_allclose(mean_flux(src, att.tau0), golden[:, 1], rtol=1e-12)

    def test_zero_sigma_tau(self):
        np.testing.assert_array_equal(linearized_flux_covariance(np.ones(3), np.zeros((3, 3))), 0.0)

    def test_scalar_case(self):
        assert linearized_flux_covariance([5.0], [[0.01]])[0, 0] == pytest.approx(0.25)

    def test_two_samples_against_exact_exponential(self, rng):
        j0 = np.array([120.0, 80.0])
        sigma_tau = np.array([[0.0009, 0.0006], [0.0006, 0.0010]])  # |dtau| up to ~0.1 at 3 sigma
        dtau = rng.multivariate_normal(np.zeros(2), sigma_tau, size=400_000)
        flux = j0 * np.exp(-dtau)
        assert rel_frob(np.cov(flux, rowvar=False), linearized_flux_covariance(j0, sigma_tau)) < 0.03

    @settings(deadline=None, max_examples=25)
    @given(st.integers(2, 8), st.integers(0, 10**6))
    def test_flux_covariance_is_psd(self, r, seed):
        rng = np.random.default_rng(seed)
        a = rng.normal(size=(r, r))
        sig = linearized_flux_covariance(rng.uniform(0.1, 10, r), a @ a.T)
        assert np.linalg.eigvalsh(sig).min() > -1e-10 * np.abs(sig).max()


class TestRemainder:
    def test_zero(self):
        assert remainder_bound(1.0, 0.0) == 0.0

    def test_threshold(self):
        bound = remainder_bound(1.0, 0.39)
        assert bound == pytest.approx(0.39 ** 3 / 6, abs=1e-15)
        assert bound < 0.01
        assert linearization_ok(0.39) and not linearization_ok(0.40)
        assert LINEARIZATION_THRESHOLD == pytest.approx(0.3915, abs=1e-4)

    def test_direct_formula(self):
        assert remainder_bound(100.0, 0.1) == pytest.approx(0.016667, abs=1e-6)

    @given(st.floats(-0.8, 0.8))
    def test_bounds_actual_remainder(self, d):
        actual = abs(np.exp(-d) - (1 - d))
        # Lagrange remainder e^{-xi} d^2/2 <= bound with the second-order term kept
        assert abs(np.exp(-d) - (1 - d + d * d / 2)) <= remainder_bound(1.0, d) * np.exp(abs(d)) + 1e-15
        assert actual >= 0


class TestDetector:
    def test_interval_weights_exact_for_linear(self):
        e = np.array([30.0, 41.0, 55.0, 90.0, 160.0])
        f = 3.0 - 0.01 * e
        w = interval_weights(e, 47.5, 101.0)
        exact = (3.0 * 101.0 - 0.005 * 101.0 ** 2) - (3.0 * 47.5 - 0.005 * 47.5 ** 2)
        assert w @ f == pytest.approx(exact, rel=1e-13)

    def test_bins_partition_the_trapezoid_weights(self, grid):
        det = ideal_detector(grid, [30.0, 62.3, 95.0, 160.0])
        np.testing.assert_allclose(det.response.sum(axis=0), grid.quadrature_weights(), rtol=1e-12, atol=1e-15)

    def test_bad_edges(self, grid):
        with pytest.raises(ValidationError):
            ideal_detector(grid, [30.0, 30.0, 160.0])
        with pytest.raises(ValidationError):
            ideal_detector(grid, [20.0, 160.0])

    def test_custom_response_shape(self, grid):
        with pytest.raises(AlignmentError):
            DetectorModel(grid, [30.0, 160.0], np.ones((2, grid.size)))


class TestBinning:
    def test_one_bin_flat_flux(self, grid):
        det = ideal_detector(grid, [30.0, 160.0])
        px = bin_counts(det, np.full(grid.size, 4.0), np.zeros((grid.size, grid.size)), exposure_time=2.0)
        assert px.jd0[0] == pytest.approx(2.0 * 4.0 * 130.0)

    def test_single_sample_rows(self, rng):
        g = EnergyGrid.uniform(30, 160, 5)
        resp = np.zeros((2, 5))
        resp[0, 1] = resp[1, 3] = 1.0
        det = DetectorModel(g, [30.0, 90.0, 160.0], resp)
        a = rng.normal(size=(5, 5))
        sigma_j = a @ a.T
        px = bin_counts(det, np.ones(5), sigma_j, exposure_time=3.0)
        np.testing.assert_allclose(px.sigma_material, 9.0 * sigma_j[np.ix_([1, 3], [1, 3])])

    def test_bin_without_flux(self, grid):
        det = ideal_detector(grid, [30.0, 100.0, 160.0])
        j0 = np.where(grid.energies < 95, 1.0, 0.0)  # interpolant vanishes above the last lit node
        with pytest.raises(DegenerateBinError):
            bin_counts(det, j0, np.zeros((grid.size, grid.size)))

    def test_three_bins_against_monte_carlo(self, rng, spectrum, library_stats):
        src = spectrum.with_budget(1e6)
        path = PathSpec(((library_stats["ammonium_nitrate"], 4.0), (library_stats["milk"], 6.0)))
        att = aggregate_attenuation(path)
        j0 = mean_flux(src, att.tau0)
        det = ideal_detector(src.grid, [30.0, 60.0, 90.0, 160.0])
        px = bin_counts(det, j0, linearized_flux_covariance(j0, att.sigma_tau))
        w, v = np.linalg.eigh(att.sigma_tau)
        root = v * np.sqrt(np.clip(w, 0, None))
        tau = att.tau0 + rng.standard_normal((100_000, src.grid.size)) @ root.T
        counts = (src.n0 * src.s * np.exp(-tau)) @ det.response.T
        np.testing.assert_allclose(counts.mean(axis=0), px.jd0, rtol=0.03)
        assert rel_frob(np.cov(counts, rowvar=False), px.sigma_material) < 0.03


class TestShotNoise:
    def test_pure_shot_noise(self):
        px = combine_shot_noise([50.0, 20.0], np.zeros((2, 2)))
        np.testing.assert_array_equal(px.sigma_total, np.diag([50.0, 20.0]))
        assert not px.low_count

    def test_low_count_flag_is_not_an_error(self):
        assert combine_shot_noise([5.0, 500.0], np.zeros((2, 2))).low_count

    def test_non_positive_mean(self):
        with pytest.raises(DegenerateBinError):
            combine_shot_noise([0.0], [[0.0]])

    @pytest.mark.parametrize("seed", range(3))
    def test_two_stage_monte_carlo(self, seed):
        rng = np.random.default_rng(seed)
        jd0 = rng.uniform(1000, 5000, 3)
        a = rng.normal(size=(3, 3)) * 20
        sigma = a @ a.T
        mean, cov = two_stage_covariance(jd0, sigma, 200_000, seed)
        assert rel_frob(cov, combine_shot_noise(jd0, sigma).sigma_total) < 0.03
        se = np.sqrt(np.diag(sigma) + jd0) / np.sqrt(200_000)
        assert np.all(np.abs(mean - jd0) < 4 * se)

    def test_longer_exposure_lets_material_dominate(self, spectrum, library_stats):
        path = PathSpec(((library_stats["sugar_syrup"], 8.0),))
        det = ideal_detector(spectrum.grid, [30.0, 70.0, 160.0])
        px = {}
        for t in (1.0, 2.0):
            src = SourceSpectrum(spectrum.grid, spectrum.s, 1e6 * t, t)  # same flux, longer exposure
            px[t] = pixel_distribution(path, src, det)
        np.testing.assert_allclose(px[2.0].jd0, 2 * px[1.0].jd0, rtol=1e-14)
        np.testing.assert_allclose(px[2.0].sigma_material, 4 * px[1.0].sigma_material, rtol=1e-13)
        shot = lambda p: np.trace(p.sigma_total - p.sigma_material)
        ratio = lambda p: np.trace(p.sigma_material) / shot(p)
        assert shot(px[2.0]) == pytest.approx(2 * shot(px[1.0]))
        assert ratio(px[2.0]) == pytest.approx(2 * ratio(px[1.0]))


class TestPixelDistribution:
    def test_nonlinear_flag(self, spectrum, rng):
        g = spectrum.grid
        wide = MaterialStats("wild", "threat", g, np.full(g.size, 0.2), np.full((g.size, g.size), 0.04), 10)
        det = ideal_detector(g, [30.0, 160.0])
        assert pixel_distribution(PathSpec(((wide, 2.0),)), spectrum.with_budget(1e6), det).nonlinear
        assert not pixel_distribution(PathSpec(((wide, 0.5),)), spectrum.with_budget(1e6), det).nonlinear

    def test_uncorrelated_path_uses_diagonal(self, spectrum, library_stats):
        path = PathSpec(((library_stats["toothpaste"], 3.0),))
        det = ideal_detector(spectrum.grid, [30.0, 160.0])
        src = spectrum.with_budget(1e6)
        corr = pixel_distribution(path, src, det)
        unc = pixel_distribution(path, src, det, correlated=False)
        att = aggregate_attenuation(path)
        sj = linearized_flux_covariance(mean_flux(src, att.tau0), att.sigma_tau)
        d = det.response[0]
        assert corr.sigma_material[0, 0] == pytest.approx(d @ sj @ d, rel=1e-12)
        assert unc.sigma_material[0, 0] == pytest.approx(d ** 2 @ np.diag(sj), rel=1e-12)

    def test_csv_round_trip(self, tmp_path):
        px = PixelDistribution([1e4, 2e4], [[4.0, 1.0], [1.0, 9.0]], [[1e4 + 4, 1.0], [1.0, 2e4 + 9]],
                               low_count=False, nonlinear=True)
        save_pixel_distribution(px, tmp_path / "p.csv")
        again = load_pixel_distribution(tmp_path / "p.csv")
        np.testing.assert_array_equal(again.jd0, px.jd0)
        np.testing.assert_array_equal(again.sigma_total, px.sigma_total)
        np.testing.assert_array_equal(again.sigma_material, px.sigma_material)
        assert again.nonlinear and not again.low_count

    def test_decorrelate(self):
        d = np.diag([1.0, 2.0])
        np.testing.assert_array_equal(decorrelate(d), d)
        np.testing.assert_array_equal(decorrelate([[1.0, 0.3], [0.3, 2.0]]), d)
        with pytest.raises(AlignmentError):
            decorrelate(np.ones(3))


class TestPoissonGaussian:
    def test_zero_at_mean(self):
        assert poisson_gaussian_error(100.0, 100.0) == 0.0

    def test_one_sigma_points(self):
        lead = poisson_gaussian_error(100.0, 110.0)
        assert abs(lead) == pytest.approx(1 / 30, rel=1e-12)
        for x in (90.0, 110.0):
            exact = exact_poisson_gaussian_error(100.0, x)
            assert abs(exact) <= 0.034
            assert abs(exact - poisson_gaussian_error(100.0, x)) < 0.01

    def test_alternative_form(self):
        for x in (90.0, 110.0):
            exact = exact_poisson_alt_error(100.0, x)
            assert abs(exact) < 0.037
            assert abs(exact - poisson_alt_gaussian_error(100.0, x)) < 0.01

    def test_exact_error_against_scipy(self):
        from scipy.stats import norm, poisson
        lam, x = 100.0, 93.0
        ref = (poisson.pmf(x, lam) - norm.pdf(x, lam, np.sqrt(lam))) / poisson.pmf(x, lam)
        assert exact_poisson_gaussian_error(lam, x) == pytest.approx(ref, rel=1e-9)

    def test_leading_order_improves_with_lambda(self):
        gaps = [abs(exact_poisson_gaussian_error(lam, lam + np.sqrt(lam)) -
                    poisson_gaussian_error(lam, lam + np.sqrt(lam))) for lam in (100.0, 1e4)]
        assert gaps[1] < gaps[0] / 5

    def test_rejects_non_positive_lambda(self):
        with pytest.raises(ValueError):
            poisson_gaussian_error(0.0, 1.0)
