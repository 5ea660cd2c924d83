from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from xtsi.errors import AlignmentError, ParameterError, ValidationError
from xtsi.material_model import (
    MaterialStats,
    _realizations_from_uniforms,
    attenuation_of_realization,
    check_psd,
    estimate_material_stats,
    load_material_stats,
    psd_repair,
    sample_composition,
    save_material_stats,
)
from xtsi.spectral_data import Component, ElementTable, EnergyGrid, MaterialDefinition

GOLDEN = Path(__file__).parent / "fixtures" / "golden_stats"


def mat(components, rho=1.0, rho_std=0.0, name="m", cls="non_threat"):
    return MaterialDefinition(name, cls, rho, rho_std, tuple(Component(*c) for c in components))


class TestSampleComposition:
    def test_zero_std_returns_nominal_exactly(self):
        d = mat([("C", 0.3), ("H", 0.2), ("O", 0.5)], rho=1.23)
        rho, w = sample_composition(d, 5)
        assert rho == 1.23
        np.testing.assert_array_equal(w, [0.3, 0.2, 0.5])

    def test_fixed_seed_is_repeatable(self):
        d = mat([("C", 0.4, 0.05), ("H", 0.6, 0.05)], rho_std=0.1)
        a, b = sample_composition(d, 11), sample_composition(d, 11)
        assert a[0] == b[0] and np.array_equal(a[1], b[1])
        assert sample_composition(d, 12)[0] != a[0]

    @given(st.integers(0, 2**32 - 1))
    def test_samples_are_valid_simplex_points(self, seed):
        d = mat([("C", 0.05, 0.2), ("H", 0.9, 0.3), ("O", 0.05, 0.2)], rho=0.1, rho_std=1.0)
        rho, w = sample_composition(d, seed)
        assert rho > 0
        assert np.all(w >= 0) and w.sum() == pytest.approx(1.0, abs=1e-12)

    def test_symmetric_stds_preserve_mean(self):
        d = mat([("C", 0.5, 0.05), ("H", 0.5, 0.05)])
        u = np.random.default_rng(0).random((100_000, 3))
        _, w = _realizations_from_uniforms(d, u)
        se = w[:, 0].std(ddof=1) / np.sqrt(len(w))
        assert abs(w[:, 0].mean() - 0.5) < 3 * se

    def test_scalar_and_batched_paths_agree(self):
        d = mat([("C", 0.5, 0.05), ("H", 0.5, 0.05)], rho_std=0.05)
        rho, w = sample_composition(d, 7)
        u = np.random.default_rng(7).random(3)[None, :]
        rho_b, w_b = _realizations_from_uniforms(d, u)
        assert rho == rho_b[0]
        np.testing.assert_array_equal(w, w_b[0])


@pytest.fixture
def toy_elements():
    g = EnergyGrid.uniform(30, 160, 12)
    e = g.energies
    return g, [
        ElementTable("A", g, 3.0 * (e / 30) ** -2.8 + 0.18, 2.0),
        ElementTable("B", g, 0.9 * (e / 30) ** -3.1 + 0.15, 2.0),
        ElementTable("C", g, 0.2 * (e / 30) ** -2.9 + 0.20, 0.8),
    ]


class TestAttenuation:
    def test_single_element_at_own_density(self, toy_elements):
        g, (a, _, _) = toy_elements
        mu = attenuation_of_realization(a.density, [1.0], [a], g)
        np.testing.assert_allclose(mu, a.linear_attenuation, rtol=1e-15)

    def test_half_half_mixture_is_mean(self, toy_elements):
        g, (a, b, _) = toy_elements
        rho = 1.5
        mu = attenuation_of_realization(rho, [0.5, 0.5], [a, b], g)
        expected = 0.5 * (a.linear_attenuation + b.linear_attenuation) * rho / a.density
        np.testing.assert_allclose(mu, expected, rtol=1e-14)

    def test_three_components_against_loop(self, toy_elements):
        g, tables = toy_elements
        rho, w = 1.37, [0.2, 0.5, 0.3]
        mu = attenuation_of_realization(rho, w, tables, g)
        for k in range(g.size):
            ref = 0.0
            for wc, t in zip(w, tables):
                rho_c = t.density
                mu_c = t.linear_attenuation[k]
                ref += wc / rho_c * mu_c
            assert mu[k] == pytest.approx(rho * ref, rel=1e-13)

    def test_misaligned_weights(self, toy_elements):
        g, tables = toy_elements
        with pytest.raises(AlignmentError):
            attenuation_of_realization(1.0, [0.5, 0.5], tables, g)

    def test_table_on_other_grid(self, toy_elements):
        g, tables = toy_elements
        with pytest.raises(AlignmentError):
            attenuation_of_realization(1.0, [1.0], tables[:1], EnergyGrid.uniform(30, 160, 13))


class TestEstimateStats:
    def _elements(self, toy_elements):
        g, tables = toy_elements
        return g, {t.symbol: t for t in tables}

    def test_zero_variance_material(self, toy_elements):
        g, els = self._elements(toy_elements)
        d = mat([("A", 0.3), ("B", 0.7)], rho=1.1)
        s = estimate_material_stats(d, els, g, 50, 0)
        np.testing.assert_array_equal(s.sigma_mu, 0.0)
        expected = 1.1 * (0.3 * els["A"].mass_attenuation + 0.7 * els["B"].mass_attenuation)
        np.testing.assert_allclose(s.mu0, expected, rtol=1e-15)

    def test_too_few_realizations(self, toy_elements):
        g, els = self._elements(toy_elements)
        with pytest.raises(ParameterError):
            estimate_material_stats(mat([("A", 1.0)]), els, g, 1)

    def test_unknown_element(self, toy_elements):
        g, els = self._elements(toy_elements)
        with pytest.raises(AlignmentError):
            estimate_material_stats(mat([("Zz", 1.0)]), els, g, 10)

    def test_thread_count_does_not_change_result(self, toy_elements):
        g, els = self._elements(toy_elements)
        d = mat([("A", 0.4, 0.03), ("B", 0.6, 0.03)], rho_std=0.05)
        one = estimate_material_stats(d, els, g, 300, 9, threads=1)
        four = estimate_material_stats(d, els, g, 300, 9, threads=4)
        np.testing.assert_array_equal(one.mu0, four.mu0)
        np.testing.assert_array_equal(one.sigma_mu, four.sigma_mu)

    def test_pure_density_variation_converges_to_rank_one(self, toy_elements):
        g, els = self._elements(toy_elements)
        rho0, sd = 1.0, 0.02
        d = mat([("A", 0.5), ("C", 0.5)], rho=rho0, rho_std=sd)
        limit_mu0 = rho0 * (0.5 * els["A"].mass_attenuation + 0.5 * els["C"].mass_attenuation)
        limit = (sd / rho0) ** 2 * np.outer(limit_mu0, limit_mu0)
        errs = {}
        for n in (250, 4000):
            errs[n] = np.mean([np.linalg.norm(estimate_material_stats(d, els, g, n, seed).sigma_mu - limit)
                               for seed in range(8)]) / np.linalg.norm(limit)
        # 16x the samples: error should drop by about 4x
        assert errs[4000] < errs[250] / 2.5
        s = estimate_material_stats(d, els, g, 4000, 0)
        sd_vec = np.sqrt(np.diag(s.sigma_mu))
        corr = s.sigma_mu / np.outer(sd_vec, sd_vec)
        assert corr.min() > 1 - 1e-10

    def test_two_batches_agree_with_double_batch(self, toy_elements):
        g, els = self._elements(toy_elements)
        d = mat([("A", 0.4, 0.04), ("B", 0.4, 0.04), ("C", 0.2, 0.02)], rho_std=0.05)
        big = estimate_material_stats(d, els, g, 4000, 1).sigma_mu
        half = 0.5 * (estimate_material_stats(d, els, g, 2000, 2).sigma_mu
                      + estimate_material_stats(d, els, g, 2000, 3).sigma_mu)
        rel = np.linalg.norm(big - half) / np.linalg.norm(big)
        # relative sampling error of a covariance ~ sqrt(2/n) per estimate
        assert rel < 4 * np.sqrt(2 / 4000 + 2 / 4000)

    def test_golden_regression(self, library, elements, grid):
        d = {m.name: m for m in library}["ammonium_nitrate"]
        s = estimate_material_stats(d, elements, grid, 1000, 0)
        golden = load_material_stats(GOLDEN, "ammonium_nitrate")
        np.testing.assert_allclose(s.mu0, golden.mu0, rtol=1e-12)
        np.testing.assert_allclose(s.sigma_mu, golden.sigma_mu, rtol=1e-9,
                                   atol=1e-12 * np.abs(golden.sigma_mu).max())


class TestPsd:
    @settings(deadline=None)
    @given(st.integers(2, 6), st.integers(0, 10**6))
    def test_repair_gives_symmetric_psd(self, n, seed):
        a = np.random.default_rng(seed).normal(size=(n, n))
        fixed = psd_repair(a)
        np.testing.assert_array_equal(fixed, fixed.T)
        check_psd(fixed, "repaired")

    def test_zero_stays_zero(self):
        np.testing.assert_array_equal(psd_repair(np.zeros((3, 3))), 0.0)

    def test_psd_input_unchanged(self):
        a = np.array([[2.0, 0.5], [0.5, 1.0]])
        np.testing.assert_allclose(psd_repair(a), a, rtol=1e-14)

    def test_indefinite_rejected_by_stats(self, toy_elements):
        g, _ = toy_elements
        bad = -np.eye(g.size)
        with pytest.raises(ValidationError):
            MaterialStats("x", "threat", g, np.ones(g.size), bad, 2)


def test_stats_round_trip(tmp_path, library_stats):
    s = library_stats["tnt_flake"]
    save_material_stats(s, tmp_path)
    again = load_material_stats(tmp_path, "tnt_flake")
    assert again.name == s.name and again.class_label == s.class_label
    assert again.n_realizations == 1000 and again.grid == s.grid
    np.testing.assert_array_equal(again.mu0, s.mu0)
    np.testing.assert_array_equal(again.sigma_mu, s.sigma_mu)


def test_sample_draws_match_stats(library_stats):
    s = library_stats["peroxide_50"]
    draws = s.sample(np.random.default_rng(0), 20000)
    rel = np.linalg.norm(np.cov(draws, rowvar=False) - s.sigma_mu) / np.linalg.norm(s.sigma_mu)
    assert rel < 0.05
