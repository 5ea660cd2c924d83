"""Monte Carlo oracles for the closed-form divergences, bounds and covariances.

Two routes are provided. Gaussian-mixture estimates of I(g; C), of the
Bayes error and of the mixture entropy sample an :class:`EnsembleSpec`
directly. The physical chain draws material realisations, applies exact
Beer's law, bins and adds Poisson noise, which is independent of every
linearisation in the analytic model.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy.special import logsumexp

from .divergence import ObjectDistribution
from .errors import ConfigurationError, ParseError, SizeError
from .forward_model import DetectorModel, aggregate_attenuation, bin_counts, linearized_flux_covariance, mean_flux
from .info_bounds import EnsembleSpec, nats_to_bits, pe_bounds
from .material_model import MaterialStats, _element_list, _mass_attenuation_matrix, _realizations_from_uniforms
from .scenario_engine import ScenarioConfig, _variant_cov, build_scenario, path_of
from .spectral_data import ElementTable, MaterialDefinition, SourceSpectrum
from .structured import Block, dump_blocks

MAX_COMPONENTS = 8
MAX_DIMENSION = 8
CHUNK = 100_000
LN_2PI = np.log(2.0 * np.pi)


def _stream(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key)))


def _factors(ens: EnsembleSpec):
    chol = np.stack([np.linalg.cholesky(o.covs) for o in ens.objects])  # (K, N, M, M)
    eye = np.broadcast_to(np.eye(chol.shape[-1]), chol.shape)
    inv = np.linalg.solve(chol, eye)
    logdet = 2.0 * np.sum(np.log(np.diagonal(chol, axis1=-2, axis2=-1)), axis=(-1, -2))
    means = np.stack([o.means for o in ens.objects])
    return means, chol, inv, logdet


def _log_densities(x, means, inv, logdet):
    """``(n, K)`` log densities of samples ``x`` of shape ``(n, N, M)``."""
    k = means.shape[0]
    d = means.shape[1] * means.shape[2]
    out = np.empty((x.shape[0], k))
    for j in range(k):
        z = np.einsum("pab,npb->npa", inv[j], x - means[j])
        out[:, j] = -0.5 * np.sum(z * z, axis=(1, 2)) - 0.5 * logdet[j] - 0.5 * d * LN_2PI
    return out


@dataclass(frozen=True)
class MCEstimate:
    """Stratified Monte Carlo estimates (nats for information quantities)."""

    is_nats: float
    is_se: float
    pe: float
    pe_se: float
    entropy: float
    entropy_se: float
    n_samples: int

    @property
    def is_bits(self) -> float:
        return float(nats_to_bits(self.is_nats))

    @property
    def is_se_bits(self) -> float:
        return float(nats_to_bits(self.is_se))


def mc_ensemble(ens: EnsembleSpec, n_samples: int, seed: int = 0) -> MCEstimate:
    """Estimate I(g; C), the Bayes error and the mixture entropy by sampling.

    Samples are stratified by component: component ``k`` gets about
    ``a_k * n_samples`` draws from its own stream. The Bayes error uses
    ``E[min_c P(c | g)]``, which has lower variance than counting
    misclassified draws.
    """
    means, chol, inv, logdet = _factors(ens)
    log_a = np.log(ens.weights)
    cls = np.array([ens.classes.index(lab) for lab in ens.labels])
    log_prior = np.log(ens.priors)
    stats = {"is": [], "pe": [], "h": []}
    total = 0
    for k in range(ens.k):
        n_k = max(2, int(round(n_samples * ens.weights[k])))
        total += n_k
        sums = {key: [0.0, 0.0] for key in stats}
        for c0 in range(0, n_k, CHUNK):
            n = min(CHUNK, n_k - c0)
            rng = _stream(seed, k, c0 // CHUNK)
            z = rng.standard_normal((n,) + means.shape[1:])
            x = means[k] + np.einsum("pab,npb->npa", chol[k], z)
            lp = _log_densities(x, means, inv, logdet) + log_a  # ln a_j p_j(x)
            log_mix = logsumexp(lp, axis=1)
            log_joint = np.stack([logsumexp(lp[:, cls == c], axis=1) for c in range(2)], axis=1)
            log_cond = log_joint[:, cls[k]] - log_prior[cls[k]]
            post = np.exp(log_joint - log_mix[:, None])
            values = {"is": log_cond - log_mix, "pe": post.min(axis=1), "h": -log_mix}
            for key, v in values.items():
                sums[key][0] += v.sum()
                sums[key][1] += (v * v).sum()
        for key in stats:
            mean = sums[key][0] / n_k
            var = max(sums[key][1] / n_k - mean * mean, 0.0) * n_k / (n_k - 1)
            stats[key].append((mean, var, n_k))
    out = {}
    for key, rows in stats.items():
        mean = sum(a * m for a, (m, _, _) in zip(ens.weights, rows))
        se = np.sqrt(sum(a * a * v / n for a, (_, v, n) in zip(ens.weights, rows)))
        out[key] = (float(mean), float(se))
    return MCEstimate(*out["is"], *out["pe"], *out["h"], total)


def sample_two_stage(jd0, sigma_jd, n_samples: int, seed: int = 0) -> np.ndarray:
    """Counts from ``J_d ~ N(jd0, sigma_jd)`` truncated to positive values, then Poisson."""
    jd0 = np.asarray(jd0, dtype=float)
    w, v = np.linalg.eigh(np.asarray(sigma_jd, dtype=float))
    root = v * np.sqrt(np.clip(w, 0.0, None))
    rng = _stream(seed, 0x25)
    rate = jd0 + rng.standard_normal((n_samples, jd0.size)) @ root.T
    bad = np.any(rate <= 0, axis=1)
    while np.any(bad):
        rate[bad] = jd0 + rng.standard_normal((int(bad.sum()), jd0.size)) @ root.T
        bad = np.any(rate <= 0, axis=1)
    return rng.poisson(rate).astype(float)


def two_stage_covariance(jd0, sigma_jd, n_samples: int, seed: int = 0):
    """Sample mean and covariance of :func:`sample_two_stage` draws."""
    g = sample_two_stage(jd0, sigma_jd, n_samples, seed)
    return g.mean(axis=0), np.atleast_2d(np.cov(g, rowvar=False, ddof=1))


Geometry = Sequence[Sequence[tuple[str, float]]]


@dataclass
class ValidationProblem:
    """A small ensemble described both physically and by its Gaussian model."""

    geometries: Sequence[Geometry]
    labels: Sequence[str]
    weights: np.ndarray
    definitions: Mapping[str, MaterialDefinition]
    elements: Mapping[str, ElementTable]
    stats: Mapping[str, MaterialStats]
    spectrum: SourceSpectrum
    detector: DetectorModel
    pairs: Sequence[tuple[int, int]] | None = None

    def __post_init__(self):
        k = len(self.geometries)
        n = len(self.geometries[0]) if k else 0
        if k > MAX_COMPONENTS or n * self.detector.n_bins > MAX_DIMENSION:
            raise SizeError(f"validation instance too large: K={k}, N*M={n * self.detector.n_bins} "
                            f"(limits {MAX_COMPONENTS}, {MAX_DIMENSION})")
        self.weights = np.asarray(self.weights, dtype=float)

    def analytic_pixels(self):
        out = []
        for geometry in self.geometries:
            row = []
            for items in geometry:
                att = aggregate_attenuation(path_of(items, self.stats), self.spectrum.grid)
                j0 = mean_flux(self.spectrum, att.tau0)
                px = bin_counts(self.detector, j0, linearized_flux_covariance(j0, att.sigma_tau),
                                self.spectrum.exposure_time)
                row.append(px.with_total(_variant_cov(px.jd0, px.sigma_material, "combined")))
            out.append(row)
        return out

    def analytic_ensemble(self) -> EnsembleSpec:
        objects = [ObjectDistribution.from_pixels(row) for row in self.analytic_pixels()]
        return EnsembleSpec(objects, self.weights, self.labels, self.pairs)

    def sample_chain(self, index: int, n_samples: int, seed: int) -> np.ndarray:
        """Counts ``(n, N, M)`` for object ``index`` from the physical chain."""
        source = self.spectrum
        grid = source.grid
        geometry = self.geometries[index]
        out = np.empty((n_samples, len(geometry), self.detector.n_bins))
        for p, items in enumerate(geometry):
            for c0 in range(0, n_samples, CHUNK):
                n = min(CHUNK, n_samples - c0)
                rng = _stream(seed, 0xC4, index, p, c0 // CHUNK)
                tau = np.zeros((n, grid.size))
                for name, length in items:
                    d = self.definitions[name]
                    massatt = _mass_attenuation_matrix(_element_list(d, self.elements), grid)
                    rho, w = _realizations_from_uniforms(d, rng.random((n, 1 + len(d.components))))
                    tau += length * rho[:, None] * (w @ massatt)
                j = (source.n0 / source.exposure_time) * source.s * np.exp(-tau)
                rate = source.exposure_time * j @ self.detector.response.T
                out[c0:c0 + n, p] = rng.poisson(rate)
        return out


@dataclass(frozen=True)
class OracleCheck:
    name: str
    passed: bool
    value: float
    low: float
    high: float
    stderr: float = 0.0

    def to_block(self) -> Block:
        return Block("check", {"name": self.name, "passed": "true" if self.passed else "false",
                               "value": float(self.value), "low": float(self.low),
                               "high": float(self.high), "stderr": float(self.stderr)})


@dataclass
class OracleReport:
    seed: int
    n_samples: int
    checks: list[OracleCheck] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    @property
    def failures(self) -> list[OracleCheck]:
        return [c for c in self.checks if not c.passed]

    def to_text(self) -> str:
        head = Block("oracle_report", {"seed": int(self.seed), "n_samples": int(self.n_samples),
                                       "passed": "true" if self.passed else "false",
                                       "n_checks": len(self.checks), "n_failed": len(self.failures)},
                     [c.to_block() for c in self.checks])
        return dump_blocks([head])


MEAN_TOL = 0.01
COV_TOL = 0.03
SIGMA_BAND = 3.0
ROUNDING_SLACK = 1e-12


def _interval_check(name, value, se, low, high) -> OracleCheck:
    slack = SIGMA_BAND * se + ROUNDING_SLACK
    ok = low - slack <= value <= high + slack
    return OracleCheck(name, bool(ok), value, low, high, se)


def mc_validate(problem: ValidationProblem, n_samples: int, seed: int = 0) -> OracleReport:
    """Check the analytic model of ``problem`` against the physical chain.

    Per object and pixel: mean counts within 1 % and the combined covariance
    within 3 % (relative Frobenius). I(g; C) and the Bayes error are then
    estimated on Gaussians fitted to the chain samples and must fall inside
    the analytic bounds, widened by three standard errors.
    """
    report = OracleReport(seed, n_samples)
    analytic = problem.analytic_pixels()
    fitted = []
    for k, row in enumerate(analytic):
        g = problem.sample_chain(k, n_samples, seed)
        means, covs = [], []
        for p, px in enumerate(row):
            m = g[:, p].mean(axis=0)
            c = np.atleast_2d(np.cov(g[:, p], rowvar=False, ddof=1))
            means.append(m)
            covs.append(c)
            mean_err = float(np.max(np.abs(m - px.mean) / px.mean))
            cov_err = float(np.linalg.norm(c - px.cov) / np.linalg.norm(px.cov))
            report.checks.append(OracleCheck(f"mean[object={k},pixel={p}]", mean_err <= MEAN_TOL,
                                             mean_err, 0.0, MEAN_TOL))
            report.checks.append(OracleCheck(f"covariance[object={k},pixel={p}]", cov_err <= COV_TOL,
                                             cov_err, 0.0, COV_TOL))
        fitted.append(ObjectDistribution(np.array(means), np.array(covs)))

    bounds = pe_bounds(problem.analytic_ensemble())
    ens_fit = EnsembleSpec(fitted, problem.weights, problem.labels, problem.pairs)
    est = mc_ensemble(ens_fit, n_samples, seed)
    report.checks.append(_interval_check("mutual_information_bits", est.is_bits, est.is_se_bits,
                                         bounds.is_lower_bits, bounds.is_upper_bits))
    report.checks.append(_interval_check("bayes_error", est.pe, est.pe_se, bounds.pe_lower, bounds.pe_upper))
    return report


@dataclass(frozen=True)
class ValidationConfig:
    n0: float = 1e5
    n_bins: int = 1
    n_samples: int = 200_000

    def __post_init__(self):
        if self.n0 <= 0 or self.n_bins < 1 or self.n_samples < 2:
            raise ConfigurationError("validation needs n0 > 0, n_bins >= 1 and n_samples >= 2")

    @classmethod
    def from_block(cls, block: Block, path=None) -> "ValidationConfig":
        unknown = set(block.fields) - {"n0", "n_bins", "n_samples"}
        if unknown:
            raise ParseError(f"unknown validate keys {sorted(unknown)}", path, block.line)
        return cls(**block.fields)


def validation_problem(cfg: ScenarioConfig, vcfg: ValidationConfig, library: Sequence[MaterialDefinition],
                       elements: Mapping[str, ElementTable], stats: Mapping[str, MaterialStats],
                       spectrum: SourceSpectrum) -> ValidationProblem:
    """Bag pairs of ``cfg`` at budget ``vcfg.n0`` with count-balanced bins."""
    scenario = build_scenario(cfg, library, stats, spectrum)
    geometries = [g for pair in scenario.pairs for g in (pair.threat, pair.non_threat)]
    return ValidationProblem(geometries, scenario.labels, scenario.weights,
                             {d.name: d for d in library}, elements, stats,
                             spectrum.with_budget(vcfg.n0), scenario.detector(vcfg.n_bins),
                             scenario.index_pairs)
