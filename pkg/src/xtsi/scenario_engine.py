"""Parallel-beam scanner study: bag pairs, count-balanced bins and photon-budget sweeps.

A scanner with ``n_pixels`` pencil beams looks at objects made of one vial
per beam. Each vial stacks ``items_per_vial`` single-material items of equal
length. Objects come in bag pairs that share geometry and differ in exactly
one item, which holds a threat material in one member of the pair and a
non-threat material in the other.

Per-pixel moments are computed once at unit photon budget. Mean counts
scale linearly with ``N0`` and the material covariance quadratically, so
each sweep point only rescales cached arrays before the divergence work.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .divergence import ObjectDistribution
from .errors import ConfigurationError, DegenerateCovarianceError, ParseError, XtsiError
from .forward_model import (
    LINEARIZATION_THRESHOLD,
    PathSpec,
    PixelDistribution,
    aggregate_attenuation,
    bin_counts,
    decorrelate,
    ideal_detector,
    linearized_flux_covariance,
    mean_flux,
)
from .info_bounds import BoundsResult, EnsembleSpec, pe_bounds
from .material_model import MaterialStats
from .spectral_data import NON_THREAT, THREAT, MaterialDefinition, SourceSpectrum
from .structured import Block, parse_file

log = logging.getLogger(__name__)

VARIANTS = ("shot_only", "material_only", "combined")
CORR_MODES = ("correlated", "uncorrelated")
MATERIAL_ONLY_JITTER = 1e-9
VOLUME_FLOOR = 1e-12


@dataclass(frozen=True)
class ScenarioConfig:
    n_pixels: int = 10
    vial_length_min: float = 0.5
    vial_length_max: float = 20.0
    items_per_vial: int = 4
    n_bag_pairs: int = 160
    bins: tuple[int, ...] = (1, 2, 3)
    n0_values: tuple[float, ...] = tuple(float(10 ** k) for k in range(3, 18, 2))
    variants: tuple[str, ...] = VARIANTS
    corr_modes: tuple[str, ...] = CORR_MODES
    decorrelate_stage: str = "flux"
    threat_prior: float = 0.5
    seed: int = 0
    n_realizations: int = 1000
    exposure_time: float = 1.0
    e_min: float = 30.0
    e_max: float = 160.0
    n_energies: int = 180
    kvp: float = 160.0
    filter_element: str = "Al"
    filter_thickness_cm: float = 0.2

    def __post_init__(self):
        for name in ("bins", "n0_values", "variants", "corr_modes"):
            value = getattr(self, name)
            if isinstance(value, (str, int, float)):
                value = (value,)
            object.__setattr__(self, name, tuple(value))
        object.__setattr__(self, "bins", tuple(int(b) for b in self.bins))
        object.__setattr__(self, "n0_values", tuple(float(x) for x in self.n0_values))
        problems = []
        if self.n_pixels < 1 or self.items_per_vial < 1 or self.n_bag_pairs < 1:
            problems.append("n_pixels, items_per_vial and n_bag_pairs must be positive")
        if not 0 < self.vial_length_min <= self.vial_length_max:
            problems.append("vial length range must be positive and ordered")
        if not self.bins or min(self.bins) < 1:
            problems.append("bins must be a non-empty list of positive counts")
        if not self.n0_values or min(self.n0_values) <= 0:
            problems.append("n0_values must be a non-empty list of positive budgets")
        if not self.variants or set(self.variants) - set(VARIANTS):
            problems.append(f"variants must be drawn from {VARIANTS}")
        if not self.corr_modes or set(self.corr_modes) - set(CORR_MODES):
            problems.append(f"corr_modes must be drawn from {CORR_MODES}")
        if self.decorrelate_stage not in ("flux", "binned"):
            problems.append("decorrelate_stage must be 'flux' or 'binned'")
        if not 0 < self.threat_prior < 1:
            problems.append("threat_prior must lie in (0, 1)")
        if self.n_realizations < 2:
            problems.append("n_realizations must be at least 2")
        if problems:
            raise ConfigurationError("; ".join(problems))

    @classmethod
    def from_block(cls, block: Block, path=None) -> "ScenarioConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(block.fields) - known
        if unknown:
            raise ParseError(f"unknown scenario keys {sorted(unknown)}", path, block.line)
        return cls(**block.fields)

    @classmethod
    def from_file(cls, path) -> "ScenarioConfig":
        for block in parse_file(path):
            if block.kind == "scenario":
                return cls.from_block(block, path)
        raise ParseError("no 'scenario' block found", path)

    def to_block(self) -> Block:
        values = {}
        for f in fields(self):
            v = getattr(self, f.name)
            values[f.name] = list(v) if isinstance(v, tuple) else v
        return Block("scenario", values)


Geometry = tuple[tuple[tuple[str, float], ...], ...]


@dataclass(frozen=True)
class BagPair:
    """Two objects sharing geometry, differing in the material of one item."""

    non_threat: Geometry
    threat: Geometry
    pixel: int
    item: int

    def __post_init__(self):
        diffs = [(p, i) for p, (a, b) in enumerate(zip(self.non_threat, self.threat))
                 for i, (x, y) in enumerate(zip(a, b)) if x != y]
        if diffs != [(self.pixel, self.item)]:
            raise ConfigurationError(f"bag pair must differ in exactly one item, found {diffs}")
        if self.non_threat[self.pixel][self.item][1] != self.threat[self.pixel][self.item][1]:
            raise ConfigurationError("bag pair members must share item lengths")


def _split_library(library: Sequence[MaterialDefinition]):
    threats = sorted(m.name for m in library if m.class_label == THREAT)
    benign = sorted(m.name for m in library if m.class_label == NON_THREAT)
    if not threats or not benign:
        raise ConfigurationError("the library needs at least one threat and one non-threat material")
    return threats, benign


def pair_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(0xBA6, int(index))))


def generate_bag_pairs(cfg: ScenarioConfig, library: Sequence[MaterialDefinition]) -> list[BagPair]:
    """Draw ``cfg.n_bag_pairs`` bag pairs; pair ``k`` uses its own seeded stream."""
    threats, benign = _split_library(library)
    pairs = []
    for k in range(cfg.n_bag_pairs):
        rng = pair_rng(cfg.seed, k)
        geometry = []
        for _ in range(cfg.n_pixels):
            length = rng.uniform(cfg.vial_length_min, cfg.vial_length_max) / cfg.items_per_vial
            names = rng.choice(benign, size=cfg.items_per_vial)
            geometry.append(tuple((str(n), float(length)) for n in names))
        pixel = int(rng.integers(cfg.n_pixels))
        item = int(rng.integers(cfg.items_per_vial))
        substitute = str(rng.choice(threats))
        swapped = list(geometry[pixel])
        swapped[item] = (substitute, swapped[item][1])
        threat_geometry = list(geometry)
        threat_geometry[pixel] = tuple(swapped)
        pairs.append(BagPair(tuple(geometry), tuple(threat_geometry), pixel, item))
    return pairs


def path_of(pixel_items, stats: Mapping[str, MaterialStats]) -> PathSpec:
    return PathSpec(tuple((stats[name], length) for name, length in pixel_items))


def balance_bin_edges(spectrum: SourceSpectrum, reference_attenuation, n_bins: int) -> np.ndarray:
    """Edges that split the attenuated spectrum into bins of equal expected count.

    The attenuated density is treated as piecewise linear on the grid, and
    its cumulative integral (piecewise quadratic) is inverted exactly, so
    ideal bins on these edges collect equal counts up to rounding.
    """
    if n_bins < 1:
        raise ConfigurationError("n_bins must be at least 1")
    e = spectrum.grid.energies
    f = spectrum.s * np.exp(-np.asarray(reference_attenuation, dtype=float))
    h = np.diff(e)
    seg = 0.5 * h * (f[:-1] + f[1:])
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    edges = [e[0]]
    for m in range(1, n_bins):
        target = cum[-1] * m / n_bins
        k = int(np.searchsorted(cum, target, side="left")) - 1
        k = min(max(k, 0), e.size - 2)
        rest = target - cum[k]
        a = (f[k + 1] - f[k]) / (2.0 * h[k])
        b = f[k]
        disc = max(b * b + 4.0 * a * rest, 0.0)
        u = 2.0 * rest / (b + np.sqrt(disc)) if (b + np.sqrt(disc)) > 0 else 0.0
        edges.append(e[k] + min(max(u, 0.0), h[k]))
    edges.append(e[-1])
    return np.array(edges)


def build_model_variant(pixel: PixelDistribution, variant: str) -> PixelDistribution:
    """Select the data covariance for one of the three measurement models."""
    return pixel.with_total(_variant_cov(pixel.jd0, pixel.sigma_material, variant))


def _variant_cov(jd0: np.ndarray, sigma_material: np.ndarray, variant: str) -> np.ndarray:
    m = jd0.shape[-1]
    eye = np.eye(m)
    shot = jd0[..., :, None] * eye
    if variant == "shot_only":
        return np.broadcast_to(shot, sigma_material.shape).copy()
    if variant == "combined":
        return sigma_material + shot
    if variant == "material_only":
        trace = np.trace(sigma_material, axis1=-2, axis2=-1)
        if np.any(trace <= 0):
            raise DegenerateCovarianceError("material-only model needs non-zero material covariance")
        return sigma_material + (MATERIAL_ONLY_JITTER * trace)[..., None, None] * eye
    raise ConfigurationError(f"unknown model variant {variant!r}")


def binned_material_covariance(detector, j0, sigma_j, exposure_time=1.0, corr_mode="correlated",
                               stage="flux") -> PixelDistribution:
    """Bin flux statistics under the correlated or an uncorrelated material model.

    ``stage='flux'`` drops off-diagonal flux covariance before binning;
    ``stage='binned'`` drops off-diagonal binned covariance afterwards.
    """
    if corr_mode == "uncorrelated" and stage == "flux":
        sigma_j = decorrelate(sigma_j)
    out = bin_counts(detector, j0, sigma_j, exposure_time)
    if corr_mode == "uncorrelated" and stage == "binned":
        sm = decorrelate(out.sigma_material)
        out = PixelDistribution(out.jd0, sm, sm)
    return out


def ellipsoid_volume_ratio(sigma_corr, sigma_uncorr) -> float:
    """``sqrt(det sigma_corr) / sqrt(det sigma_uncorr)`` from eigenvalues.

    Eigenvalues of ``sigma_corr`` below ``1e-12 * trace`` are raised to that
    floor; a singular ``sigma_uncorr`` is an error.
    """
    return float(10.0 ** log10_volume_ratio(sigma_corr, sigma_uncorr))


def log10_volume_ratio(sigma_corr, sigma_uncorr) -> float:
    wc = np.linalg.eigvalsh(np.asarray(sigma_corr, dtype=float))
    wu = np.linalg.eigvalsh(np.asarray(sigma_uncorr, dtype=float))
    floor_u = VOLUME_FLOOR * max(np.sum(wu), 0.0)
    if np.any(wu <= floor_u):
        raise DegenerateCovarianceError("uncorrelated covariance is singular; volume ratio undefined")
    floor_c = VOLUME_FLOOR * max(np.sum(wc), 0.0)
    wc = np.maximum(wc, floor_c)
    if np.any(wc <= 0):
        raise DegenerateCovarianceError("correlated covariance is zero")
    return float(0.5 * (np.sum(np.log10(wc)) - np.sum(np.log10(wu))))


@dataclass(frozen=True)
class SweepRow:
    n0: float
    n_bins: int
    variant: str
    corr_mode: str
    is_lower_bits: float
    is_upper_bits: float
    pe_lower: float
    pe_upper: float
    hc_minus_is_lower: float
    hc_minus_is_upper: float

    @classmethod
    def from_bounds(cls, n0, n_bins, variant, corr_mode, b: BoundsResult) -> "SweepRow":
        return cls(float(n0), int(n_bins), variant, corr_mode, b.is_lower_bits, b.is_upper_bits,
                   b.pe_lower, b.pe_upper, b.hc_bits - b.is_upper_bits, b.hc_bits - b.is_lower_bits)


SWEEP_COLUMNS = tuple(f.name for f in fields(SweepRow))


def format_sweep_csv(rows: Sequence[SweepRow]) -> str:
    lines = [",".join(SWEEP_COLUMNS)]
    for r in rows:
        lines.append(",".join(repr(v) if isinstance(v, float) else str(v)
                              for v in (getattr(r, c) for c in SWEEP_COLUMNS)))
    return "\n".join(lines) + "\n"


def write_sweep_csv(rows: Sequence[SweepRow], path) -> None:
    Path(path).write_text(format_sweep_csv(rows), encoding="utf-8")


def read_sweep_csv(path) -> list[SweepRow]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or tuple(lines[0].split(",")) != SWEEP_COLUMNS:
        raise ParseError("not a sweep CSV (header mismatch)", path, 1)
    casts = (float, int, str, str) + (float,) * 6
    return [SweepRow(*(c(v) for c, v in zip(casts, line.split(",")))) for line in lines[1:] if line]


@dataclass
class Scenario:
    """Bag-pair ensemble with per-pixel moments cached at unit photon budget."""

    cfg: ScenarioConfig
    pairs: list[BagPair]
    stats: Mapping[str, MaterialStats]
    spectrum: SourceSpectrum
    pixel_keys: list = field(default_factory=list)
    layout: np.ndarray = None  # (K, N) index into pixel_keys
    labels: list = field(default_factory=list)
    _moments: dict = field(default_factory=dict)
    _edges: dict = field(default_factory=dict)
    _attenuation: list = field(default_factory=list)

    def __post_init__(self):
        unit = self.spectrum.with_budget(1.0)
        object.__setattr__(self, "spectrum", unit)
        index = {}
        layout = []
        for pair in self.pairs:
            for geometry, label in ((pair.threat, THREAT), (pair.non_threat, NON_THREAT)):
                row = []
                for items in geometry:
                    if items not in index:
                        index[items] = len(self.pixel_keys)
                        self.pixel_keys.append(items)
                    row.append(index[items])
                layout.append(row)
                self.labels.append(label)
        self.layout = np.array(layout, dtype=int)
        missing = {n for items in self.pixel_keys for n, _ in items} - set(self.stats)
        if missing:
            raise ConfigurationError(f"no material statistics for {sorted(missing)}")
        for items in self.pixel_keys:
            att = aggregate_attenuation(path_of(items, self.stats), unit.grid)
            j0 = mean_flux(unit, att.tau0)
            self._attenuation.append((att, j0))

    @property
    def n_objects(self) -> int:
        return self.layout.shape[0]

    @property
    def weights(self) -> np.ndarray:
        p = self.cfg.threat_prior
        n = len(self.pairs)
        return np.array([p / n if lab == THREAT else (1.0 - p) / n for lab in self.labels])

    @property
    def index_pairs(self) -> list[tuple[int, int]]:
        return [(2 * k, 2 * k + 1) for k in range(len(self.pairs))]

    def reference_attenuation(self) -> np.ndarray:
        """Attenuation whose transmission equals the ensemble-mean transmission."""
        counts = np.bincount(self.layout.ravel(), minlength=len(self.pixel_keys))
        trans = sum(c * np.exp(-att.tau0) for c, (att, _) in zip(counts, self._attenuation))
        return -np.log(trans / counts.sum())

    def bin_edges(self, n_bins: int) -> np.ndarray:
        if n_bins not in self._edges:
            self._edges[n_bins] = balance_bin_edges(self.spectrum, self.reference_attenuation(), n_bins)
        return self._edges[n_bins]

    def detector(self, n_bins: int):
        return ideal_detector(self.spectrum.grid, self.bin_edges(n_bins))

    def unit_moments(self, n_bins: int, corr_mode: str):
        """Stacked ``(P, M)`` mean counts and ``(P, M, M)`` material covariance at N0 = 1."""
        key = (n_bins, corr_mode)
        if key not in self._moments:
            det = self.detector(n_bins)
            t = self.spectrum.exposure_time
            means, covs = [], []
            for att, j0 in self._attenuation:
                sigma_j = linearized_flux_covariance(j0, att.sigma_tau)
                px = binned_material_covariance(det, j0, sigma_j, t, corr_mode, self.cfg.decorrelate_stage)
                means.append(px.jd0)
                covs.append(px.sigma_material)
            self._moments[key] = (np.array(means), np.array(covs))
        return self._moments[key]

    def flux_covariances(self):
        """Per unique pixel ``(J0, Sigma_J)`` at unit photon budget."""
        return [(j0, linearized_flux_covariance(j0, att.sigma_tau)) for att, j0 in self._attenuation]

    def objects(self, n0: float, n_bins: int, variant: str, corr_mode: str) -> list[ObjectDistribution]:
        means_u, covs_u = self.unit_moments(n_bins, corr_mode)
        jd0 = n0 * means_u[self.layout]
        sigma = (n0 * n0) * covs_u[self.layout]
        total = _variant_cov(jd0, sigma, variant)
        return [ObjectDistribution(jd0[k], total[k]) for k in range(self.n_objects)]

    def pixel_distributions(self, n0: float, n_bins: int, variant: str, corr_mode: str):
        """Per-object lists of :class:`PixelDistribution` (for dumping)."""
        means_u, covs_u = self.unit_moments(n_bins, corr_mode)
        out = []
        for row in self.layout:
            pixels = []
            for p in row:
                jd0 = n0 * means_u[p]
                sm = (n0 * n0) * covs_u[p]
                nonlinear = self._attenuation[p][0].max_excursion > LINEARIZATION_THRESHOLD
                pixels.append(PixelDistribution(jd0, sm, _variant_cov(jd0, sm, variant),
                                                low_count=bool(np.any(jd0 < 10.0)), nonlinear=nonlinear))
            out.append(pixels)
        return out

    def ensemble(self, n0: float, n_bins: int, variant: str, corr_mode: str) -> EnsembleSpec:
        return EnsembleSpec(self.objects(n0, n_bins, variant, corr_mode), self.weights, self.labels,
                            pairs=self.index_pairs)

    def bounds(self, n0: float, n_bins: int, variant: str, corr_mode: str) -> BoundsResult:
        try:
            return pe_bounds(self.ensemble(n0, n_bins, variant, corr_mode))
        except XtsiError as exc:
            context = f"[n0={n0:g}, n_bins={n_bins}, variant={variant}, corr_mode={corr_mode}] "
            raise type(exc)(context + str(exc)) from exc


def build_scenario(cfg: ScenarioConfig, library: Sequence[MaterialDefinition],
                   stats: Mapping[str, MaterialStats], spectrum: SourceSpectrum) -> Scenario:
    return Scenario(cfg, generate_bag_pairs(cfg, library), stats, spectrum)


def sweep_points(cfg: ScenarioConfig):
    return [(n0, b, v, c) for n0 in cfg.n0_values for b in cfg.bins
            for v in cfg.variants for c in cfg.corr_modes]


def run_sweep(scenario: Scenario, threads: int = 1) -> list[SweepRow]:
    """Evaluate every (N0, bins, variant, correlation mode) point.

    Points are independent; rows come back in a fixed order whatever the
    worker count.
    """
    cfg = scenario.cfg
    points = sweep_points(cfg)
    for b in cfg.bins:
        for c in cfg.corr_modes:
            scenario.unit_moments(b, c)

    def evaluate(point):
        n0, b, v, c = point
        return SweepRow.from_bounds(n0, b, v, c, scenario.bounds(n0, b, v, c))

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(evaluate, points))
    else:
        rows = [evaluate(p) for p in points]
    log.info("sweep finished: %d rows", len(rows))
    return rows


@dataclass(frozen=True)
class VolumeRatioStudy:
    n_bins: int
    log10_ratios: np.ndarray
    one_bin_checks: int
    one_bin_violations: int

    @property
    def mean(self) -> float:
        return float(np.mean(self.log10_ratios))

    @property
    def std(self) -> float:
        return float(np.std(self.log10_ratios))


def volume_ratio_study(scenario: Scenario, n_bins: int) -> VolumeRatioStudy:
    """``log10 r`` between correlated and flux-decorrelated material covariance, per object pixel.

    For one bin, pixels whose flux covariance has no negative entry must
    have ``r >= 1``; those pixels are counted and violations recorded.
    """
    det = scenario.detector(n_bins)
    t = scenario.spectrum.exposure_time
    per_pixel = []
    checks = violations = 0
    for j0, sigma_j in scenario.flux_covariances():
        corr = bin_counts(det, j0, sigma_j, t).sigma_material
        unc = bin_counts(det, j0, decorrelate(sigma_j), t).sigma_material
        value = log10_volume_ratio(corr, unc)
        per_pixel.append(value)
        if n_bins == 1 and np.min(sigma_j) >= -1e-12 * np.max(np.abs(sigma_j)):
            checks += 1
            if value < -1e-9:
                violations += 1
    per_pixel = np.array(per_pixel)
    return VolumeRatioStudy(n_bins, per_pixel[scenario.layout.ravel()], checks, violations)
