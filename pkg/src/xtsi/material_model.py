"""Gaussian-process statistics of material attenuation over energy.

Each material's attenuation coefficient ``mu(E)`` is summarised by a mean
vector and an energy-energy covariance matrix, both estimated by Monte Carlo
over composition and density realisations of a :class:`MaterialDefinition`.
"""

from __future__ import annotations

import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy.stats import truncnorm

from .errors import AlignmentError, ParameterError, ParseError, ValidationError
from .spectral_data import (
    CLASS_LABELS,
    ElementTable,
    EnergyGrid,
    MaterialDefinition,
    _frozen,
)

DEFAULT_REALIZATIONS = 1000
PSD_FLOOR = 1e-10


def psd_repair(sigma: np.ndarray) -> np.ndarray:
    """Symmetrise and clip negative eigenvalues to zero."""
    sym = 0.5 * (sigma + sigma.T)
    if not np.any(sym):
        return sym
    w, v = np.linalg.eigh(sym)
    w = np.clip(w, 0.0, None)
    out = (v * w) @ v.T
    return 0.5 * (out + out.T)


def check_psd(sigma: np.ndarray, label: str) -> None:
    scale = np.max(np.abs(sigma)) if sigma.size else 0.0
    if scale == 0:
        return
    if np.max(np.abs(sigma - sigma.T)) > 1e-12 * scale:
        raise ValidationError(f"{label}: covariance is not symmetric")
    w = np.linalg.eigvalsh(sigma)
    if w[0] < -PSD_FLOOR * max(w[-1], 0.0):
        raise ValidationError(f"{label}: covariance has eigenvalue {w[0]:.3g} below the PSD floor")


@dataclass(frozen=True, eq=False)
class MaterialStats:
    """Mean attenuation ``mu0`` (1/cm) and covariance ``sigma_mu`` (1/cm^2)."""

    name: str
    class_label: str
    grid: EnergyGrid
    mu0: np.ndarray
    sigma_mu: np.ndarray
    n_realizations: int

    def __post_init__(self):
        mu0 = _frozen(self.mu0)
        sigma = _frozen(self.sigma_mu)
        r = self.grid.size
        if mu0.shape != (r,) or sigma.shape != (r, r):
            raise AlignmentError(f"{self.name}: stats do not match a grid of {r} energies")
        if self.class_label not in CLASS_LABELS:
            raise ValidationError(f"{self.name}: unknown class {self.class_label!r}")
        if np.any(mu0 <= 0):
            raise ValidationError(f"{self.name}: mean attenuation must be positive")
        check_psd(sigma, self.name)
        object.__setattr__(self, "mu0", mu0)
        object.__setattr__(self, "sigma_mu", sigma)

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        """Draw ``size`` attenuation profiles from N(mu0, sigma_mu)."""
        w, v = np.linalg.eigh(self.sigma_mu)
        root = v * np.sqrt(np.clip(w, 0.0, None))
        z = rng.standard_normal((size, self.grid.size))
        return self.mu0 + z @ root.T


def _as_rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def realization_rng(seed: int, name: str, index: int) -> np.random.Generator:
    """Independent stream for realisation ``index`` of material ``name``."""
    key = zlib.crc32(name.encode("utf-8"))
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(key, int(index))))


def _truncated_normal(u, mean, std, low, high):
    u = np.asarray(u, dtype=float)
    mean = np.broadcast_to(np.asarray(mean, dtype=float), u.shape)
    std = np.broadcast_to(np.asarray(std, dtype=float), u.shape)
    out = np.array(mean, dtype=float)
    live = std > 0
    if np.any(live):
        m, s = mean[live], std[live]
        a, b = (low - m) / s, (high - m) / s
        out[live] = truncnorm.ppf(u[live], a, b, loc=m, scale=s)
    return out


def _realizations_from_uniforms(definition: MaterialDefinition, u: np.ndarray):
    """Map uniforms of shape (n, 1 + n_components) to densities and weights."""
    rho = _truncated_normal(u[:, 0], definition.density_mean, definition.density_std, 0.0, np.inf)
    w = _truncated_normal(u[:, 1:], definition.w_mean, definition.w_std, 0.0, 1.0)
    if np.any(definition.w_std > 0):
        w = w / w.sum(axis=1, keepdims=True)
    return rho, w


def sample_composition(definition: MaterialDefinition, rng_seed) -> tuple[float, np.ndarray]:
    """Draw one (density, weight-fraction vector) realisation.

    Each weight fraction comes from a Gaussian truncated to [0, 1] and the
    vector is renormalised onto the simplex; density comes from a Gaussian
    truncated to (0, inf). Zero stds reproduce the nominal values exactly.
    """
    rng = _as_rng(rng_seed)
    u = rng.random(1 + len(definition.components))[None, :]
    rho, w = _realizations_from_uniforms(definition, u)
    return float(rho[0]), w[0]


def _mass_attenuation_matrix(elements: Sequence[ElementTable], grid: EnergyGrid) -> np.ndarray:
    for table in elements:
        if table.grid != grid:
            raise AlignmentError(f"element table {table.symbol} is not on the requested grid")
    return np.stack([t.mass_attenuation for t in elements])


def attenuation_of_realization(rho: float, w, elements: Sequence[ElementTable], grid: EnergyGrid) -> np.ndarray:
    """Linear attenuation of a mixture: ``rho * sum_c (w_c / rho_c) * mu_c(E)``.

    ``mu_c / rho_c`` is the element's mass attenuation, so the element
    densities cancel and only the tabulated mass attenuation enters.
    """
    w = np.asarray(w, dtype=float)
    if w.shape != (len(elements),):
        raise AlignmentError(f"{w.size} weight fractions for {len(elements)} element tables")
    return rho * (w @ _mass_attenuation_matrix(elements, grid))


def _element_list(definition, elements: Mapping[str, ElementTable]):
    missing = [e for e in definition.elements if e not in elements]
    if missing:
        raise AlignmentError(f"material '{definition.name}' uses unknown elements {missing}")
    return [elements[e] for e in definition.elements]


def estimate_material_stats(
    definition: MaterialDefinition,
    elements: Mapping[str, ElementTable],
    grid: EnergyGrid,
    n_realizations: int = DEFAULT_REALIZATIONS,
    rng_seed: int = 0,
    threads: int = 1,
) -> MaterialStats:
    """Sample mean and unbiased sample covariance of attenuation profiles.

    Realisation ``i`` draws from its own stream derived from
    ``(rng_seed, material name, i)``, so the result does not depend on
    ``threads``. The covariance is symmetrised and its negative eigenvalues
    are clipped so that downstream factorisations see a PSD matrix.
    """
    if n_realizations < 2:
        raise ParameterError("n_realizations must be at least 2")
    tables = _element_list(definition, elements)
    massatt = _mass_attenuation_matrix(tables, grid)

    if definition.is_deterministic:
        mu0 = definition.density_mean * (definition.w_mean @ massatt)
        return MaterialStats(definition.name, definition.class_label, grid, mu0,
                             np.zeros((grid.size, grid.size)), n_realizations)

    n_u = 1 + len(tables)

    def draw(index_range):
        return [realization_rng(rng_seed, definition.name, i).random(n_u) for i in index_range]

    indices = range(n_realizations)
    if threads > 1:
        chunks = [indices[k::threads] for k in range(threads)]
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(draw, chunks))
        u = np.empty((n_realizations, n_u))
        for k, part in enumerate(parts):
            u[k::threads] = part
    else:
        u = np.array(draw(indices))

    rho, w = _realizations_from_uniforms(definition, u)
    mu = rho[:, None] * (w @ massatt)
    mu0 = mu.mean(axis=0)
    sigma = psd_repair(np.cov(mu, rowvar=False, ddof=1))
    return MaterialStats(definition.name, definition.class_label, grid, mu0, sigma, n_realizations)


def estimate_library_stats(definitions, elements, grid, n_realizations=DEFAULT_REALIZATIONS,
                           rng_seed=0, threads=1) -> dict[str, MaterialStats]:
    return {
        d.name: estimate_material_stats(d, elements, grid, n_realizations, rng_seed, threads)
        for d in definitions
    }


def save_material_stats(stats: MaterialStats, directory) -> tuple[Path, Path]:
    """Write ``<name>.mu0.csv`` and ``<name>.sigma.csv`` into ``directory``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    mu_path = directory / f"{stats.name}.mu0.csv"
    sigma_path = directory / f"{stats.name}.sigma.csv"
    with open(mu_path, "w", encoding="utf-8") as fh:
        fh.write(f"# name={stats.name} class={stats.class_label} n_realizations={stats.n_realizations}\n")
        fh.write("energy_keV,mu0_per_cm\n")
        for e, m in zip(stats.grid.energies, stats.mu0):
            fh.write(f"{float(e)!r},{float(m)!r}\n")
    with open(sigma_path, "w", encoding="utf-8") as fh:
        for row in stats.sigma_mu:
            fh.write(",".join(repr(float(x)) for x in row) + "\n")
    return mu_path, sigma_path


def load_material_stats(directory, name: str) -> MaterialStats:
    directory = Path(directory)
    mu_path = directory / f"{name}.mu0.csv"
    meta = {}
    energies, mu0 = [], []
    with open(mu_path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if line.startswith("#"):
                meta.update(kv.split("=", 1) for kv in line[1:].split() if "=" in kv)
            elif line and not line.startswith("energy_keV"):
                try:
                    e, m = (float(x) for x in line.split(","))
                except ValueError:
                    raise ParseError(f"bad record {line!r}", mu_path, lineno) from None
                energies.append(e)
                mu0.append(m)
    sigma = np.loadtxt(directory / f"{name}.sigma.csv", delimiter=",", ndmin=2)
    try:
        return MaterialStats(meta["name"], meta["class"], EnergyGrid(energies), mu0, sigma,
                             int(meta["n_realizations"]))
    except KeyError as exc:
        raise ParseError(f"missing header field {exc}", mu_path, 1) from None
