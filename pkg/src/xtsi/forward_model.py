"""From an object path to the Gaussian distribution of one pixel's binned counts.

Pipeline per pixel::

    items (MaterialStats, length)  -> total attenuation  N(tau0, Sigma_tau)
    Beer's law, linearised         -> spectral flux      N(J0, (J0 J0^T) * Sigma_tau)
    detector response D            -> binned counts      N(t D J0, t^2 D Sigma_J D^T)
    Poisson shot noise (Gaussian)  -> data               N(jd0, Sigma_Jd + diag(jd0))
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln

from .errors import AlignmentError, DegenerateBinError, ParseError, ValidationError
from .material_model import MaterialStats
from .spectral_data import EnergyGrid, SourceSpectrum, _frozen

# |dtau| below which the linearisation remainder stays under 1% of J0.
LINEARIZATION_FRACTION = 0.01
LINEARIZATION_THRESHOLD = (6.0 * LINEARIZATION_FRACTION) ** (1.0 / 3.0)
SHOT_NOISE_FLOOR = 10.0


@dataclass(frozen=True)
class PathSpec:
    """Items crossed by one pixel's ray: ``(MaterialStats, length_cm)`` pairs."""

    items: tuple[tuple[MaterialStats, float], ...] = ()

    def __post_init__(self):
        items = tuple((m, float(l)) for m, l in self.items)
        for m, l in items:
            if not l > 0:
                raise ValidationError(f"item of {m.name} has non-positive length {l}")
        object.__setattr__(self, "items", items)

    @property
    def materials(self) -> tuple[str, ...]:
        return tuple(m.name for m, _ in self.items)


@dataclass(frozen=True, eq=False)
class AttenuationStats:
    tau0: np.ndarray
    sigma_tau: np.ndarray

    @property
    def max_excursion(self) -> float:
        """Largest 3-sigma attenuation excursion over the energy grid."""
        return float(3.0 * np.sqrt(np.max(np.diag(self.sigma_tau), initial=0.0)))


def aggregate_attenuation(path: PathSpec, grid: EnergyGrid | None = None) -> AttenuationStats:
    """``tau0 = sum_t mu0_t l_t`` and ``Sigma_tau = sum_t Sigma_mu,t l_t^2``."""
    if grid is None:
        if not path.items:
            raise AlignmentError("an empty path needs an explicit grid")
        grid = path.items[0][0].grid
    tau0 = np.zeros(grid.size)
    sigma = np.zeros((grid.size, grid.size))
    for stats, length in path.items:
        if stats.grid != grid:
            raise AlignmentError(f"material {stats.name} is on a different energy grid")
        tau0 += stats.mu0 * length
        sigma += stats.sigma_mu * (length * length)
    return AttenuationStats(tau0, sigma)


def mean_flux(spectrum: SourceSpectrum, tau0) -> np.ndarray:
    """Beer's law mean spectral flux ``(N0 S / t) exp(-tau0)`` in 1/(s keV)."""
    tau0 = np.asarray(tau0, dtype=float)
    if tau0.shape != spectrum.s.shape:
        raise AlignmentError("attenuation and spectrum are on different grids")
    return spectrum.n0 * spectrum.s / spectrum.exposure_time * np.exp(-tau0)


def linearized_flux_covariance(j0, sigma_tau) -> np.ndarray:
    """First-order flux covariance ``(J0 J0^T) * Sigma_tau`` (elementwise)."""
    j0 = np.asarray(j0, dtype=float)
    return np.outer(j0, j0) * np.asarray(sigma_tau, dtype=float)


def remainder_bound(j0, delta_tau):
    """Bound ``J0 |dtau|^3 / 6`` on the dropped Taylor remainder of exp(-dtau)."""
    return np.asarray(j0) * np.abs(delta_tau) ** 3 / 6.0


def linearization_ok(delta_tau, fraction: float = LINEARIZATION_FRACTION):
    """True where the remainder bound stays below ``fraction`` of J0."""
    return remainder_bound(1.0, delta_tau) < fraction


@dataclass(frozen=True, eq=False)
class DetectorModel:
    """Energy-binning detector: ``response[m] @ J`` integrates flux over bin ``m``."""

    grid: EnergyGrid
    bin_edges: np.ndarray
    response: np.ndarray

    def __post_init__(self):
        edges = _frozen(self.bin_edges)
        resp = _frozen(self.response)
        if edges.ndim != 1 or edges.size < 2 or np.any(np.diff(edges) <= 0):
            raise ValidationError("bin edges must be strictly increasing with at least two entries")
        if edges[0] < self.grid.e_min or edges[-1] > self.grid.e_max:
            raise ValidationError("bin edges fall outside the energy grid")
        if resp.shape != (edges.size - 1, self.grid.size):
            raise AlignmentError(f"response must be {edges.size - 1}x{self.grid.size}")
        if np.any(resp < 0):
            raise ValidationError("detector response must be non-negative")
        object.__setattr__(self, "bin_edges", edges)
        object.__setattr__(self, "response", resp)

    @property
    def n_bins(self) -> int:
        return self.bin_edges.size - 1


def interval_weights(energies: np.ndarray, lo: float, hi: float) -> np.ndarray:
    """Weights giving the exact integral over [lo, hi] of the piecewise-linear interpolant."""
    x = np.asarray(energies, dtype=float)
    w = np.zeros_like(x)
    for k in range(x.size - 1):
        a, b = max(lo, x[k]), min(hi, x[k + 1])
        if b <= a:
            continue
        h = x[k + 1] - x[k]
        t0, t1 = (a - x[k]) / h, (b - x[k]) / h
        half_sq = 0.5 * (t1 * t1 - t0 * t0)
        w[k] += h * ((t1 - t0) - half_sq)
        w[k + 1] += h * half_sq
    return w


def ideal_detector(grid: EnergyGrid, bin_edges) -> DetectorModel:
    """Rectangular bins; each row holds the quadrature weights of its bin's indicator."""
    edges = np.asarray(bin_edges, dtype=float)
    rows = [interval_weights(grid.energies, lo, hi) for lo, hi in zip(edges[:-1], edges[1:])]
    return DetectorModel(grid, edges, np.array(rows))


@dataclass(frozen=True, eq=False)
class PixelDistribution:
    """Gaussian model of one pixel's binned counts.

    ``sigma_material`` is the covariance induced by material variability and
    ``sigma_total`` the covariance of the data model in use (material plus
    shot noise for the combined model). ``low_count`` marks bins below the
    shot-noise validity floor; ``nonlinear`` marks paths whose 3-sigma
    attenuation excursion exceeds the linearisation threshold.
    """

    jd0: np.ndarray
    sigma_material: np.ndarray
    sigma_total: np.ndarray
    low_count: bool = False
    nonlinear: bool = False

    def __post_init__(self):
        jd0 = _frozen(self.jd0)
        m = jd0.size
        sm = _frozen(self.sigma_material)
        st = _frozen(self.sigma_total)
        if jd0.ndim != 1 or sm.shape != (m, m) or st.shape != (m, m):
            raise AlignmentError("pixel mean and covariances have inconsistent sizes")
        object.__setattr__(self, "jd0", jd0)
        object.__setattr__(self, "sigma_material", sm)
        object.__setattr__(self, "sigma_total", st)

    @property
    def n_bins(self) -> int:
        return self.jd0.size

    @property
    def mean(self) -> np.ndarray:
        return self.jd0

    @property
    def cov(self) -> np.ndarray:
        return self.sigma_total

    def with_total(self, sigma_total) -> "PixelDistribution":
        return PixelDistribution(self.jd0, self.sigma_material, sigma_total, self.low_count, self.nonlinear)


def bin_counts(detector: DetectorModel, j0, sigma_j, exposure_time: float = 1.0) -> PixelDistribution:
    """Binned mean ``t D J0`` and material covariance ``t^2 D Sigma_J D^T``.

    The returned distribution carries no shot noise yet; its ``sigma_total``
    equals ``sigma_material``.
    """
    j0 = np.asarray(j0, dtype=float)
    if j0.shape != (detector.grid.size,):
        raise AlignmentError("flux and detector are on different grids")
    d = detector.response
    jd0 = exposure_time * (d @ j0)
    if np.any(jd0 <= 0):
        bad = int(np.argmax(jd0 <= 0))
        raise DegenerateBinError(
            f"bin {bad} [{detector.bin_edges[bad]}, {detector.bin_edges[bad + 1]}] keV collects no flux"
        )
    sigma = exposure_time ** 2 * (d @ np.asarray(sigma_j, dtype=float) @ d.T)
    sigma = 0.5 * (sigma + sigma.T)
    return PixelDistribution(jd0, sigma, sigma)


def combine_shot_noise(jd0, sigma_material, count_floor: float = SHOT_NOISE_FLOOR,
                       nonlinear: bool = False) -> PixelDistribution:
    """Add Gaussian-approximated Poisson noise: ``Sigma_total = Sigma_Jd + diag(jd0)``."""
    jd0 = np.asarray(jd0, dtype=float)
    if np.any(jd0 <= 0):
        raise DegenerateBinError("mean counts must be positive to add shot noise")
    sigma_material = np.asarray(sigma_material, dtype=float)
    total = sigma_material + np.diag(jd0)
    return PixelDistribution(jd0, sigma_material, total,
                             low_count=bool(np.any(jd0 < count_floor)), nonlinear=nonlinear)


def decorrelate(sigma) -> np.ndarray:
    """Drop off-diagonal covariance, keeping only per-sample variances."""
    sigma = np.asarray(sigma, dtype=float)
    if sigma.ndim != 2 or sigma.shape[0] != sigma.shape[1]:
        raise AlignmentError("decorrelate expects a square matrix")
    return np.diag(np.diag(sigma))


def pixel_distribution(path: PathSpec, spectrum: SourceSpectrum, detector: DetectorModel,
                       correlated: bool = True) -> PixelDistribution:
    """Run the full chain for one pixel under the combined model.

    With ``correlated=False`` the off-diagonal part of the flux covariance is
    discarded before binning.
    """
    att = aggregate_attenuation(path, spectrum.grid)
    j0 = mean_flux(spectrum, att.tau0)
    sigma_j = linearized_flux_covariance(j0, att.sigma_tau)
    if not correlated:
        sigma_j = decorrelate(sigma_j)
    binned = bin_counts(detector, j0, sigma_j, spectrum.exposure_time)
    return combine_shot_noise(binned.jd0, binned.sigma_material,
                              nonlinear=att.max_excursion > LINEARIZATION_THRESHOLD)


def save_pixel_distribution(pixel: PixelDistribution, path) -> None:
    """CSV with a ``mean`` row, then ``sigma_total`` and ``sigma_material`` rows."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        fh.write(f"# n_bins={pixel.n_bins} low_count={int(pixel.low_count)} nonlinear={int(pixel.nonlinear)}\n")
        w.writerow(["mean", *map(repr, map(float, pixel.jd0))])
        for row in pixel.sigma_total:
            w.writerow(["sigma_total", *map(repr, map(float, row))])
        for row in pixel.sigma_material:
            w.writerow(["sigma_material", *map(repr, map(float, row))])


def load_pixel_distribution(path) -> PixelDistribution:
    rows: dict[str, list] = {"mean": [], "sigma_total": [], "sigma_material": []}
    flags = {}
    with open(path, encoding="utf-8", newline="") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                flags.update(kv.split("=", 1) for kv in line[1:].split() if "=" in kv)
                continue
            kind, *values = line.split(",")
            if kind not in rows:
                raise ParseError(f"unknown row kind {kind!r}", path, lineno)
            try:
                rows[kind].append([float(v) for v in values])
            except ValueError:
                raise ParseError(f"non-numeric entry in {line!r}", path, lineno) from None
    return PixelDistribution(rows["mean"][0], rows["sigma_material"], rows["sigma_total"],
                             low_count=flags.get("low_count") == "1",
                             nonlinear=flags.get("nonlinear") == "1")


def poisson_gaussian_error(lam, x):
    """Leading-order relative error of N(lam, lam) against the Poisson pmf.

    Returns ``((x - lam)^2 - 3 lam) / (6 lam) * delta`` with
    ``delta = (x - lam) / lam``.
    """
    lam = np.asarray(lam, dtype=float)
    if np.any(lam <= 0):
        raise ValueError("lambda must be positive")
    delta = (x - lam) / lam
    return (-3.0 * lam + (x - lam) ** 2) / (6.0 * lam) * delta


def poisson_alt_gaussian_error(lam, x):
    """Leading-order relative error of ``exp(-(x-lam)^2/(2x)) / sqrt(2 pi x)``."""
    lam = np.asarray(lam, dtype=float)
    if np.any(lam <= 0):
        raise ValueError("lambda must be positive")
    delta = (x - lam) / lam
    return -((x - lam) ** 2) / (3.0 * lam) * delta


def _log_poisson(lam, x):
    return x * np.log(lam) - lam - gammaln(x + 1.0)


def exact_poisson_gaussian_error(lam, x):
    """``(pmf - N(x; lam, lam)) / pmf`` with the pmf continued through log-gamma."""
    lam = np.asarray(lam, dtype=float)
    x = np.asarray(x, dtype=float)
    log_normal = -((x - lam) ** 2) / (2 * lam) - 0.5 * np.log(2 * np.pi * lam)
    return -np.expm1(log_normal - _log_poisson(lam, x))


def exact_poisson_alt_error(lam, x):
    lam = np.asarray(lam, dtype=float)
    x = np.asarray(x, dtype=float)
    log_f = -((x - lam) ** 2) / (2 * x) - 0.5 * np.log(2 * np.pi * x)
    return -np.expm1(log_f - _log_poisson(lam, x))
