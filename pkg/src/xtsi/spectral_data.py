"""Ingestion of source spectra, elemental attenuation tables and material libraries.

Everything is resampled onto one shared :class:`EnergyGrid`. Spectra are
interpolated linearly; mass-attenuation tables log-log, since they follow
near power laws in energy. Absorption edges are not treated specially, so a
log-log interpolant smears any edge that falls between two table rows.
"""

from __future__ import annotations

import math
import os
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    CoverageError,
    DegenerateSpectrumError,
    ParseError,
    ValidationError,
)
from .structured import Block, dump_blocks, parse_file

THREAT = "threat"
NON_THREAT = "non_threat"
CLASS_LABELS = (THREAT, NON_THREAT)

DEFAULT_E_MIN = 30.0
DEFAULT_E_MAX = 160.0
DEFAULT_R = 180

DATA_DIR = Path(__file__).with_name("data")


def _frozen(values, dtype=float) -> np.ndarray:
    arr = np.array(values, dtype=dtype)
    arr.flags.writeable = False
    return arr


def trapezoid_weights(x: np.ndarray) -> np.ndarray:
    """Weights ``w`` with ``w @ f == np.trapz(f, x)``."""
    x = np.asarray(x, dtype=float)
    h = np.diff(x)
    w = np.zeros_like(x)
    w[:-1] += h / 2
    w[1:] += h / 2
    return w


@dataclass(frozen=True, eq=False)
class EnergyGrid:
    """Shared discrete energy axis in keV."""

    energies: np.ndarray

    def __post_init__(self):
        e = _frozen(self.energies)
        if e.ndim != 1 or e.size < 2:
            raise ValidationError("an energy grid needs at least two samples")
        if not np.all(np.isfinite(e)) or np.any(e <= 0):
            raise ValidationError("grid energies must be finite and positive")
        if np.any(np.diff(e) <= 0):
            raise ValidationError("grid energies must be strictly increasing")
        object.__setattr__(self, "energies", e)

    @classmethod
    def uniform(cls, e_min=DEFAULT_E_MIN, e_max=DEFAULT_E_MAX, count=DEFAULT_R):
        return cls(np.linspace(e_min, e_max, count))

    @property
    def size(self) -> int:
        return self.energies.size

    def __len__(self):
        return self.energies.size

    @property
    def e_min(self) -> float:
        return float(self.energies[0])

    @property
    def e_max(self) -> float:
        return float(self.energies[-1])

    def quadrature_weights(self) -> np.ndarray:
        return trapezoid_weights(self.energies)

    def integrate(self, values) -> float:
        return float(self.quadrature_weights() @ np.asarray(values, dtype=float))

    def __eq__(self, other):
        if not isinstance(other, EnergyGrid):
            return NotImplemented
        return self.energies.shape == other.energies.shape and bool(
            np.array_equal(self.energies, other.energies)
        )

    def __hash__(self):
        return hash(self.energies.tobytes())


def default_grid() -> EnergyGrid:
    """180 uniform samples over [30, 160] keV."""
    return EnergyGrid.uniform()


@dataclass(frozen=True, eq=False)
class SourceSpectrum:
    """Normalised source spectrum ``s`` (1/keV) with its photon budget.

    ``n0`` is the photon count per detector element per exposure and
    ``exposure_time`` the exposure in seconds, so the source spectral flux
    is ``n0 * s / exposure_time``.
    """

    grid: EnergyGrid
    s: np.ndarray
    n0: float = 1.0
    exposure_time: float = 1.0

    def __post_init__(self):
        s = _frozen(self.s)
        if s.shape != (self.grid.size,):
            raise ValidationError("spectrum length does not match its grid")
        if np.any(s < 0) or not np.all(np.isfinite(s)):
            raise ValidationError("spectral density must be finite and non-negative")
        total = self.grid.integrate(s)
        if abs(total - 1.0) > 1e-9:
            raise ValidationError(f"spectrum integrates to {total!r}, not 1")
        if not self.n0 > 0 or not self.exposure_time > 0:
            raise ValidationError("n0 and exposure_time must be positive")
        object.__setattr__(self, "s", s)

    def with_budget(self, n0: float) -> "SourceSpectrum":
        return SourceSpectrum(self.grid, self.s, float(n0), self.exposure_time)


def normalize_density(grid: EnergyGrid, values) -> np.ndarray:
    """Clip at zero and scale to unit trapezoid integral over ``grid``."""
    s = np.clip(np.asarray(values, dtype=float), 0.0, None)
    total = grid.integrate(s)
    if not total > 0:
        raise DegenerateSpectrumError("spectrum has no positive intensity on the grid")
    # Leave already-normalised data bit-for-bit alone so save/load round-trips.
    if abs(total - 1.0) > 1e-14:
        s = s / total
    return s


def _read_two_columns(path, header_names=()):
    """Read ``x,y`` numeric rows; returns (x, y, header_comments)."""
    xs, ys, comments = [], [], []
    with open(path, encoding="utf-8", newline="") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            if line.startswith("#"):
                comments.append(line[1:].strip())
                continue
            fields = [f.strip() for f in line.split(",")]
            if tuple(fields) == tuple(header_names) and not xs:
                continue
            if len(fields) != 2:
                raise ParseError(f"expected 2 comma-separated columns, got {len(fields)}", path, lineno)
            try:
                x, y = float(fields[0]), float(fields[1])
            except ValueError:
                raise ParseError(f"non-numeric record {line!r}", path, lineno) from None
            if not (math.isfinite(x) and math.isfinite(y)):
                raise ParseError(f"non-finite value in {line!r}", path, lineno)
            if xs and x <= xs[-1]:
                raise ParseError("energies must be strictly increasing", path, lineno)
            xs.append(x)
            ys.append(y)
    if len(xs) < 2:
        raise ParseError("need at least two data rows", path)
    return np.array(xs), np.array(ys), comments


def load_spectrum(path, grid: EnergyGrid, n0: float = 1.0, exposure_time: float = 1.0) -> SourceSpectrum:
    """Load an ``energy_keV,intensity`` CSV onto ``grid``.

    Intensities are linearly interpolated (zero outside the file's energy
    range), clipped at zero and renormalised to unit integral.
    """
    e, intensity, _ = _read_two_columns(path, ("energy_keV", "intensity"))
    values = np.interp(grid.energies, e, intensity, left=0.0, right=0.0)
    s = normalize_density(grid, values)
    return SourceSpectrum(grid, s, n0, exposure_time)


def save_spectrum(spectrum: SourceSpectrum, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("# normalised source spectrum, 1/keV\n")
        fh.write("energy_keV,intensity\n")
        for e, s in zip(spectrum.grid.energies, spectrum.s):
            fh.write(f"{float(e)!r},{float(s)!r}\n")


def kramers_spectrum(
    grid: EnergyGrid,
    kvp: float = DEFAULT_E_MAX,
    filter_table: "ElementTable | None" = None,
    filter_thickness_cm: float = 0.0,
    n0: float = 1.0,
    exposure_time: float = 1.0,
) -> SourceSpectrum:
    """Analytic bremsstrahlung shape ``(kvp - E) / E`` with optional filtration.

    Stands in for a tube-model spectrum. Characteristic lines are not
    modelled. Intensity above ``kvp`` is zero.
    """
    e = grid.energies
    shape = np.clip(kvp - e, 0.0, None) / e
    if filter_table is not None and filter_thickness_cm > 0:
        if filter_table.grid != grid:
            filter_table = filter_table.resample(grid)
        shape = shape * np.exp(-filter_table.linear_attenuation * filter_thickness_cm)
    return SourceSpectrum(grid, normalize_density(grid, shape), n0, exposure_time)


@dataclass(frozen=True, eq=False)
class ElementTable:
    """Mass-attenuation coefficients of one element (or reference mixture)."""

    symbol: str
    grid: EnergyGrid
    mass_attenuation: np.ndarray
    density: float

    def __post_init__(self):
        mu = _frozen(self.mass_attenuation)
        if mu.shape != (self.grid.size,):
            raise ValidationError(f"{self.symbol}: table length does not match grid")
        if np.any(mu <= 0) or not np.all(np.isfinite(mu)):
            raise ValidationError(f"{self.symbol}: mass attenuation must be positive")
        if not self.density > 0:
            raise ValidationError(f"{self.symbol}: density must be positive")
        object.__setattr__(self, "mass_attenuation", mu)

    @property
    def linear_attenuation(self) -> np.ndarray:
        """Attenuation coefficient of the pure element at its own density, 1/cm."""
        return self.density * self.mass_attenuation

    def resample(self, grid: EnergyGrid) -> "ElementTable":
        values = loglog_interp(grid.energies, self.grid.energies, self.mass_attenuation, self.symbol)
        return ElementTable(self.symbol, grid, values, self.density)


def loglog_interp(x, xp, fp, label="table") -> np.ndarray:
    """Power-law (log-log linear) interpolation; exact at the table nodes."""
    x = np.asarray(x, dtype=float)
    xp = np.asarray(xp, dtype=float)
    fp = np.asarray(fp, dtype=float)
    if x.min() < xp[0] or x.max() > xp[-1]:
        raise CoverageError(
            f"{label}: covers [{xp[0]}, {xp[-1]}] keV but grid spans [{x.min()}, {x.max()}] keV"
        )
    out = np.exp(np.interp(np.log(x), np.log(xp), np.log(fp)))
    idx = np.searchsorted(xp, x)
    idx = np.clip(idx, 0, xp.size - 1)
    on_node = xp[idx] == x
    out[on_node] = fp[idx[on_node]]
    return out


_HEADER_KV = re.compile(r"(\w+)\s*=\s*(\S+)")


def load_element_table(path, grid: EnergyGrid | None = None) -> ElementTable:
    """Load an XCOM-style element CSV, optionally resampled onto ``grid``.

    The header comment must carry ``symbol=<S> density_g_cm3=<rho>``; rows are
    ``energy_keV,mu_over_rho_cm2_g``.
    """
    e, mu, comments = _read_two_columns(path, ("energy_keV", "mu_over_rho_cm2_g"))
    meta = {}
    for c in comments:
        meta.update(dict(_HEADER_KV.findall(c)))
    if "symbol" not in meta or "density_g_cm3" not in meta:
        raise ParseError("header must define symbol= and density_g_cm3=", path, 1)
    try:
        density = float(meta["density_g_cm3"])
    except ValueError:
        raise ParseError(f"bad density {meta['density_g_cm3']!r}", path, 1) from None
    symbol = meta["symbol"]
    if np.any(mu <= 0):
        bad = e[np.argmax(mu <= 0)]
        raise ValidationError(f"{path}: non-positive mu/rho at {bad} keV")
    table = ElementTable(symbol, EnergyGrid(e), mu, density)
    return table if grid is None else table.resample(grid)


def save_element_table(table: ElementTable, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(f"# symbol={table.symbol} density_g_cm3={float(table.density)!r}\n")
        fh.write("energy_keV,mu_over_rho_cm2_g\n")
        for e, mu in zip(table.grid.energies, table.mass_attenuation):
            fh.write(f"{float(e)!r},{float(mu)!r}\n")


def load_element_tables(directory, grid: EnergyGrid | None = None) -> dict[str, ElementTable]:
    """Load every ``*.csv`` element table in ``directory`` keyed by symbol."""
    tables = {}
    for name in sorted(os.listdir(directory)):
        if not name.endswith(".csv"):
            continue
        table = load_element_table(os.path.join(directory, name), grid)
        if table.symbol in tables:
            raise ValidationError(f"element {table.symbol} defined twice in {directory}")
        tables[table.symbol] = table
    return tables


@dataclass(frozen=True)
class Component:
    element: str
    w_mean: float
    w_std: float = 0.0


@dataclass(frozen=True)
class MaterialDefinition:
    """Nominal composition of a material and its variability.

    Density variation (``density_std``) and composition variation
    (``w_std`` per component, possibly including an ``Air`` component) are
    independent knobs; neither is claimed to be the canonical way of
    folding in packing-density effects.
    """

    name: str
    class_label: str
    density_mean: float
    density_std: float
    components: tuple[Component, ...]

    def __post_init__(self):
        object.__setattr__(self, "components", tuple(self.components))
        where = f"material '{self.name}'"
        if self.class_label not in CLASS_LABELS:
            raise ValidationError(f"{where}: class must be one of {CLASS_LABELS}, got {self.class_label!r}")
        if not self.density_mean > 0:
            raise ValidationError(f"{where}: density_mean must be positive")
        if self.density_std < 0:
            raise ValidationError(f"{where}: density_std must be non-negative")
        if not self.components:
            raise ValidationError(f"{where}: needs at least one component")
        seen = set()
        for c in self.components:
            if c.element in seen:
                raise ValidationError(f"{where}: element {c.element} listed twice")
            seen.add(c.element)
            if c.w_std < 0:
                raise ValidationError(f"{where}: w_std of {c.element} is negative")
            if not 0 <= c.w_mean <= 1:
                raise ValidationError(f"{where}: w_mean of {c.element} outside [0, 1]")
        total = sum(c.w_mean for c in self.components)
        if abs(total - 1.0) > 1e-6:
            raise ValidationError(f"{where}: weight fractions sum to {total:.6g}, not 1")

    @property
    def elements(self) -> tuple[str, ...]:
        return tuple(c.element for c in self.components)

    @property
    def w_mean(self) -> np.ndarray:
        return np.array([c.w_mean for c in self.components])

    @property
    def w_std(self) -> np.ndarray:
        return np.array([c.w_std for c in self.components])

    @property
    def is_deterministic(self) -> bool:
        return self.density_std == 0 and all(c.w_std == 0 for c in self.components)

    def to_block(self) -> Block:
        b = Block("material", {
            "name": self.name,
            "class": self.class_label,
            "density_mean": float(self.density_mean),
            "density_std": float(self.density_std),
        })
        for c in self.components:
            b.children.append(Block("component", {
                "element": c.element, "w_mean": float(c.w_mean), "w_std": float(c.w_std),
            }))
        return b


def _material_from_block(block: Block, path) -> MaterialDefinition:
    def num(b, key, default=None):
        value = b.fields.get(key, default) if default is not None else b.require(key, path)
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ParseError(f"'{key}' must be numeric, got {value!r}", path, b.line)
        return float(value)

    components = []
    for cb in block.blocks("component"):
        components.append(Component(str(cb.require("element", path)), num(cb, "w_mean"), num(cb, "w_std", 0.0)))
    return MaterialDefinition(
        name=str(block.require("name", path)),
        class_label=str(block.require("class", path)),
        density_mean=num(block, "density_mean"),
        density_std=num(block, "density_std", 0.0),
        components=tuple(components),
    )


def load_material_library(path) -> list[MaterialDefinition]:
    materials = []
    names = set()
    for block in parse_file(path):
        if block.kind != "material":
            raise ParseError(f"unexpected top-level block '{block.kind}'", path, block.line)
        m = _material_from_block(block, path)
        if m.name in names:
            raise ValidationError(f"duplicate material name '{m.name}' in {path}")
        names.add(m.name)
        materials.append(m)
    return materials


def dump_material_library(materials) -> str:
    return dump_blocks([m.to_block() for m in materials])


def save_material_library(materials, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dump_material_library(materials))


def shipped_library_path() -> Path:
    return DATA_DIR / "library.txt"


def shipped_elements_dir() -> Path:
    return DATA_DIR / "elements"
