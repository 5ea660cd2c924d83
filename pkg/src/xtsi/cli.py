"""Command-line front end: ``xtsi stats|sweep|validate|bin-edges|volume-ratio``."""

from __future__ import annotations

import argparse
import hashlib
import logging
import os
import sys
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import __version__
from .errors import ConfigurationError, XtsiError
from .forward_model import save_pixel_distribution
from .material_model import MaterialStats, estimate_material_stats, load_material_stats, save_material_stats
from .oracles import ValidationConfig, mc_validate, validation_problem
from .scenario_engine import (
    CORR_MODES,
    VARIANTS,
    ScenarioConfig,
    build_scenario,
    format_sweep_csv,
    run_sweep,
    volume_ratio_study,
)
from .spectral_data import (
    EnergyGrid,
    SourceSpectrum,
    kramers_spectrum,
    load_element_tables,
    load_material_library,
    load_spectrum,
    shipped_elements_dir,
    shipped_library_path,
)
from .structured import dump_blocks, parse_file

log = logging.getLogger("xtsi")

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_USAGE = 2


@dataclass(frozen=True)
class RunManifest:
    command: str
    config: Path | None
    library: Path
    elements: Path
    spectrum: Path | None
    out: Path | None
    seed: int | None
    threads: int

    def __post_init__(self):
        for label in ("config", "library", "elements", "spectrum"):
            path = getattr(self, label)
            if path is not None and not Path(path).exists():
                raise ConfigurationError(f"--{label} path does not exist: {path}")

    @classmethod
    def from_args(cls, args) -> "RunManifest":
        def opt(value):
            return None if value is None else Path(value)

        return cls(args.command, opt(args.config), Path(args.library or shipped_library_path()),
                   Path(args.elements or shipped_elements_dir()), opt(args.spectrum), opt(args.out),
                   args.seed, args.threads)

    def scenario_config(self) -> ScenarioConfig:
        cfg = ScenarioConfig()
        if self.config is not None:
            blocks = [b for b in parse_file(self.config) if b.kind == "scenario"]
            if blocks:
                cfg = ScenarioConfig.from_block(blocks[0], self.config)
        if self.seed is not None:
            cfg = replace(cfg, seed=self.seed)
        return cfg

    def validation_config(self) -> ValidationConfig:
        if self.config is not None:
            for block in parse_file(self.config):
                if block.kind == "validate":
                    return ValidationConfig.from_block(block, self.config)
        return ValidationConfig()

    def output_dir(self) -> Path | None:
        if self.out is not None:
            self.out.mkdir(parents=True, exist_ok=True)
        return self.out


def cache_dir() -> Path:
    root = os.environ.get("XTSI_CACHE_DIR")
    return Path(root) if root else Path.home() / ".cache" / "xtsi"


def stats_cache_key(definition, elements, grid: EnergyGrid, n_realizations: int, seed: int) -> str:
    h = hashlib.sha256()
    h.update(dump_blocks([definition.to_block()]).encode())
    for symbol in definition.elements:
        table = elements[symbol]
        h.update(symbol.encode())
        h.update(np.ascontiguousarray(table.mass_attenuation).tobytes())
    h.update(np.ascontiguousarray(grid.energies).tobytes())
    h.update(f"{n_realizations}:{seed}".encode())
    return h.hexdigest()[:20]


class Context:
    """Loaded inputs shared by the subcommands."""

    def __init__(self, manifest: RunManifest):
        self.manifest = manifest
        self.cfg = manifest.scenario_config()
        self.grid = EnergyGrid.uniform(self.cfg.e_min, self.cfg.e_max, self.cfg.n_energies)
        self.library = load_material_library(manifest.library)
        self.elements = load_element_tables(manifest.elements, self.grid)
        self.spectrum = self._spectrum()

    def _spectrum(self) -> SourceSpectrum:
        cfg = self.cfg
        if self.manifest.spectrum is not None:
            return load_spectrum(self.manifest.spectrum, self.grid, 1.0, cfg.exposure_time)
        filt = None
        if cfg.filter_thickness_cm > 0:
            if cfg.filter_element not in self.elements:
                raise ConfigurationError(f"filter element {cfg.filter_element!r} has no attenuation table")
            filt = self.elements[cfg.filter_element]
        return kramers_spectrum(self.grid, cfg.kvp, filt, cfg.filter_thickness_cm,
                                exposure_time=cfg.exposure_time)

    def material_stats(self, threads: int = 1, report=None) -> dict[str, MaterialStats]:
        """Statistics for every library material, reusing cached results by content hash."""
        out = {}
        root = cache_dir() / "stats"
        for d in self.library:
            key = stats_cache_key(d, self.elements, self.grid, self.cfg.n_realizations, self.cfg.seed)
            where = root / key
            if (where / f"{d.name}.mu0.csv").exists():
                out[d.name] = load_material_stats(where, d.name)
                status = "cached"
            else:
                out[d.name] = estimate_material_stats(d, self.elements, self.grid, self.cfg.n_realizations,
                                                      self.cfg.seed, threads)
                save_material_stats(out[d.name], where)
                status = "computed"
            if report is not None:
                report(d.name, status, where)
        return out


def _parse_bins(text: str) -> tuple[int, ...]:
    try:
        bins = tuple(int(b) for b in text.split(",") if b.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"bins must be comma-separated integers, got {text!r}") from None
    if not bins or min(bins) < 1:
        raise argparse.ArgumentTypeError("bins must be positive")
    return bins


def _choices_list(allowed):
    def parse(text: str) -> tuple[str, ...]:
        values = tuple(v.strip() for v in text.split(",") if v.strip())
        bad = [v for v in values if v not in allowed]
        if not values or bad:
            raise argparse.ArgumentTypeError(f"choose from {', '.join(allowed)}")
        return values
    return parse


def cmd_stats(manifest: RunManifest, args) -> int:
    ctx = Context(manifest)
    out = manifest.output_dir()
    stats = ctx.material_stats(manifest.threads,
                               report=lambda name, status, where: print(f"{name}: {status} ({where})"))
    if out is not None:
        for s in stats.values():
            save_material_stats(s, out)
    return EXIT_OK


PLOT_TEMPLATE = '''"""Plot {ylabel} against photon budget from a sweep CSV (requires matplotlib)."""
import csv
import sys
from collections import defaultdict

import matplotlib.pyplot as plt

path = sys.argv[1] if len(sys.argv) > 1 else {csv_name!r}
curves = defaultdict(list)
with open(path) as fh:
    for row in csv.DictReader(fh):
        key = (row["variant"], row["corr_mode"], int(row["n_bins"]))
        curves[key].append((float(row["n0"]), float(row["{lo}"]), float(row["{hi}"])))

fig, ax = plt.subplots(figsize=(7, 5))
for (variant, mode, bins), pts in sorted(curves.items()):
    pts.sort()
    n0 = [p[0] for p in pts]
    line, = ax.plot(n0, [p[2] for p in pts], label=f"{{variant}}, {{mode}}, {{bins}} bin(s)")
    ax.plot(n0, [p[1] for p in pts], "--", color=line.get_color())
ax.set_xscale("log")
ax.set_yscale("{yscale}")
ax.set_xlabel("photon budget N0")
ax.set_ylabel("{ylabel}")
ax.legend(fontsize="small")
fig.tight_layout()
fig.savefig({png_name!r}, dpi=150)
'''


def emit_plot_scripts(out: Path, csv_name: str) -> list[Path]:
    specs = [
        ("plot_pe.py", "pe_lower", "pe_upper", "symlog", "error probability bounds", "pe_bounds.png"),
        ("plot_is.py", "is_lower_bits", "is_upper_bits", "linear", "I_S bounds (bits)", "is_bounds.png"),
        ("plot_gap.py", "hc_minus_is_lower", "hc_minus_is_upper", "log", "H(C) - I_S (bits)", "gap_bounds.png"),
    ]
    paths = []
    for name, lo, hi, yscale, ylabel, png in specs:
        path = out / name
        path.write_text(PLOT_TEMPLATE.format(csv_name=csv_name, lo=lo, hi=hi, yscale=yscale,
                                             ylabel=ylabel, png_name=png), encoding="utf-8")
        paths.append(path)
    return paths


def cmd_sweep(manifest: RunManifest, args) -> int:
    ctx = Context(manifest)
    cfg = ctx.cfg
    overrides = {}
    if args.variant:
        overrides["variants"] = args.variant
    if args.bins:
        overrides["bins"] = args.bins
    if args.corr_mode:
        overrides["corr_modes"] = args.corr_mode
    cfg = replace(cfg, **overrides)
    if manifest.out is None and (args.emit_plots or args.dump_distributions):
        raise ConfigurationError("--emit-plots and --dump-distributions need --out")
    stats = ctx.material_stats(manifest.threads)
    scenario = build_scenario(cfg, ctx.library, stats, ctx.spectrum)
    try:
        rows = run_sweep(scenario, manifest.threads)
    except XtsiError as exc:
        raise type(exc)(f"sweep with config {manifest.config}: {exc}") from exc
    text = format_sweep_csv(rows)
    out = manifest.output_dir()
    if out is None:
        sys.stdout.write(text)
    else:
        (out / "sweep.csv").write_text(text, encoding="utf-8")
        print(f"wrote {len(rows)} rows to {out / 'sweep.csv'}")
        if args.emit_plots:
            for path in emit_plot_scripts(out, "sweep.csv"):
                print(f"wrote {path}")
        if args.dump_distributions:
            n0 = max(cfg.n0_values)
            for b in cfg.bins:
                for mode in cfg.corr_modes:
                    target = out / "distributions" / f"bins{b}_{mode}"
                    target.mkdir(parents=True, exist_ok=True)
                    for k, pixels in enumerate(scenario.pixel_distributions(n0, b, "combined", mode)):
                        for p, px in enumerate(pixels):
                            save_pixel_distribution(px, target / f"object{k:04d}_pixel{p:02d}.csv")
            print(f"wrote distributions under {out / 'distributions'}")
    return EXIT_OK


def cmd_validate(manifest: RunManifest, args) -> int:
    ctx = Context(manifest)
    vcfg = manifest.validation_config()
    if args.bins:
        if len(args.bins) != 1:
            raise ConfigurationError("validate takes a single bin count")
        vcfg = replace(vcfg, n_bins=args.bins[0])
    stats = ctx.material_stats(manifest.threads)
    problem = validation_problem(ctx.cfg, vcfg, ctx.library, ctx.elements, stats, ctx.spectrum)
    report = mc_validate(problem, vcfg.n_samples, ctx.cfg.seed)
    text = report.to_text()
    out = manifest.output_dir()
    if out is None:
        sys.stdout.write(text)
    else:
        (out / "oracle_report.txt").write_text(text, encoding="utf-8")
    for check in report.failures:
        print(f"FAILED {check.name}: {check.value!r} outside [{check.low!r}, {check.high!r}]", file=sys.stderr)
    return EXIT_OK if report.passed else EXIT_CHECK_FAILED


def cmd_bin_edges(manifest: RunManifest, args) -> int:
    ctx = Context(manifest)
    stats = ctx.material_stats(manifest.threads)
    scenario = build_scenario(ctx.cfg, ctx.library, stats, ctx.spectrum)
    lines = ["n_bins,edges_keV"]
    for b in args.bins or ctx.cfg.bins:
        lines.append(f"{b}," + " ".join(f"{e:.6f}" for e in scenario.bin_edges(b)))
    _emit(manifest, "bin_edges.csv", "\n".join(lines) + "\n")
    return EXIT_OK


def cmd_volume_ratio(manifest: RunManifest, args) -> int:
    ctx = Context(manifest)
    stats = ctx.material_stats(manifest.threads)
    scenario = build_scenario(ctx.cfg, ctx.library, stats, ctx.spectrum)
    lines = ["n_bins,mean_log10_r,std_log10_r,min_log10_r,max_log10_r,one_bin_checks,one_bin_violations"]
    violations = 0
    for b in args.bins or ctx.cfg.bins:
        study = volume_ratio_study(scenario, b)
        r = study.log10_ratios
        lines.append(f"{b},{study.mean:.6f},{study.std:.6f},{r.min():.6f},{r.max():.6f},"
                     f"{study.one_bin_checks},{study.one_bin_violations}")
        violations += study.one_bin_violations
    _emit(manifest, "volume_ratio.csv", "\n".join(lines) + "\n")
    return EXIT_OK if violations == 0 else EXIT_CHECK_FAILED


def _emit(manifest: RunManifest, name: str, text: str) -> None:
    out = manifest.output_dir()
    if out is None:
        sys.stdout.write(text)
    else:
        (out / name).write_text(text, encoding="utf-8")


COMMANDS = {
    "stats": (cmd_stats, "estimate (or load cached) material statistics for the library"),
    "sweep": (cmd_sweep, "photon-budget sweep of information and error-probability bounds"),
    "validate": (cmd_validate, "Monte Carlo check of the analytic model on a small fixture"),
    "bin-edges": (cmd_bin_edges, "count-balanced energy-bin edges for the ensemble"),
    "volume-ratio": (cmd_volume_ratio, "correlated vs uncorrelated noise-ellipsoid volume ratios"),
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="structured-text config with 'scenario' and 'validate' blocks")
    common.add_argument("--library", help="material library file (default: shipped synthetic library)")
    common.add_argument("--elements", help="directory of element attenuation tables (default: shipped)")
    common.add_argument("--spectrum", help="two-column source spectrum file (default: filtered Kramers)")
    common.add_argument("--out", help="output directory (created if absent); stdout when omitted")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--threads", type=int, default=1, help="worker cap; results do not depend on it")
    common.add_argument("--bins", type=_parse_bins, help="comma-separated bin counts, e.g. 1,2,3")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    parser = argparse.ArgumentParser(prog="xtsi", description=__doc__)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    parsers = {name: sub.add_parser(name, parents=[common], help=text, description=text)
               for name, (_, text) in COMMANDS.items()}
    sweep = parsers["sweep"]
    sweep.add_argument("--variant", type=_choices_list(VARIANTS),
                       help=f"comma-separated model variants from {', '.join(VARIANTS)}")
    sweep.add_argument("--corr-mode", type=_choices_list(CORR_MODES),
                       help=f"comma-separated correlation modes from {', '.join(CORR_MODES)}")
    sweep.add_argument("--emit-plots", action="store_true", help="write matplotlib scripts next to the CSV")
    sweep.add_argument("--dump-distributions", action="store_true",
                       help="write per-pixel combined-model distributions at the largest N0")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads < 1:
        parser.error("--threads must be at least 1")
    try:
        manifest = RunManifest.from_args(args)
        handler = COMMANDS[args.command][0]
        return handler(manifest, args)
    except (XtsiError, OSError) as exc:
        print(f"xtsi {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
