#!/usr/bin/env python3
"""Command line entry point.

    python coag_cli.py run --config configs/constant_kernel.json --out runs/constant
    python coag_cli.py continue --config configs/constant_kernel.json --out runs/family
    python coag_cli.py verify --suite all --seed 0 --out runs/verify
    python coag_cli.py probe --config configs/probe_lambda_1.5.json --out runs/probe

Exit codes: 0 when every enabled check passes, 1 for usage or configuration
errors, 2 when a scientific check fails.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import os
import sys
import tempfile
from pathlib import Path
from typing import List, Optional

import numpy as np
from dotenv import load_dotenv

from coag_config import RunConfig, load_config
from coag_errors import CoagError, ConfigError
from coag_op import TestFunction, build_pair_table
from coag_verify import SUITES, run_suite
from diagnostics import stationarity_residual
from evolution import (
    FamilyEntry,
    SteadyFamily,
    delta_continuation,
    nonexistence_probe,
    solve_through_reduction,
)
from grid import Grid
from kernels import GeneralKernel, HypothesisReport, verify_hypotheses
from sources import check_admissible

logger = logging.getLogger(__name__)

EXIT_OK, EXIT_USAGE, EXIT_CHECKS = 0, 1, 2
# number residual of the back-transformed state at the smallest delta
REDUCTION_RESIDUAL_TOL = 1e-3
# kernel hypothesis samples drawn with the config seed before solving
HYPOTHESIS_SAMPLES = 2000


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"❌ {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def configure_logging() -> None:
    level = os.getenv("COAGSTAT_LOG_LEVEL", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")


# ---------------------------------------------------------------- writers

def _clean(obj):
    """JSON-safe copy: numpy scalars to Python, non-finite floats to None."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_clean(v) for v in obj.tolist()]
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        value = float(obj)
        return value if math.isfinite(value) else None
    return obj


def atomic_write(path: Path, text: str) -> None:
    """Write to a temporary file next to ``path`` and rename it into place."""
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_json(path: Path, payload: dict) -> None:
    atomic_write(path, json.dumps(_clean(payload), indent=2, allow_nan=False) + "\n")


def _csv_text(header: List[str], rows) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow(["%.17g" % float(v) for v in row])
    return buffer.getvalue()


def write_distribution(path: Path, grid: Grid, values) -> None:
    rows = zip(grid.pivots, grid.widths, np.asarray(values, dtype=float))
    atomic_write(path, _csv_text(["x", "dx", "phi"], rows))


def write_trajectory(path: Path, record) -> None:
    atomic_write(path, _csv_text(["t", "M0", "Mlambda", "M1", "M1plambda", "overflow_mass"], record.rows()))


# ---------------------------------------------------------------- runs

def _solve(config: RunConfig, deltas) -> tuple:
    """Continuation for the configured kernel; general kernels go through their reduction.

    Returns the family and, per entry, the distribution in the original variables.
    """
    kernel = config.build_kernel()
    source = config.build_source()
    grid = config.build_grid()
    if source.family != "zero":
        check_admissible(source)
    params = config.evolve_params()
    settings = config.diagnostic_settings()
    if isinstance(kernel, GeneralKernel):
        reduced = solve_through_reduction(kernel, deltas, source, grid, params, settings)
        extras = [_reduction_summary(kernel, reduced.reduction, grid, entry, phi)
                  for entry, phi in zip(reduced.family.entries, reduced.original)]
        return reduced.family, [phi.values for phi in reduced.original], extras
    family = delta_continuation(deltas, kernel, source, grid, params, settings)
    return family, [e.phi.values for e in family.entries], [None] * len(family.entries)


def _reduction_summary(kernel: GeneralKernel, reduction, grid: Grid, entry: FamilyEntry, phi) -> dict:
    """Residuals of the back-transformed state for the original kernel without efflux."""
    table = build_pair_table(kernel, grid)
    battery = [TestFunction("one", lambda x: np.ones_like(x))]
    for a in (1e1, 1e2):
        battery.append(TestFunction(f"min(x,{a:g})/{a:g}", lambda x, a=a: np.minimum(x, a) / a))
    residuals = stationarity_residual(table, grid, phi, entry.problem.source_rates, 0.0, battery)
    return {"theta": reduction.theta, "reduced_lambda": reduction.reduced_lambda,
            "original_residuals": [r.to_dict() for r in residuals],
            "residual_tol": REDUCTION_RESIDUAL_TOL,
            "pass": residuals[0].value <= REDUCTION_RESIDUAL_TOL}


def _entry_report(entry: FamilyEntry, extra: Optional[dict], hypotheses: HypothesisReport) -> dict:
    report = entry.report.to_dict()
    report["steps"] = entry.result.steps
    report["blew_up"] = entry.result.blew_up
    report["hypotheses"] = hypotheses.to_dict()
    if extra is not None:
        report["reduction"] = extra
    return report


def _write_entry(out: Path, entry: FamilyEntry, values, extra: Optional[dict], hypotheses: HypothesisReport) -> None:
    write_distribution(out / "distribution.csv", entry.problem.grid, values)
    write_trajectory(out / "trajectory.csv", entry.result.record)
    write_json(out / "report.json", _entry_report(entry, extra, hypotheses))


def _banner(title: str) -> None:
    print("\n" + "=" * 80)
    print(title)
    print("=" * 80)


def _print_entry(entry: FamilyEntry) -> None:
    status = "✅" if entry.report.passed else "❌"
    print(f"{status} delta={entry.delta:g} converged={entry.result.converged} "
          f"steps={entry.result.steps} residual={entry.result.residual:.3e}")
    for failure in entry.report.failures():
        print(f"   ⚠️  {failure}")


def _check_kernel(config: RunConfig) -> HypothesisReport:
    report = verify_hypotheses(config.build_kernel(), HYPOTHESIS_SAMPLES, config.seed)
    print(f"{'✅' if report.passed else '❌'} kernel hypotheses on {report.samples} samples (seed {config.seed})")
    return report


def _family_passed(family: SteadyFamily, extras, hypotheses: HypothesisReport) -> bool:
    if not family.entries or not family.passed or not hypotheses.passed:
        return False
    if extras[-1] is not None and not extras[-1]["pass"]:
        print(f"❌ original-kernel residual above {REDUCTION_RESIDUAL_TOL:g} at delta={family.last.delta:g}")
        return False
    return True


def cmd_run(config_path: Path, out: Path) -> int:
    config = load_config(config_path)
    _banner(f"coagstat run: {config_path}")
    hypotheses = _check_kernel(config)
    family, originals, extras = _solve(config, config.deltas)
    entry = family.last
    _write_entry(out, entry, originals[-1], extras[-1], hypotheses)
    _print_entry(entry)
    for flag in family.flags:
        print(f"❌ {flag}")
    passed = _family_passed(family, extras, hypotheses)
    print(f"\n{'✅' if passed else '❌'} outputs written to {out}")
    return EXIT_OK if passed else EXIT_CHECKS


def cmd_continue(config_path: Path, out: Path) -> int:
    config = load_config(config_path)
    _banner(f"coagstat continuation: {config_path}")
    hypotheses = _check_kernel(config)
    family, originals, extras = _solve(config, config.deltas)
    for index, (entry, values, extra) in enumerate(zip(family.entries, originals, extras)):
        _write_entry(out / "family" / f"delta_{index:02d}", entry, values, extra, hypotheses)
        _print_entry(entry)
    write_json(out / "continuation.json", {**family.to_dict(), "hypotheses": hypotheses.to_dict()})
    for flag in family.flags:
        print(f"❌ {flag}")
    passed = _family_passed(family, extras, hypotheses)
    print(f"\n{'✅' if passed else '❌'} {len(family.entries)} stationary states written to {out}")
    return EXIT_OK if passed else EXIT_CHECKS


def cmd_verify(suite: str, seed: int, out: Path) -> int:
    _banner(f"coagstat verify: suite={suite} seed={seed}")
    payload = run_suite(suite, seed)
    write_json(out / "verify.json", payload)
    for name, result in payload["results"].items():
        print(f"{'✅' if result['pass'] else '❌'} {name}")
    return EXIT_OK if payload["pass"] else EXIT_CHECKS


def cmd_probe(config_path: Path, out: Path) -> int:
    config = load_config(config_path)
    kernel = config.build_kernel()
    if isinstance(kernel, GeneralKernel):
        raise ConfigError("the probe runs on sum_power kernels", path=str(config_path), line=1)
    _banner(f"coagstat probe: {config_path}")
    report = nonexistence_probe(kernel, config.build_source(), config.probe_settings(),
                                config.evolve_params(), config.diagnostic_settings())
    write_json(out / "probe.json", report.to_dict())
    for rung in report.rungs:
        print(f"   x_max={rung.x_max:g} M_lambda={rung.moments[f'{report.lam:g}']:.6g}")
    marker = "✅" if report.matches_expectation else "❌"
    print(f"{marker} verdict {report.verdict} (expected {report.expected})")
    return EXIT_OK if report.matches_expectation else EXIT_CHECKS


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="coag_cli.py",
                     description="Stationary coagulation with a source: solver and checks")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    for name, text in (("run", "solve one configuration"),
                       ("continue", "delta continuation with per-delta outputs"),
                       ("probe", "domain-ladder existence probe")):
        p = sub.add_parser(name, help=text)
        p.add_argument("--config", type=Path, required=True, help="path to the JSON configuration")
        p.add_argument("--out", type=Path, required=True, help="output directory")

    p = sub.add_parser("verify", help="property suites")
    p.add_argument("--suite", choices=SUITES, default="all")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True, help="output directory")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    load_dotenv()
    configure_logging()
    args = build_parser().parse_args(argv)
    try:
        if args.command == "run":
            return cmd_run(args.config, args.out)
        if args.command == "continue":
            return cmd_continue(args.config, args.out)
        if args.command == "probe":
            return cmd_probe(args.config, args.out)
        return cmd_verify(args.suite, args.seed, args.out)
    except ConfigError as e:
        print(f"❌ {e}", file=sys.stderr)
        return EXIT_USAGE
    except CoagError as e:
        print(f"❌ Failed to set up the run: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
