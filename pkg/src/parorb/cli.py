"""Command-line driver: ``parorb run config.toml``.

Exit codes: 0 converged, 2 not converged within ``max_inner``, 3 stagnation
or other solver failure, 4 invalid configuration, 5 I/O error.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, RunConfig, parse_config, with_overrides
from .manifold import near_identity_diagnostic
from .optimizer import IterationRecord, SolveResult, SolverError, StagnationError, solve
from .oracle import DENSE_MAX_POINTS, dense_eigensolve, ks_residual, materialize

log = logging.getLogger("parorb")

EXIT_CONVERGED = 0
EXIT_NOT_CONVERGED = 2
EXIT_STAGNATION = 3
EXIT_CONFIG = 4
EXIT_IO = 5

LOG_COLUMNS = (
    "level",
    "iter",
    "energy",
    "grad_norm",
    "tau",
    "backtracks",
    "did_orth",
    "did_diag",
    "offdiag_max",
    "wall_ms",
)


def _fmt(x) -> str:
    if isinstance(x, bool):
        return "1" if x else "0"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    x = float(x)
    if math.isnan(x):
        return "nan"
    return repr(x)


def format_log_row(rec: IterationRecord) -> str:
    return ",".join(_fmt(getattr(rec, c)) for c in LOG_COLUMNS)


def select_logged(records, every: int) -> list:
    """Every ``every``-th iteration plus the last row of each level."""
    out = []
    for k, rec in enumerate(records):
        last_of_level = k + 1 == len(records) or records[k + 1].level != rec.level
        if rec.iter % every == 0 or last_of_level:
            out.append(rec)
    return out


def write_log(path: Path, records, every: int = 1):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write(",".join(LOG_COLUMNS) + "\n")
        for rec in select_logged(records, every):
            fh.write(format_log_row(rec) + "\n")


def write_reduction(path: Path, records):
    """``iter,energy_minus_min`` over the orthogonalized iterates of the last level.

    ``E_min`` is the final energy of the run.
    """
    if not records:
        return
    level = records[-1].level
    rows = [r for r in records if r.level == level and math.isfinite(r.energy)]
    e_min = rows[-1].energy
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write("iter,energy_minus_min\n")
        for r in rows:
            fh.write(f"{r.iter},{_fmt(r.energy - e_min)}\n")


def _finite_or_none(x):
    return None if x is None or not math.isfinite(x) else x


def build_summary(
    config: RunConfig,
    status: str,
    exit_code: int,
    records,
    result: SolveResult | None,
    extra: dict,
) -> dict:
    summary = {
        "version": __version__,
        "status": status,
        "exit_code": exit_code,
        "convergence_mode": config.optimizer.convergence_mode,
        "convergence_threshold": config.optimizer.tolerance,
        "iterations": sum(1 for r in records if r.tau > 0.0),
        "logged_wall_ms": sum(r.wall_ms for r in records),
        "restarts": sum(1 for r in records if r.restarted),
        "drift_flags": sum(1 for r in records if r.drift),
        "config": config.echo(),
    }
    if result is not None:
        summary.update(
            energy=result.energy.as_dict(),
            grad_norm=_finite_or_none(result.grad_norm),
            converged=result.converged,
            level_iterations=result.level_iterations,
            n_points=result.problem.grid.n_points,
            wall_time_s=result.wall_time,
            parallel_time_s=result.parallel_time,
            sync_time_s=result.sync_time,
            parallel_fraction=result.parallel_fraction,
        )
    summary.update(extra)
    return summary


def oracle_report(config: RunConfig, result: SolveResult) -> dict:
    problem = result.problem
    report = {}
    linear = not (problem.flags.hartree or problem.flags.xc)
    if linear and problem.grid.n_points <= DENSE_MAX_POINTS:
        vals, _ = dense_eigensolve(materialize(problem), config.problem.n_orbitals)
        ref = float(np.sum(vals))
        report.update(
            dense_reference_energy=ref,
            dense_energy_error=abs(result.energy.total - ref),
            dense_eigenvalues=[float(v) for v in vals],
        )
    return report


def run(
    config: RunConfig, *, emit_reduction: bool = False, oracle_check: bool = False
) -> int:
    """Solve, then write the iteration log and the summary. Returns the exit code."""
    problem = config.problem.build()
    records = []
    result = None
    extra = {}
    t0 = time.perf_counter()
    try:
        result = solve(
            problem, config.problem.n_orbitals, config.optimizer, workers=config.threads
        )
        records = result.records
        if result.converged:
            status, code = "converged", EXIT_CONVERGED
        else:
            status, code = "not_converged", EXIT_NOT_CONVERGED
        extra["ks_residual"] = ks_residual(result.problem, result.orbitals)
        if oracle_check:
            extra["oracle"] = oracle_report(config, result)
        final_orth = [r for r in records if r.did_orth]
        if final_orth:
            extra["final_offdiag_max"] = final_orth[-1].offdiag_max
        extra["final_near_identity"] = near_identity_diagnostic(
            result.problem.grid, result.orbitals.values
        )
    except StagnationError as exc:
        records = exc.records
        status, code = "stagnation", EXIT_STAGNATION
        extra["error"] = str(exc)
        extra["trial_energies"] = exc.trial_energies
    except (SolverError, FloatingPointError) as exc:
        records = getattr(exc, "records", [])
        status, code = "solver_error", EXIT_STAGNATION
        extra["error"] = str(exc)
    extra.setdefault("wall_time_s", time.perf_counter() - t0)

    try:
        write_log(config.io.log, records, config.io.log_every)
        if emit_reduction and records:
            write_reduction(config.io.reduction, records)
        summary = build_summary(config, status, code, records, result, extra)
        config.io.summary.parent.mkdir(parents=True, exist_ok=True)
        config.io.summary.write_text(json.dumps(summary, indent=2, default=str) + "\n")
    except OSError as exc:
        print(f"parorb: cannot write output ({exc.filename}): {exc.strerror}", file=sys.stderr)
        return EXIT_IO
    log.info("%s after %d iterations", status, sum(1 for r in records if r.tau > 0.0))
    return code


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="parorb", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("run", help="run a solve described by a TOML config")
    p.add_argument("config", type=Path)
    p.add_argument("--threads", type=int, help="orbital-parallel workers")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--log-every", type=int, help="write every k-th iteration to the log")
    p.add_argument(
        "--emit-reduction", action="store_true", help="also write the E - E_min curve"
    )
    p.add_argument(
        "--oracle-check",
        action="store_true",
        help="for small linear runs, append the dense reference energy",
    )
    p.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        config = parse_config(args.config)
        config = with_overrides(
            config, seed=args.seed, threads=args.threads, log_every=args.log_every
        )
    except ConfigError as exc:
        print(f"parorb: invalid config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"parorb: cannot read config ({args.config}): {exc.strerror}", file=sys.stderr)
        return EXIT_IO
    return run(config, emit_reduction=args.emit_reduction, oracle_check=args.oracle_check)


if __name__ == "__main__":
    sys.exit(main())
