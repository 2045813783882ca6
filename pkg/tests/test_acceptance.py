"""Acceptance criteria, one test per criterion.

Each test prints a single PASS/FAIL line with the measured quantities; the
lines are repeated in the terminal summary.
"""

import csv
import json
import math
from pathlib import Path

import numpy as np
import pytest

from parorb import optimizer as opt
from parorb.cli import main
from parorb.energy import apply_hamiltonian, build_hamiltonian, density, evaluate, total_energy
from parorb.manifold import gram, orthonormality_error, stiefel_gradient, subspace_rotate
from parorb.optimizer import OptimizerParams, solve
from parorb.oracle import fd_gradient_check, ks_residual, linear_ground_energy

from conftest import linear_well_problem, random_orthogonal, random_orthonormal, two_well_problem

CONFIGS = Path(__file__).resolve().parent.parent / "configs"
ALGORITHMS = ("optm_qr", "opt_par", "opt_par_mod")


@pytest.fixture(scope="module")
def linear_reference(linear_problem):
    return linear_ground_energy(linear_problem, 4)


def test_criterion_1_linear_optimality(criterion, linear_runs, linear_reference):
    errors = {a: abs(linear_runs[a].energy.total - linear_reference) for a in ALGORITHMS}
    times = {a: linear_runs[a].wall_time for a in ALGORITHMS}
    ok = all(linear_runs[a].converged for a in ALGORITHMS)
    ok &= max(errors.values()) <= 1e-8 and max(times.values()) < 60.0
    detail = "; ".join(f"{a} |dE|={errors[a]:.2e} t={times[a]:.1f}s" for a in ALGORITHMS)
    assert criterion(1, ok, f"linear vs dense (tol 1e-8, <60 s): {detail}")


def test_criterion_2_nonlinear_agreement(criterion, nonlinear_runs):
    E = {a: nonlinear_runs[a].energy.total for a in ALGORITHMS}
    d_par = abs(E["opt_par"] - E["optm_qr"])
    d_mod = abs(E["opt_par_mod"] - E["optm_qr"])
    ok = all(r.converged for r in nonlinear_runs.values()) and d_par <= 1e-6 and d_mod <= 1e-6
    assert criterion(
        2,
        ok,
        f"E(optm_qr)={E['optm_qr']:.12f} |opt_par-optm_qr|={d_par:.2e} "
        f"|opt_par_mod-optm_qr|={d_mod:.2e} (tol 1e-6)",
    )


def test_criterion_3_ks_residual(criterion, nonlinear_runs, nonlinear_problem):
    res = {a: ks_residual(nonlinear_problem, nonlinear_runs[a].orbitals) for a in ALGORITHMS}
    ok = max(res.values()) <= 1e-5
    detail = " ".join(f"{a}={res[a]:.2e}" for a in ALGORITHMS)
    assert criterion(3, ok, f"KS residual (tol 1e-5): {detail}")


def test_criterion_4_invariants(criterion, nonlinear_runs, monkeypatch):
    checks = {}
    p = two_well_problem(200)
    grid = p.grid

    orth_errors = []
    real = opt.orthonormalize

    def checked(g, W, G=None):
        out = real(g, W, G)
        orth_errors.append(orthonormality_error(g, out))
        return out

    monkeypatch.setattr(opt, "orthonormalize", checked)
    for algorithm, kw in (("optm_qr", {}), ("opt_par", {}), ("opt_par_mod", dict(n_org=2, n_diag=50))):
        solve(p, 4, OptimizerParams(algorithm=algorithm, max_inner=500, **kw))
    monkeypatch.undo()
    checks["orth"] = (max(orth_errors), 1e-10)

    U = random_orthonormal(grid, 4, seed=11)
    P = random_orthogonal(4, seed=12)
    ev = evaluate(p, U)
    G, sigma = stiefel_gradient(grid, U, ev.HW)
    checks["tangency"] = (float(np.max(np.abs(gram(grid, G, U)))), 1e-10)
    E0 = ev.energy.total
    checks["E(UP)"] = (abs(total_energy(P.T @ U, p).total - E0) / abs(E0), 1e-12)
    checks["rho(UP)"] = (float(np.max(np.abs(density(P.T @ U) - density(U)))), 1e-13)

    W, _, _ = subspace_rotate(grid, U, sigma)
    state = build_hamiltonian(U, p)
    new_sigma = gram(grid, apply_hamiltonian(state, W), W)
    checks["rotate offdiag"] = (float(np.max(np.abs(new_sigma - np.diag(np.diag(new_sigma))))), 1e-8)
    checks["rotate rho"] = (float(np.max(np.abs(density(W) - density(U)))), 1e-12)

    ledger_gap = 0.0
    ineq_gap = 0.0
    for run in nonlinear_runs.values():
        for r in run.records:
            if r.did_orth:
                ledger_gap = max(ledger_gap, r.accepted_energy - r.c_next)
                ineq_gap = max(ineq_gap, r.accepted_energy - r.accept_bound)
    checks["C>=E"] = (ledger_gap, 0.0)
    checks["accept-ineq"] = (ineq_gap, 0.0)

    ok = all(v <= tol for v, tol in checks.values())
    detail = " ".join(f"{k}={v:.1e}" for k, (v, _) in checks.items())
    assert criterion(4, ok, f"invariants: {detail}")


def test_criterion_5_fd_gradient(criterion):
    worst = {}
    for name, problem, tol in (
        ("linear", linear_well_problem(), 1e-7),
        ("nonlinear", two_well_problem(), 1e-5),
    ):
        grid = problem.grid
        U = random_orthonormal(grid, 4, seed=21)
        rng = np.random.default_rng(22)
        errs = []
        for _ in range(20):
            D = rng.standard_normal(U.shape)
            D -= gram(grid, D, U) @ U
            errs.append(fd_gradient_check(problem, U, D, t=1e-5))
        worst[name] = (max(errs), tol)
    ok = all(v <= tol for v, tol in worst.values())
    detail = " ".join(f"{k}={v:.2e} (tol {tol:g})" for k, (v, tol) in worst.items())
    assert criterion(5, ok, f"FD gradient, 20 directions, t=1e-5: {detail}")


def test_criterion_6_near_identity(criterion, nonlinear_runs):
    orth = [r for r in nonlinear_runs["opt_par_mod"].records if r.did_orth][-10:]
    off = max(r.offdiag_max for r in orth)
    dev = max(r.diag_dev_max for r in orth)
    ok = len(orth) == 10 and off < 0.1 and dev < 0.1
    assert criterion(6, ok, f"last 10 checkpoints offdiag_max={off:.2e} diag_dev_max={dev:.2e} (tol 0.1)")


def test_criterion_7_energy_reduction(criterion, nonlinear_runs):
    parts = []
    ok = True
    for a in ALGORITHMS:
        run = nonlinear_runs[a]
        energies = [r.energy for r in run.records if math.isfinite(r.energy)]
        e_min = run.energy.total
        gaps = [e - e_min for e in energies]
        ok &= min(gaps) >= 0.0 and gaps[-1] < 1e-10
        parts.append(f"{a} min={min(gaps):.1e} final={gaps[-1]:.1e}")
    assert criterion(7, ok, "E-E_min >= 0, final < 1e-10: " + "; ".join(parts))


def _run_cli(tmp_path, config, tag, threads, overrides=""):
    d = tmp_path / f"{tag}_t{threads}"
    d.mkdir()
    text = (CONFIGS / config).read_text()
    for line in overrides.splitlines():
        key = line.split("=")[0].strip()
        text = "\n".join(
            l for l in text.splitlines() if not l.strip().startswith(key + " ")
        )
        text = text.replace("[optimizer]", "[optimizer]\n" + line, 1)
    (d / config).write_text(text)
    code = main(["run", str(d / config), "--threads", str(threads)])
    stem = config.removesuffix(".toml")
    with open(d / "out" / f"{stem}_log.csv", newline="") as fh:
        rows = [{k: v for k, v in r.items() if k != "wall_ms"} for r in csv.DictReader(fh)]
    summary = json.loads((d / "out" / f"{stem}_summary.json").read_text())
    return code, rows, summary


@pytest.mark.slow
def test_criterion_8_determinism_and_parallel_fraction(criterion, tmp_path):
    identical = {}
    for config, overrides in (("two_well_1d.toml", ""), ("box_3d.toml", "max_inner = 60")):
        logs = [_run_cli(tmp_path, config, config[:3], t, overrides)[1] for t in (1, 2, 8)]
        identical[config] = all(log == logs[0] for log in logs[1:]) and len(logs[0]) > 1
    code, _, summary = _run_cli(tmp_path, "box_3d.toml", "full", 1)
    frac = summary["parallel_fraction"]
    ok = all(identical.values()) and code == 0 and frac > 0.5
    detail = " ".join(f"{k}:{'identical' if v else 'DIFFER'}" for k, v in identical.items())
    assert criterion(
        8,
        ok,
        f"threads 1/2/8 logs {detail}; 3D N=16 24^3 exit={code} "
        f"iters={summary['iterations']} parallel_fraction={frac:.3f} (tol > 0.5)",
    )


def test_criterion_9_outer_loop(criterion):
    coarse = linear_well_problem(199)
    params = OptimizerParams(outer_levels=2, max_inner=20000)
    warm = solve(coarse, 4, params)
    fine = warm.problem
    assert fine.grid.n_points == 399
    ref = linear_ground_energy(fine, 4)
    cold = solve(fine, 4, OptimizerParams(max_inner=20000))
    err = abs(warm.energy.total - ref)
    warm_iters = warm.level_iterations[-1]
    ok = warm.converged and cold.converged and err <= 1e-8 and warm_iters < cold.iterations
    assert criterion(
        9,
        ok,
        f"fine |dE|={err:.2e} (tol 1e-8); fine iterations warm={warm_iters} cold={cold.iterations}",
    )
