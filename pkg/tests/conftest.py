import numpy as np
import pytest

from parorb.energy import Atom, EnergyFlags, Problem
from parorb.grid import build_grid
from parorb.optimizer import OptimizerParams, solve


def random_orthonormal(grid, n, seed=0):
    from parorb.manifold import orthonormalize

    rng = np.random.default_rng(seed)
    return orthonormalize(grid, rng.standard_normal((n, grid.n_points)))


def random_orthogonal(n, seed=0):
    rng = np.random.default_rng(seed)
    Q, R = np.linalg.qr(rng.standard_normal((n, n)))
    return Q * np.sign(np.diag(R))


def linear_well_problem(points=400):
    grid = build_grid(1, [20.0], [points])
    return Problem(grid, [Atom((10.0,), 2.0, 1.0)])


def two_well_problem(points=400):
    grid = build_grid(1, [20.0], [points])
    atoms = [Atom((7.0,), 2.0, 1.0), Atom((13.0,), 2.0, 1.0)]
    return Problem(grid, atoms, EnergyFlags(hartree=True, xc=True, hartree_mode="kernel"))


NONLINEAR_RUNS = {
    "optm_qr": dict(algorithm="optm_qr"),
    "opt_par": dict(algorithm="opt_par", n_org=1),
    "opt_par_mod": dict(algorithm="opt_par_mod", n_org=2, n_diag=50),
}


@pytest.fixture(scope="session")
def linear_problem():
    return linear_well_problem()


@pytest.fixture(scope="session")
def nonlinear_problem():
    return two_well_problem()


@pytest.fixture(scope="session")
def linear_runs(linear_problem):
    return {
        alg: solve(linear_problem, 4, OptimizerParams(algorithm=alg, max_inner=20000))
        for alg in ("optm_qr", "opt_par", "opt_par_mod")
    }


@pytest.fixture(scope="session")
def nonlinear_runs(nonlinear_problem):
    return {
        name: solve(nonlinear_problem, 4, OptimizerParams(max_inner=20000, **kw))
        for name, kw in NONLINEAR_RUNS.items()
    }


_CRITERIA: list[str] = []


@pytest.fixture
def criterion(request):
    """Record and print one PASS/FAIL line for an acceptance criterion."""
    capman = request.config.pluginmanager.getplugin("capturemanager")

    def report(number, ok, detail):
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
        _CRITERIA.append(line)
        with capman.global_and_fixture_disabled():
            print("\n" + line, flush=True)
        return ok

    return report


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_CRITERIA, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
