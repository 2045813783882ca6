"""Orbital-parallel gradient solvers with BB steps and nonmonotone backtracking.

Three inner solvers share one loop:

``optm_qr``
    full ``H W - W Sigma`` direction, orthogonalization every step.
``opt_par``
    per-orbital directions ``H w_i - sigma_ii w_i``, orthogonalization every
    step, subspace rotation every ``n_diag`` steps.
``opt_par_mod``
    as ``opt_par`` but orthogonalization, energy evaluation and backtracking
    only every ``n_org`` steps; in between each orbital takes a raw BB step.

:func:`solve` wraps the inner solver in the outer grid-refinement loop.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .energy import EnergyBreakdown, Evaluation, Problem, evaluate
from .grid import Grid, prolongate_values, refine_uniform
from .manifold import (
    DegenerateSetError,
    OrbitalSet,
    diagonal_residuals,
    frobenius_norm,
    gram,
    near_identity_diagnostic,
    orthonormality_error,
    orthonormalize,
    stiefel_gradient,
    subspace_rotate,
)
from .parallel import OrbitalPool, PhaseTimer

log = logging.getLogger(__name__)

ALGORITHMS = ("optm_qr", "opt_par", "opt_par_mod")
BB_VARIANTS = ("bb1", "bb2", "alternate")
BB_TRACES = ("abs_diag", "abs_trace")
CONVERGENCE_MODES = ("grad_norm", "mean_abs", "energy_change")
DRIFT_THRESHOLD = 0.5


class SolverError(RuntimeError):
    """Base class for solver failures; carries the records logged so far."""

    def __init__(self, message: str, records=None):
        super().__init__(message)
        self.records = list(records or [])


class StagnationError(SolverError):
    def __init__(self, message: str, trial_energies=(), records=None):
        super().__init__(message, records)
        self.trial_energies = list(trial_energies)


@dataclass(frozen=True)
class OptimizerParams:
    algorithm: str = "opt_par_mod"
    bb_variant: str = "bb1"
    bb_trace: str = "abs_diag"
    rho1: float = 1e-4
    delta: float = 0.1
    eta: float = 0.85
    n_diag: int | None = 100  # None disables subspace rotation
    n_org: int = 1
    max_inner: int = 5000
    max_backtracks: int = 20
    tau_min: float = 1e-10
    tau_max: float = 1e3
    grad_tol: float = 1e-6
    mean_abs_tol: float = 5e-9
    energy_tol: float = 1e-13
    convergence_mode: str = "grad_norm"
    outer_levels: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"algorithm must be one of {ALGORITHMS}, got {self.algorithm!r}")
        if self.bb_variant not in BB_VARIANTS:
            raise ValueError(f"bb_variant must be one of {BB_VARIANTS}, got {self.bb_variant!r}")
        if self.bb_trace not in BB_TRACES:
            raise ValueError(f"bb_trace must be one of {BB_TRACES}, got {self.bb_trace!r}")
        if self.convergence_mode not in CONVERGENCE_MODES:
            raise ValueError(
                f"convergence_mode must be one of {CONVERGENCE_MODES}, "
                f"got {self.convergence_mode!r}"
            )
        if not 0.0 < self.delta < 1.0:
            raise ValueError(f"delta must lie in (0, 1), got {self.delta}")
        if not 0.0 <= self.eta < 1.0:
            raise ValueError(f"eta must lie in [0, 1), got {self.eta}")
        if not self.rho1 > 0.0:
            raise ValueError(f"rho1 must be positive, got {self.rho1}")
        if not 0.0 < self.tau_min <= self.tau_max:
            raise ValueError("tau clamp needs 0 < tau_min <= tau_max")
        if self.n_diag is not None and self.n_diag < 1:
            raise ValueError(f"n_diag must be positive, got {self.n_diag}")
        if self.n_org < 1:
            raise ValueError(f"n_org must be positive, got {self.n_org}")
        if self.max_inner < 0 or self.max_backtracks < 0:
            raise ValueError("max_inner and max_backtracks must be nonnegative")
        if self.outer_levels < 1:
            raise ValueError(f"outer_levels must be >= 1, got {self.outer_levels}")

    @property
    def orth_period(self) -> int:
        return self.n_org if self.algorithm == "opt_par_mod" else 1

    @property
    def rotation_period(self) -> int | None:
        return None if self.algorithm == "optm_qr" else self.n_diag

    @property
    def tolerance(self) -> float:
        return {
            "grad_norm": self.grad_tol,
            "mean_abs": self.mean_abs_tol,
            "energy_change": self.energy_tol,
        }[self.convergence_mode]


@dataclass
class NonmonotoneState:
    """Reference value ``C`` and weight accumulator ``Q`` of the line search.

    ``C`` is kept as an explicit convex combination of the accepted energies
    so the weights can be audited.
    """

    C: float
    Q: float = 1.0
    energies: list = field(default_factory=list)
    weights: list = field(default_factory=list)

    @classmethod
    def start(cls, energy: float) -> "NonmonotoneState":
        return cls(C=energy, Q=1.0, energies=[energy], weights=[1.0])

    def updated(self, energy: float, eta: float) -> "NonmonotoneState":
        Q_new = eta * self.Q + 1.0
        C_new = (eta * self.Q * self.C + energy) / Q_new
        scale = eta * self.Q / Q_new
        return NonmonotoneState(
            C=C_new,
            Q=Q_new,
            energies=self.energies + [energy],
            weights=[w * scale for w in self.weights] + [1.0 / Q_new],
        )


@dataclass(frozen=True)
class IterationRecord:
    level: int
    iter: int
    energy: float
    grad_norm: float
    tau: float
    backtracks: int
    did_orth: bool
    did_diag: bool
    offdiag_max: float
    wall_ms: float
    diag_dev_max: float = math.nan
    drift: bool = False
    restarted: bool = False
    # line-search audit trail for accepted orthogonalization steps
    c_ref: float = math.nan
    c_next: float = math.nan
    accept_bound: float = math.nan
    accepted_energy: float = math.nan


@dataclass
class LineSearchResult:
    tau: float
    W_tilde: np.ndarray
    W: np.ndarray
    energy: float
    payload: object
    state: NonmonotoneState
    backtracks: int
    bound: float


def _trace_terms(grid: Grid, S: np.ndarray, Y: np.ndarray, trace: str):
    w = grid.quadrature_weight
    ss = w * float(np.sum(S * S))
    yy = w * float(np.sum(Y * Y))
    diag = w * np.einsum("ij,ij->i", S, Y)
    sy = float(np.sum(np.abs(diag))) if trace == "abs_diag" else abs(float(np.sum(diag)))
    return ss, sy, yy


def bb_step(
    grid: Grid,
    S: np.ndarray,
    Y: np.ndarray,
    variant: str = "bb1",
    *,
    trace: str = "abs_diag",
    tau_min: float = 1e-10,
    tau_max: float = 1e3,
) -> float:
    """Barzilai-Borwein step shared by all orbitals.

    ``bb1 = tr<S^T S> / tr|<S^T Y>|`` and ``bb2 = tr|<S^T Y>| / tr<Y^T Y>``.
    With ``trace="abs_diag"`` the denominator sums ``|<s_i, y_i>|`` over
    orbitals; ``"abs_trace"`` takes the absolute value of the plain trace.
    Degenerate ratios are clamped to ``[tau_min, tau_max]``.
    """
    ss, sy, yy = _trace_terms(grid, S, Y, trace)
    if variant == "bb1":
        num, den = ss, sy
    elif variant == "bb2":
        num, den = sy, yy
    else:
        raise ValueError(f"unknown BB variant {variant!r}")
    with np.errstate(divide="ignore", invalid="ignore"):
        tau = num / den if den > 0.0 else math.inf
    if not math.isfinite(tau):
        tau = tau_max
    return min(max(tau, tau_min), tau_max)


def initial_step(grid: Grid, Z: np.ndarray, tau_min: float = 1e-10, tau_max: float = 1e3) -> float:
    """``min(tau_max, 1/||Z||_F)`` clamped below by ``tau_min``; 0 for a zero direction."""
    znorm = frobenius_norm(grid, Z)
    if znorm == 0.0:
        return 0.0
    with np.errstate(divide="ignore", over="ignore"):
        tau = 1.0 / znorm
    return max(min(tau, tau_max), tau_min)


def nonmonotone_search(
    W: np.ndarray,
    Z: np.ndarray,
    tau_raw: float,
    state: NonmonotoneState,
    energy_fn: Callable[[np.ndarray], tuple[float, object]],
    *,
    znorm2: float,
    rho1: float = 1e-4,
    delta: float = 0.1,
    eta: float = 0.85,
    max_backtracks: int = 20,
    retract: Callable[[np.ndarray], np.ndarray] = lambda X: X,
) -> LineSearchResult:
    """Backtrack ``tau = tau_raw * delta**s`` until
    ``E(retract(W - tau Z)) <= C - rho1 * tau * ||Z||_F^2``.

    ``energy_fn`` returns the energy and an arbitrary payload that is handed
    back with the accepted point. Raises :class:`StagnationError` after
    ``max_backtracks`` reductions.
    """
    trials = []
    for s in range(max_backtracks + 1):
        tau = tau_raw * delta**s
        W_tilde = W - tau * Z
        W_new = retract(W_tilde)
        energy, payload = energy_fn(W_new)
        trials.append(energy)
        bound = state.C - rho1 * tau * znorm2
        if energy <= bound:
            return LineSearchResult(
                tau, W_tilde, W_new, energy, payload, state.updated(energy, eta), s, bound
            )
    raise StagnationError(
        f"no admissible step after {max_backtracks} backtracks "
        f"(C = {state.C:.15e}, last trial energy {trials[-1]:.15e})",
        trial_energies=trials,
    )


def check_convergence(
    mode: str,
    tol: float,
    *,
    grid: Grid | None = None,
    gradient: np.ndarray | None = None,
    energies=(),
    gaps=None,
) -> bool:
    """Inner convergence test.

    ``grad_norm``: ``sqrt(tr<G^T G>) < tol``. ``mean_abs``: mean absolute
    entry of the gradient array ``< tol``. ``energy_change``: the mean of
    the last three relative changes ``|E_{k-1} - E_k| / (|E_{k-1}| + 1)``
    is ``< tol``; ``gaps`` gives the number of iterations between
    consecutive energies and each change is divided by its gap.
    """
    if mode == "grad_norm":
        return gradient is not None and frobenius_norm(grid, gradient) < tol
    if mode == "mean_abs":
        return gradient is not None and float(np.mean(np.abs(gradient))) < tol
    if mode == "energy_change":
        E = list(energies)
        if len(E) < 4:
            return False
        g = [1] * (len(E) - 1) if gaps is None else list(gaps)
        df = [
            abs(E[k - 1] - E[k]) / (abs(E[k - 1]) + 1.0) / g[k - 1]
            for k in range(len(E) - 3, len(E))
        ]
        return sum(df) / 3.0 < tol
    raise ValueError(f"unknown convergence mode {mode!r}")


@dataclass
class InnerResult:
    W: np.ndarray
    evaluation: Evaluation
    converged: bool
    iterations: int
    records: list
    grad_norm: float


def _choose_variant(params: OptimizerParams, l: int) -> str:
    if params.bb_variant == "alternate":
        return "bb1" if l % 2 == 1 else "bb2"
    return params.bb_variant


def run_inner(
    problem: Problem,
    W0: np.ndarray,
    params: OptimizerParams,
    *,
    level: int = 0,
    pool: OrbitalPool | None = None,
    timer: PhaseTimer | None = None,
    records: list | None = None,
) -> InnerResult:
    """Inner iteration on one grid, starting from orthonormal ``W0``."""
    grid = problem.grid
    pool = pool or OrbitalPool(1)
    timer = timer or PhaseTimer()
    records = [] if records is None else records
    n_org = params.orth_period
    n_diag = params.rotation_period
    next_diag = n_diag
    tol = params.tolerance

    W = np.atleast_2d(np.array(W0, dtype=float))
    if orthonormality_error(grid, W) > 1e-10:
        raise ValueError("initial orbitals must be orthonormal")
    t_iter = time.perf_counter()
    ev = evaluate(problem, W, pool=pool, timer=timer)
    nm = NonmonotoneState.start(ev.energy.total)
    orth_energies = [ev.energy.total]
    orth_gaps: list[int] = []
    last_orth_iter = 0
    orthonormal = True
    W_prev = Z_prev = None
    grad_norm = math.nan

    l = 0
    while True:
        gradient = None
        with timer.phase("sync"):
            if orthonormal:
                # energy_change mode skips the full gradient except at the end
                if params.algorithm == "optm_qr" or params.convergence_mode != "energy_change":
                    gradient, _ = stiefel_gradient(grid, W, ev.HW)
                    grad_norm = frobenius_norm(grid, gradient)
                else:
                    grad_norm = math.nan
                converged = check_convergence(
                    params.convergence_mode,
                    tol,
                    grid=grid,
                    gradient=gradient,
                    energies=orth_energies,
                    gaps=orth_gaps,
                )
            else:
                converged = False
        if orthonormal:
            checkpoint = (W, ev)
        energy_l = ev.energy.total if orthonormal else math.nan
        grad_l = grad_norm if orthonormal else math.nan

        if converged or l >= params.max_inner:
            if orthonormal and gradient is None:
                with timer.phase("sync"):
                    gradient, _ = stiefel_gradient(grid, W, ev.HW)
                    grad_norm = grad_l = frobenius_norm(grid, gradient)
            records.append(
                IterationRecord(
                    level, l, energy_l, grad_l, 0.0, 0, False, False, math.nan,
                    1e3 * (time.perf_counter() - t_iter),
                )
            )
            return InnerResult(W, ev, converged, l, records, grad_norm)

        if params.algorithm == "optm_qr":
            Z = gradient
        else:
            with timer.phase("parallel"):
                Z, _ = diagonal_residuals(grid, W, ev.HW)

        with timer.phase("parallel"):
            if W_prev is None:
                tau_raw = initial_step(grid, Z, params.tau_min, params.tau_max)
            else:
                tau_raw = bb_step(
                    grid,
                    W - W_prev,
                    Z - Z_prev,
                    _choose_variant(params, l),
                    trace=params.bb_trace,
                    tau_min=params.tau_min,
                    tau_max=params.tau_max,
                )

        do_orth = l % n_org == 0
        did_diag = restarted = False
        offdiag = diag_dev = math.nan
        audit = {}
        if do_orth:
            znorm2 = frobenius_norm(grid, Z) ** 2
            diag_box = {}

            def energy_fn(W_try):
                e = evaluate(problem, W_try, previous=ev.state, pool=pool, timer=timer)
                return e.energy.total, e

            def retract(W_tilde):
                with timer.phase("sync"):
                    G = gram(grid, W_tilde, W_tilde)
                    diag_box["d"] = near_identity_diagnostic(grid, W_tilde, G)
                    return orthonormalize(grid, W_tilde, G)

            def search(W_start, Z_start, tau_start, znorm2_start):
                return nonmonotone_search(
                    W_start,
                    Z_start,
                    tau_start,
                    nm,
                    energy_fn,
                    znorm2=znorm2_start,
                    rho1=params.rho1,
                    delta=params.delta,
                    eta=params.eta,
                    max_backtracks=params.max_backtracks,
                    retract=retract,
                )

            c_ref = nm.C
            try:
                try:
                    ls = search(W, Z, tau_raw, znorm2)
                except StagnationError:
                    if orthonormal:
                        raise
                    # The raw steps since the last checkpoint went uphill too far;
                    # drop them and take the guarded step from the checkpoint.
                    restarted = True
                    W, ev = checkpoint
                    with timer.phase("parallel"):
                        Z, _ = diagonal_residuals(grid, W, ev.HW)
                    znorm2 = frobenius_norm(grid, Z) ** 2
                    tau_raw = initial_step(grid, Z, params.tau_min, params.tau_max)
                    ls = search(W, Z, tau_raw, znorm2)
            except StagnationError as exc:
                exc.records = list(records)
                raise
            except DegenerateSetError as exc:
                raise SolverError(f"orthogonalization failed: {exc}", records) from exc
            offdiag, diag_dev = diag_box["d"]
            tau, backtracks = ls.tau, ls.backtracks
            W_new, ev_new, nm = ls.W, ls.payload, ls.state
            if nm.C < ev_new.energy.total - 4 * np.finfo(float).eps * abs(nm.C):
                raise SolverError(
                    f"nonmonotone reference {nm.C!r} fell below energy "
                    f"{ev_new.energy.total!r}",
                    records,
                )
            audit = dict(
                c_ref=c_ref, c_next=nm.C, accept_bound=ls.bound, accepted_energy=ls.energy
            )
            W_hist, Z_hist = W, Z
            if next_diag is not None and l + 1 >= next_diag:
                with timer.phase("sync"):
                    sigma = gram(grid, ev_new.HW, W_new)
                    W_new, P, _ = subspace_rotate(grid, W_new, sigma)
                    HW_rot = P.T @ ev_new.HW
                    ev_new = Evaluation(W_new, ev_new.state, HW_rot, ev_new.energy)
                    W_hist, Z_hist = P.T @ W, P.T @ Z
                did_diag = True
                while next_diag <= l + 1:
                    next_diag += n_diag
            orth_energies.append(ev_new.energy.total)
            orth_gaps.append(l + 1 - last_orth_iter)
            last_orth_iter = l + 1
        else:
            tau, backtracks = tau_raw, 0
            with timer.phase("parallel"):
                W_new = W - tau * Z
            ev_new = evaluate(problem, W_new, previous=ev.state, pool=pool, timer=timer)
            W_hist, Z_hist = W, Z

        now = time.perf_counter()
        records.append(
            IterationRecord(
                level,
                l,
                energy_l,
                grad_l,
                tau,
                backtracks,
                do_orth,
                did_diag,
                offdiag,
                1e3 * (now - t_iter),
                diag_dev_max=diag_dev,
                drift=bool(offdiag > DRIFT_THRESHOLD),
                restarted=restarted,
                **audit,
            )
        )
        t_iter = now
        W_prev, Z_prev = W_hist, Z_hist
        W, ev = W_new, ev_new
        orthonormal = do_orth
        l += 1


def initialize_orbitals(grid: Grid, atoms, n_orbitals: int, seed: int) -> np.ndarray:
    """Orthonormalized Gaussian bumps near the atoms plus a small random perturbation.

    Bumps cycle through the atoms (the box center when there are none);
    widths are drawn from [0.5, 2.0] bohr.
    """
    if n_orbitals < 1:
        raise ValueError("need at least one orbital")
    if n_orbitals > grid.n_points:
        raise ValueError(f"cannot fit {n_orbitals} orbitals on {grid.n_points} points")
    centers = [np.asarray(a.position, dtype=float) for a in atoms] or [
        0.5 * np.asarray(grid.extents)
    ]
    r = grid.coordinates
    last_error = None
    for attempt in range(5):
        rng = np.random.default_rng([seed, attempt])
        W = np.empty((n_orbitals, grid.n_points))
        for i in range(n_orbitals):
            c = centers[i % len(centers)] + rng.uniform(-0.5, 0.5, grid.dimension)
            width = rng.uniform(0.5, 2.0)
            W[i] = np.exp(-np.sum((r - c) ** 2, axis=1) / (2.0 * width**2))
        W += 1e-2 * rng.standard_normal(W.shape)
        try:
            return orthonormalize(grid, W)
        except DegenerateSetError as exc:
            last_error = exc
    raise DegenerateSetError(f"could not build independent initial orbitals: {last_error}")


@dataclass
class SolveResult:
    orbitals: OrbitalSet
    energy: EnergyBreakdown
    records: list
    converged: bool
    grad_norm: float
    problem: Problem
    parallel_time: float
    sync_time: float
    wall_time: float
    level_iterations: list

    @property
    def iterations(self) -> int:
        return sum(self.level_iterations)

    @property
    def parallel_fraction(self) -> float:
        total = self.parallel_time + self.sync_time
        return self.parallel_time / total if total > 0 else 0.0


def solve(
    problem: Problem,
    n_orbitals: int,
    params: OptimizerParams,
    *,
    initial: np.ndarray | None = None,
    workers: int = 1,
) -> SolveResult:
    """Outer loop: solve on the base grid, then on ``outer_levels - 1`` refinements.

    Each refined level starts from the prolongated, re-orthonormalized
    solution of the previous one with fresh BB and line-search state.
    """
    t0 = time.perf_counter()
    timer = PhaseTimer()
    records: list = []
    level_iterations = []
    grid = problem.grid
    with OrbitalPool(workers) as pool:
        W = (
            initialize_orbitals(grid, problem.atoms, n_orbitals, params.seed)
            if initial is None
            else orthonormalize(grid, initial)
        )
        level_problem = problem
        result = None
        for level in range(params.outer_levels):
            if level > 0:
                fine = refine_uniform(level_problem.grid)
                with timer.phase("sync"):
                    W = orthonormalize(
                        fine, prolongate_values(level_problem.grid, fine, W)
                    )
                level_problem = level_problem.on_grid(fine)
            result = run_inner(
                level_problem, W, params, level=level, pool=pool, timer=timer, records=records
            )
            level_iterations.append(result.iterations)
            W = result.W
            log.info(
                "level %d: %d iterations, E = %.12f, converged = %s",
                level, result.iterations, result.evaluation.energy.total, result.converged,
            )
    wall = time.perf_counter() - t0
    # Everything outside the orbital-parallel phases counts as synchronization,
    # so the two parts add up to the wall time.
    return SolveResult(
        orbitals=OrbitalSet(level_problem.grid, W),
        energy=result.evaluation.energy,
        records=records,
        converged=result.converged,
        grad_norm=result.grad_norm,
        problem=level_problem,
        parallel_time=timer.parallel,
        sync_time=wall - timer.parallel,
        wall_time=wall,
        level_iterations=level_iterations,
    )
