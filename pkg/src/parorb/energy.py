"""Model Kohn-Sham energy: density, potentials and the Hamiltonian.

Energy convention
-----------------
The total energy is

    E(U) = -1/2 sum_i <lap u_i, u_i> + sum_i <V_ext u_i, u_i>
           + 1/2 <v_H, rho> + <eps_x(rho), rho>

with ``rho = sum_i u_i**2``. Its derivative with respect to orbital ``u_i``
is ``2 H(rho) u_i`` under the discrete L2 inner product, so the directional
derivative along ``D`` is ``2 tr<(H U)^T D>``. The optimizers use
``H U - U Sigma`` as search direction, which is half the Riemannian gradient;
the factor only rescales step lengths.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np

from .grid import Grid, GridError, laplacian
from .parallel import OrbitalPool, PhaseTimer, serial_pool

DIRAC_CX = 0.75 * (3.0 / math.pi) ** (1.0 / 3.0)

# Dense kernel quadrature is O(N_g^2) in memory.
KERNEL_MAX_POINTS = 6000


class ConvergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class Atom:
    position: tuple[float, ...]
    charge: float
    softening: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "position", tuple(float(x) for x in self.position))
        if not self.charge > 0.0:
            raise ValueError(f"atom charge must be positive, got {self.charge}")
        if not self.softening > 0.0:
            raise ValueError(f"atom softening must be positive, got {self.softening}")


@dataclass(frozen=True)
class EnergyFlags:
    hartree: bool = False
    xc: bool = False
    hartree_mode: str | None = None  # None picks kernel for d<3, poisson for d=3

    def mode_for(self, grid: Grid) -> str:
        if self.hartree_mode is not None:
            return self.hartree_mode
        return "poisson" if grid.dimension == 3 else "kernel"


@dataclass(frozen=True)
class EnergyBreakdown:
    kinetic: float
    external: float
    hartree: float
    xc: float

    @property
    def total(self) -> float:
        return self.kinetic + self.external + self.hartree + self.xc

    def as_dict(self) -> dict:
        return {
            "kinetic": self.kinetic,
            "external": self.external,
            "hartree": self.hartree,
            "xc": self.xc,
            "total": self.total,
        }


@dataclass(frozen=True)
class HamiltonianState:
    grid: Grid
    density: np.ndarray
    v_ext: np.ndarray
    v_hartree: np.ndarray
    v_xc: np.ndarray
    hartree_enabled: bool
    xc_enabled: bool
    potential: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "potential", self.v_ext + self.v_hartree + self.v_xc)


@dataclass
class Problem:
    """A grid with nuclei and the set of enabled interaction terms."""

    grid: Grid
    atoms: Sequence[Atom] = ()
    flags: EnergyFlags = EnergyFlags()
    poisson_tol: float = 1e-10
    poisson_maxiter: int = 10_000

    def __post_init__(self):
        self.atoms = tuple(self.atoms)
        if self.flags.hartree:
            mode = self.flags.mode_for(self.grid)
            if mode not in ("kernel", "poisson"):
                raise ValueError(f"unknown hartree mode {mode!r}")
            if mode == "poisson" and self.grid.dimension != 3:
                raise ValueError("poisson hartree mode requires a 3D grid")

    def on_grid(self, grid: Grid) -> "Problem":
        return Problem(grid, self.atoms, self.flags, self.poisson_tol, self.poisson_maxiter)

    @cached_property
    def v_ext(self) -> np.ndarray:
        return external_potential(self.atoms, self.grid)

    @cached_property
    def hartree_kernel(self) -> np.ndarray:
        return softened_kernel_matrix(self.grid)


def _stack(orbitals) -> np.ndarray:
    W = np.asarray(getattr(orbitals, "values", orbitals), dtype=float)
    if W.ndim == 1:
        W = W[None, :]
    return W


def density(orbitals) -> np.ndarray:
    """Pointwise ``sum_i u_i**2``, accumulated in orbital order."""
    W = _stack(orbitals)
    if W.shape[0] == 0:
        raise ValueError("density needs at least one orbital")
    rho = np.zeros(W.shape[1])
    for w in W:
        rho += w * w
    return rho


def external_potential(atoms: Sequence[Atom], grid: Grid) -> np.ndarray:
    """Softened Coulomb attraction ``-sum_I Z_I / sqrt(|r - R_I|^2 + a_I^2)``."""
    v = grid.zeros()
    r = grid.coordinates
    for atom in atoms:
        if not grid.contains(atom.position):
            raise GridError(f"atom at {atom.position} lies outside the grid box")
        d2 = np.sum((r - np.asarray(atom.position)) ** 2, axis=1)
        v -= atom.charge / np.sqrt(d2 + atom.softening**2)
    return v


def softened_kernel_matrix(grid: Grid) -> np.ndarray:
    """Quadrature matrix ``K[p, q] = w / sqrt(|r_p - r_q|^2 + 1)``."""
    if grid.n_points > KERNEL_MAX_POINTS:
        raise ValueError(
            f"kernel hartree mode limited to {KERNEL_MAX_POINTS} points, "
            f"grid has {grid.n_points}"
        )
    r = grid.coordinates
    d2 = np.zeros((grid.n_points, grid.n_points))
    for k in range(grid.dimension):
        diff = r[:, k][:, None] - r[:, k][None, :]
        d2 += diff * diff
    return grid.quadrature_weight / np.sqrt(d2 + 1.0)


def poisson_cg(
    grid: Grid,
    rhs: np.ndarray,
    x0: np.ndarray | None = None,
    tol: float = 1e-10,
    maxiter: int = 10_000,
) -> tuple[np.ndarray, int]:
    """Solve ``-lap_h x = rhs`` with zero Dirichlet data by conjugate gradients.

    Stops when ``||rhs + lap_h x|| <= tol * ||rhs||``. Returns the solution
    and the iteration count.
    """
    b = grid.check_field(rhs)
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return np.zeros_like(b), 0
    x = np.zeros_like(b) if x0 is None else np.array(x0, dtype=float)
    r = b + laplacian(grid, x)
    p = r.copy()
    rr = float(r @ r)
    target = (tol * bnorm) ** 2
    for it in range(maxiter + 1):
        if rr <= target:
            return x, it
        Ap = -laplacian(grid, p)
        alpha = rr / float(p @ Ap)
        x += alpha * p
        r -= alpha * Ap
        rr_new = float(r @ r)
        p *= rr_new / rr
        p += r
        rr = rr_new
    raise ConvergenceError(
        f"poisson CG did not reach relative residual {tol:g} in {maxiter} iterations"
    )


def monopole_boundary_rhs(grid: Grid, rho: np.ndarray) -> np.ndarray:
    """Stencil contribution of Dirichlet data ``Q / |r - c|`` on the box faces.

    ``Q`` is the total charge and ``c`` the charge centroid. Adding this to
    ``4 pi rho`` turns the zero-boundary solve into one with monopole
    boundary values.
    """
    w = grid.quadrature_weight
    Q = w * float(np.sum(rho))
    if Q == 0.0:
        return grid.zeros()
    c = w * (grid.coordinates.T @ rho) / Q
    out = np.zeros(grid.shape)
    for k, h in enumerate(grid.spacing):
        for face, idx in ((0.0, 0), (grid.extents[k], grid.shape[k] - 1)):
            # ghost points of the face adjacent to the first/last interior layer
            pts = [a for a in grid.axes]
            pts[k] = np.array([face])
            mesh = np.meshgrid(*pts, indexing="ij")
            d = np.sqrt(sum((m - c[j]) ** 2 for j, m in enumerate(mesh)))
            sl = [slice(None)] * grid.dimension
            sl[k] = slice(idx, idx + 1)
            out[tuple(sl)] += Q / d / (h * h)
    return out.ravel()


def hartree_potential(
    rho: np.ndarray,
    grid: Grid,
    mode: str,
    *,
    kernel: np.ndarray | None = None,
    initial_guess: np.ndarray | None = None,
    tol: float = 1e-10,
    maxiter: int = 10_000,
    boundary: str = "zero",
) -> np.ndarray:
    """Hartree potential of a density.

    ``mode="kernel"`` integrates the softened kernel ``1/sqrt(|r-r'|^2 + 1)``
    directly. ``mode="poisson"`` (3D) solves ``-lap_h v = 4 pi rho`` by CG,
    with zero boundary values by default or, with ``boundary="monopole"``,
    the far-field value of the total charge on the box faces.
    """
    rho = grid.check_field(rho)
    if np.any(rho < 0.0):
        raise ValueError("density must be nonnegative")
    if mode == "kernel":
        K = softened_kernel_matrix(grid) if kernel is None else kernel
        return K @ rho
    if mode == "poisson":
        if grid.dimension != 3:
            raise ValueError("poisson hartree mode requires a 3D grid")
        rhs = 4.0 * math.pi * rho
        if boundary == "monopole":
            rhs = rhs + monopole_boundary_rhs(grid, rho)
        elif boundary != "zero":
            raise ValueError(f"unknown boundary treatment {boundary!r}")
        v, _ = poisson_cg(grid, rhs, initial_guess, tol, maxiter)
        return v
    raise ValueError(f"unknown hartree mode {mode!r}")


def _check_density(rho: np.ndarray) -> np.ndarray:
    rho = np.asarray(rho, dtype=float)
    if np.any(rho < 0.0):
        raise ValueError("density must be nonnegative")
    return rho


def xc_energy_density(rho: np.ndarray) -> np.ndarray:
    """Dirac exchange energy per particle ``-C_x rho^(1/3)``."""
    return -DIRAC_CX * np.cbrt(_check_density(rho))


def xc_potential(rho: np.ndarray) -> np.ndarray:
    """``d(rho eps_x)/d rho = 4/3 eps_x``."""
    return (4.0 / 3.0) * xc_energy_density(rho)


def build_hamiltonian(
    orbitals, problem: Problem, previous: HamiltonianState | None = None
) -> HamiltonianState:
    """Assemble ``H(rho)`` for the density of ``orbitals``.

    ``previous`` only seeds the Poisson iteration.
    """
    grid = problem.grid
    W = grid.check_field(_stack(orbitals))
    rho = density(W)
    zero = grid.zeros()
    v_h = zero
    if problem.flags.hartree:
        mode = problem.flags.mode_for(grid)
        v_h = hartree_potential(
            rho,
            grid,
            mode,
            kernel=problem.hartree_kernel if mode == "kernel" else None,
            initial_guess=None if previous is None else previous.v_hartree,
            tol=problem.poisson_tol,
            maxiter=problem.poisson_maxiter,
        )
    v_xc = xc_potential(rho) if problem.flags.xc else zero
    return HamiltonianState(
        grid, rho, problem.v_ext, v_h, v_xc, problem.flags.hartree, problem.flags.xc
    )


def apply_hamiltonian(
    state: HamiltonianState, orbitals, pool: OrbitalPool | None = None
) -> np.ndarray:
    """``-1/2 lap u + (V_ext + v_H + v_xc) u`` for one orbital or a stack."""
    grid = state.grid
    U = grid.check_field(np.asarray(getattr(orbitals, "values", orbitals), dtype=float))
    V = state.potential

    def apply(block):
        return -0.5 * laplacian(grid, block) + V * block

    if U.ndim == 1 or pool is None:
        return apply(U)
    return pool.map_rows(apply, U)


def energy_terms(
    W: np.ndarray, lap_W: np.ndarray, state: HamiltonianState
) -> EnergyBreakdown:
    w = state.grid.quadrature_weight
    rho = state.density
    kinetic = -0.5 * w * float(np.sum(lap_W * W))
    external = w * float(np.dot(state.v_ext, rho))
    hartree = 0.5 * w * float(np.dot(state.v_hartree, rho)) if state.hartree_enabled else 0.0
    xc = w * float(np.dot(xc_energy_density(rho), rho)) if state.xc_enabled else 0.0
    return EnergyBreakdown(kinetic, external, hartree, xc)


@dataclass(frozen=True)
class Evaluation:
    """Everything computed at one iterate: the operator, ``H W`` and the energy."""

    W: np.ndarray
    state: HamiltonianState
    HW: np.ndarray
    energy: EnergyBreakdown


def evaluate(
    problem: Problem,
    W: np.ndarray,
    previous: HamiltonianState | None = None,
    pool: OrbitalPool | None = None,
    timer: PhaseTimer | None = None,
) -> Evaluation:
    """Build ``H(rho_W)``, apply it to every orbital and evaluate ``E(W)``.

    The Laplacian of each orbital is computed once and shared between the
    kinetic energy and ``H W``.
    """
    grid = problem.grid
    pool = pool or serial_pool()
    timer = timer or PhaseTimer()
    W = grid.check_field(_stack(W))
    with timer.phase("sync"):
        state = build_hamiltonian(W, problem, previous)
    with timer.phase("parallel"):
        lap_W = pool.map_rows(lambda block: laplacian(grid, block), W)
        V = state.potential
        HW = pool.map_rows(lambda block: block * V, W)
        HW -= 0.5 * lap_W
    with timer.phase("sync"):
        energy = energy_terms(W, lap_W, state)
    if not np.isfinite(energy.total):
        raise FloatingPointError("total energy is not finite")
    return Evaluation(W, state, HW, energy)


def total_energy(orbitals, problem: Problem) -> EnergyBreakdown:
    return evaluate(problem, _stack(orbitals)).energy
