"""Brute-force references used to check the iterative solvers.

Everything here is dense and desk-scale by design. The operator is
materialized column by column and diagonalized with LAPACK, so these checks
share no code with the optimizers beyond the Hamiltonian itself.
"""

from __future__ import annotations

import numpy as np
import scipy.linalg

from .energy import Problem, apply_hamiltonian, build_hamiltonian, evaluate
from .manifold import frobenius_norm, gram, subspace_rotate

DENSE_MAX_POINTS = 4096


class OracleError(RuntimeError):
    pass


def materialize(problem: Problem, orbitals=None) -> np.ndarray:
    """Dense matrix of ``H(rho)`` at the density of ``orbitals``.

    Without orbitals the density is zero, i.e. the linear operator
    ``-1/2 lap + V_ext``.
    """
    grid = problem.grid
    n = grid.n_points
    if n > DENSE_MAX_POINTS:
        raise OracleError(f"dense oracle limited to {DENSE_MAX_POINTS} points, got {n}")
    W = np.zeros((1, n)) if orbitals is None else getattr(orbitals, "values", orbitals)
    state = build_hamiltonian(W, problem)
    # Row j holds H e_j; H is symmetric so this is also column j.
    M = apply_hamiltonian(state, np.eye(n)).T
    asym = np.max(np.abs(M - M.T))
    if asym > 1e-12 * max(1.0, np.max(np.abs(M))):
        raise OracleError(f"materialized operator is not symmetric ({asym:.3e})")
    return M


def dense_eigensolve(M: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """The ``k`` smallest eigenpairs, eigenvectors as columns."""
    n = M.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"k must be in [1, {n}], got {k}")
    vals, vecs = scipy.linalg.eigh(M, subset_by_index=[0, k - 1])
    scale = max(np.linalg.norm(M, 2) if n <= 512 else np.max(np.abs(M)) * n, 1e-300)
    resid = np.linalg.norm(M @ vecs - vecs * vals, axis=0)
    if np.any(resid > 1e-10 * scale):
        raise OracleError(f"eigensolver residual {resid.max():.3e} too large")
    return vals, vecs


def linear_ground_energy(problem: Problem, n_orbitals: int) -> float:
    """Sum of the ``n_orbitals`` lowest eigenvalues of the density-free operator."""
    vals, _ = dense_eigensolve(materialize(problem), n_orbitals)
    return float(np.sum(vals))


def ks_residual(problem: Problem, U) -> float:
    """``||H(rho_U) U - U Lambda||_F`` after diagonalizing the subspace matrix."""
    grid = problem.grid
    U = np.atleast_2d(getattr(U, "values", U))
    ev = evaluate(problem, U)
    sigma = gram(grid, ev.HW, U)
    U_rot, P, _ = subspace_rotate(grid, U, sigma)
    HU_rot = P.T @ ev.HW
    lam = grid.quadrature_weight * np.einsum("ij,ij->i", HU_rot, U_rot)
    return frobenius_norm(grid, HU_rot - lam[:, None] * U_rot)


def fd_gradient_check(problem: Problem, U, direction, t: float = 1e-5) -> float:
    """Relative mismatch of a central difference against ``2 tr<(H U)^T D>``."""
    grid = problem.grid
    U = np.atleast_2d(getattr(U, "values", U))
    D = np.atleast_2d(getattr(direction, "values", direction))
    if not np.any(D):
        return 0.0
    ev = evaluate(problem, U)
    analytic = 2.0 * grid.quadrature_weight * float(np.sum(ev.HW * D))
    e_plus = evaluate(problem, U + t * D).energy.total
    e_minus = evaluate(problem, U - t * D).energy.total
    numeric = (e_plus - e_minus) / (2.0 * t)
    return abs(numeric - analytic) / max(1.0, abs(analytic))
