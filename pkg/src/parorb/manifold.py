"""Stiefel-manifold operations on orbital stacks.

An orbital set is stored as an ``(N, N_g)`` array with one orbital per row,
so the column-oriented formulas ``W P`` and ``U Sigma`` become ``P.T @ W``
and ``Sigma.T @ U`` here.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .grid import Grid, GridError

ORTHONORMAL_TOL = 1e-10
DEGENERATE_RATIO = 1e-12
SYMMETRY_TOL = 1e-8


class DegenerateSetError(ValueError):
    """The orbitals are numerically linearly dependent."""


@dataclass(frozen=True)
class OrbitalSet:
    grid: Grid
    values: np.ndarray

    def __post_init__(self):
        values = np.atleast_2d(np.asarray(self.values, dtype=float))
        if values.shape[0] < 1 or values.shape[1] != self.grid.n_points:
            raise GridError(
                f"orbital array of shape {values.shape} does not fit a grid "
                f"with {self.grid.n_points} points"
            )
        object.__setattr__(self, "values", values)

    @property
    def count(self) -> int:
        return self.values.shape[0]

    def is_orthonormal(self, tol: float = ORTHONORMAL_TOL) -> bool:
        return orthonormality_error(self.grid, self.values) <= tol


def _pair(grid: Grid, A, B) -> tuple[np.ndarray, np.ndarray]:
    A = np.atleast_2d(grid.check_field(getattr(A, "values", A)))
    B = np.atleast_2d(grid.check_field(getattr(B, "values", B)))
    if A.shape != B.shape:
        raise GridError(f"orbital sets differ in shape: {A.shape} vs {B.shape}")
    return A, B


def gram(grid: Grid, Psi, Phi) -> np.ndarray:
    """``<Psi^T Phi>``: entry ``(i, j)`` is ``<psi_i, phi_j>``."""
    A, B = _pair(grid, Psi, Phi)
    if A is B:
        G = A @ A.T
        G = 0.5 * (G + G.T)
    else:
        G = A @ B.T
    return grid.quadrature_weight * G


def frobenius_norm(grid: Grid, Z) -> float:
    """``sqrt(tr<Z^T Z>)``."""
    Z = np.asarray(getattr(Z, "values", Z))
    return float(np.sqrt(grid.quadrature_weight * np.sum(Z * Z)))


def orthonormality_error(grid: Grid, W) -> float:
    G = gram(grid, W, W)
    return float(np.max(np.abs(G - np.eye(G.shape[0]))))


def near_identity_diagnostic(grid: Grid, W, gram_matrix: np.ndarray | None = None) -> tuple[float, float]:
    """Largest off-diagonal magnitude and largest ``|diag - 1|`` of ``<W^T W>``."""
    G = gram(grid, W, W) if gram_matrix is None else gram_matrix
    off = G - np.diag(np.diag(G))
    return float(np.max(np.abs(off))), float(np.max(np.abs(np.diag(G) - 1.0)))


# Cholesky-QR loses about cond(G) * eps of orthogonality; above this a
# second pass is needed to stay inside ORTHONORMAL_TOL.
_SECOND_PASS_COND = 1e4


def _orth_pass(G: np.ndarray, W: np.ndarray) -> tuple[np.ndarray, float]:
    evals = np.linalg.eigvalsh(G)
    if evals[-1] <= 0.0 or evals[0] < DEGENERATE_RATIO * evals[-1]:
        raise DegenerateSetError(
            f"orbital set is rank deficient (Gram eigenvalues {evals[0]:.3e} .. "
            f"{evals[-1]:.3e})"
        )
    cond = evals[-1] / evals[0]
    try:
        L = np.linalg.cholesky(G)
    except np.linalg.LinAlgError:
        vals, vecs = np.linalg.eigh(G)
        vals = np.maximum(vals, DEGENERATE_RATIO * vals[-1])
        return (vecs * vals**-0.5) @ vecs.T @ W, cond
    L_inv = scipy.linalg.solve_triangular(L, np.eye(L.shape[0]), lower=True)
    return L_inv @ W, cond


def orthonormalize(grid: Grid, W_tilde, gram_matrix: np.ndarray | None = None) -> np.ndarray:
    """Cholesky-QR: ``W = L^{-1} W~`` with ``<W~^T W~> = L L^T``.

    Falls back to ``W~ G^{-1/2}`` when the Cholesky factorization fails and
    repeats the pass for ill-conditioned input. ``gram_matrix`` may supply a
    precomputed ``<W~^T W~>``.
    """
    W = np.atleast_2d(grid.check_field(getattr(W_tilde, "values", W_tilde)))
    G = gram(grid, W, W) if gram_matrix is None else gram_matrix
    W, cond = _orth_pass(G, W)
    if cond > _SECOND_PASS_COND:
        W, _ = _orth_pass(gram(grid, W, W), W)
    return W


def stiefel_gradient(grid: Grid, U, HU) -> tuple[np.ndarray, np.ndarray]:
    """``H U - U Sigma`` with ``Sigma = <(H U)^T U>``; returns (gradient, Sigma)."""
    U, HU = _pair(grid, U, HU)
    sigma = gram(grid, HU, U)
    return HU - sigma.T @ U, sigma


def rayleigh_diagonal(grid: Grid, U, HU) -> np.ndarray:
    """``sigma_ii = <H u_i, u_i>`` for every orbital."""
    U, HU = _pair(grid, U, HU)
    return grid.quadrature_weight * np.array([np.dot(h, u) for h, u in zip(HU, U)])


def diagonal_residuals(grid: Grid, U, HU) -> tuple[np.ndarray, np.ndarray]:
    """Per-orbital directions ``z_i = H u_i - sigma_ii u_i`` and the ``sigma_ii``."""
    U, HU = _pair(grid, U, HU)
    sig = rayleigh_diagonal(grid, U, HU)
    return HU - sig[:, None] * U, sig


def _sign_fix(P: np.ndarray) -> np.ndarray:
    P = P.copy()
    for k in range(P.shape[1]):
        col = P[:, k]
        nz = np.flatnonzero(np.abs(col) > 1e-12 * np.max(np.abs(col)))
        if nz.size and col[nz[0]] < 0.0:
            P[:, k] = -col
    return P


def symmetric_eigh(sigma: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Ascending eigenpairs of a (nearly) symmetric matrix with fixed signs."""
    sigma = np.asarray(sigma, dtype=float)
    asym = np.max(np.abs(sigma - sigma.T)) if sigma.size else 0.0
    if asym > SYMMETRY_TOL:
        raise ValueError(f"matrix is not symmetric (max asymmetry {asym:.3e})")
    sigma = 0.5 * (sigma + sigma.T)
    off = sigma - np.diag(np.diag(sigma))
    if not np.any(off):
        order = np.argsort(np.diag(sigma), kind="stable")
        return np.diag(sigma)[order], np.eye(sigma.shape[0])[:, order]
    vals, vecs = np.linalg.eigh(sigma)
    return vals, _sign_fix(vecs)


def subspace_rotate(grid: Grid, W, sigma) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Rotate ``W`` by the eigenvectors of ``Sigma``.

    Returns ``(W P, P, eigenvalues)`` with ``P^T Sigma P`` diagonal and the
    eigenvalues ascending.
    """
    W = np.atleast_2d(grid.check_field(getattr(W, "values", W)))
    vals, P = symmetric_eigh(sigma)
    return P.T @ W, P, vals
