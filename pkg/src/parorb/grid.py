"""Uniform real-space grids with zero-Dirichlet boundaries.

Grid values are stored flat in lexicographic order (last axis fastest).
Functions that act on fields accept either a single field of shape
``(N_g,)`` or a stack of fields of shape ``(k, N_g)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np

# Flat indices are addressed with numpy's default integer type.
_MAX_POINTS = np.iinfo(np.intp).max


class GridError(ValueError):
    """Raised for invalid grids, mismatched fields or bad refinement pairs."""


@dataclass(frozen=True)
class Grid:
    """Uniform tensor-product mesh of interior points in ``[0, L_k]``.

    Point ``j`` (1-based) on axis ``k`` sits at ``j * spacing[k]``; the
    boundary planes at 0 and ``L_k`` carry the implicit zero value.
    """

    dimension: int
    extents: tuple[float, ...]
    points_per_axis: tuple[int, ...]
    spacing: tuple[float, ...] = field(init=False)
    quadrature_weight: float = field(init=False)

    def __post_init__(self):
        if self.dimension not in (1, 2, 3):
            raise GridError(f"dimension must be 1, 2 or 3, got {self.dimension}")
        extents = tuple(float(x) for x in self.extents)
        points = tuple(int(n) for n in self.points_per_axis)
        if len(extents) != self.dimension or len(points) != self.dimension:
            raise GridError("extents and points_per_axis must have one entry per axis")
        if any(not np.isfinite(x) or x <= 0.0 for x in extents):
            raise GridError(f"extents must be positive, got {extents}")
        if any(n < 1 for n in points):
            raise GridError(f"points_per_axis must be >= 1, got {points}")
        total = 1
        for n in points:
            total *= n
        if total > _MAX_POINTS:
            raise GridError(f"grid with {total} points overflows the index type")
        spacing = tuple(L / (n + 1) for L, n in zip(extents, points))
        object.__setattr__(self, "extents", extents)
        object.__setattr__(self, "points_per_axis", points)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "quadrature_weight", float(np.prod(spacing)))

    @property
    def shape(self) -> tuple[int, ...]:
        return self.points_per_axis

    @property
    def n_points(self) -> int:
        return int(np.prod(self.points_per_axis))

    @cached_property
    def axes(self) -> tuple[np.ndarray, ...]:
        """Coordinates of the interior points along each axis."""
        return tuple(
            h * np.arange(1, n + 1, dtype=float)
            for h, n in zip(self.spacing, self.points_per_axis)
        )

    @cached_property
    def coordinates(self) -> np.ndarray:
        """``(N_g, d)`` array of point positions in flat order."""
        mesh = np.meshgrid(*self.axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)

    def contains(self, position: Sequence[float]) -> bool:
        pos = np.asarray(position, dtype=float)
        return pos.shape == (self.dimension,) and bool(
            np.all(pos >= 0.0) and np.all(pos <= np.asarray(self.extents))
        )

    def zeros(self) -> np.ndarray:
        return np.zeros(self.n_points)

    def check_field(self, values: np.ndarray) -> np.ndarray:
        """Validate that ``values`` is one field or a stack of fields on this grid."""
        values = np.asarray(values, dtype=float)
        if values.ndim not in (1, 2) or values.shape[-1] != self.n_points:
            raise GridError(
                f"field of shape {values.shape} does not live on a grid with "
                f"{self.n_points} points"
            )
        return values


@dataclass(frozen=True)
class Field:
    """A scalar function sampled on the points of a grid."""

    grid: Grid
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.shape != (self.grid.n_points,):
            raise GridError(
                f"field needs {self.grid.n_points} values, got shape {values.shape}"
            )
        if not np.all(np.isfinite(values)):
            raise GridError("field values must be finite")
        values = values.copy()
        values.flags.writeable = False
        object.__setattr__(self, "values", values)


def build_grid(
    dimension: int, extents: Sequence[float], points_per_axis: Sequence[int]
) -> Grid:
    return Grid(dimension, tuple(extents), tuple(points_per_axis))


def _values(grid: Grid, f) -> np.ndarray:
    if isinstance(f, Field):
        if f.grid != grid:
            raise GridError("field belongs to a different grid")
        return f.values
    return grid.check_field(f)


def laplacian(grid: Grid, values: np.ndarray) -> np.ndarray:
    """Second-order central-difference Laplacian of one field or a stack.

    Values outside the domain are taken as zero.
    """
    values = grid.check_field(values)
    lead = values.shape[:-1]
    u = values.reshape(lead + grid.shape)
    out = np.zeros_like(u)
    offset = len(lead)
    for k, h in enumerate(grid.spacing):
        ax = offset + k
        n = grid.shape[k]
        inv_h2 = 1.0 / (h * h)
        lo = [slice(None)] * u.ndim
        hi = [slice(None)] * u.ndim
        lo[ax] = slice(0, n - 1)
        hi[ax] = slice(1, n)
        lo, hi = tuple(lo), tuple(hi)
        out -= (2.0 * inv_h2) * u
        out[hi] += inv_h2 * u[lo]
        out[lo] += inv_h2 * u[hi]
    return out.reshape(values.shape)


def apply_laplacian(grid: Grid, f) -> Field:
    return Field(grid, laplacian(grid, _values(grid, f)))


def inner_product(grid: Grid, f, g) -> float:
    """Discrete L2 inner product ``h^d * sum_p f(p) g(p)``."""
    a = _values(grid, f)
    b = _values(grid, g)
    if a.shape != b.shape or a.ndim != 1:
        raise GridError("inner_product expects two single fields on the same grid")
    return grid.quadrature_weight * float(np.dot(a, b))


def refine_uniform(grid: Grid) -> Grid:
    """Bisect every cell: ``n`` interior points per axis become ``2n + 1``."""
    return Grid(
        grid.dimension, grid.extents, tuple(2 * n + 1 for n in grid.points_per_axis)
    )


def is_refinement(coarse: Grid, fine: Grid) -> bool:
    return (
        coarse.dimension == fine.dimension
        and np.allclose(coarse.extents, fine.extents, rtol=1e-14, atol=0.0)
        and all(
            m == 2 * n + 1
            for n, m in zip(coarse.points_per_axis, fine.points_per_axis)
        )
    )


def _prolongate_axis(u: np.ndarray, axis: int) -> np.ndarray:
    # Coarse point j maps to fine index 2j+1. The two fine points next to the
    # boundary use linear extrapolation from the nearest coarse pair so that
    # degree-1 polynomials are reproduced exactly.
    n = u.shape[axis]
    shape = list(u.shape)
    shape[axis] = 2 * n + 1
    out = np.zeros(shape)

    def sl(a, b=None, step=1):
        idx = [slice(None)] * u.ndim
        idx[axis] = slice(a, b, step) if b is not None or a is None else a
        return tuple(idx)

    out[sl(1, 2 * n, 2)] = u
    if n == 1:
        out[sl(0)] = u[sl(0)]
        out[sl(2)] = u[sl(0)]
        return out
    out[sl(2, 2 * n - 1, 2)] = 0.5 * (u[sl(0, n - 1)] + u[sl(1, n)])
    out[sl(0)] = 1.5 * u[sl(0)] - 0.5 * u[sl(1)]
    out[sl(2 * n)] = 1.5 * u[sl(n - 1)] - 0.5 * u[sl(n - 2)]
    return out


def prolongate_values(coarse: Grid, fine: Grid, values: np.ndarray) -> np.ndarray:
    """Multilinear interpolation of one field or a stack onto a refined grid.

    Fine points that coincide with coarse points copy the coarse values.
    """
    if not is_refinement(coarse, fine):
        raise GridError("fine grid is not the uniform refinement of the coarse grid")
    values = coarse.check_field(values)
    lead = values.shape[:-1]
    u = values.reshape(lead + coarse.shape)
    for k in range(coarse.dimension):
        u = _prolongate_axis(u, len(lead) + k)
    return u.reshape(lead + (fine.n_points,))


def prolongate(coarse_field: Field, fine_grid: Grid) -> Field:
    return Field(
        fine_grid, prolongate_values(coarse_field.grid, fine_grid, coarse_field.values)
    )


def restrict_to_coarse_points(coarse: Grid, fine: Grid, values: np.ndarray) -> np.ndarray:
    """Injection: pick the fine values that sit on coarse points."""
    if not is_refinement(coarse, fine):
        raise GridError("fine grid is not the uniform refinement of the coarse grid")
    values = fine.check_field(values)
    lead = values.shape[:-1]
    u = values.reshape(lead + fine.shape)
    idx = (slice(None),) * len(lead) + (slice(1, None, 2),) * coarse.dimension
    return np.ascontiguousarray(u[idx]).reshape(lead + (coarse.n_points,))
