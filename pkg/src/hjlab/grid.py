"""Uniform periodic grids on the unit torus and the stencil operators used
everywhere else in the package.

The torus T^d (d = 1 or 2) is discretized by N nodes per axis with spacing
h = 1/N, nodes at x_i = i h.  Wraparound is implemented with index rolls, so
every operator below is exactly translation invariant on the lattice.  All
differential operators are the classical second-order stencils:

* central gradient        (f(x+h e_a) - f(x-h e_a)) / (2h)
* one-sided gradients     forward / backward differences
* Laplacian               (2 d + 1)-point second difference
* mixed second derivative 4-point cross difference / (4 h^2)

Quadrature is the periodic trapezoid rule, which on a uniform periodic grid
collapses to h^d times the nodal sum and integrates trigonometric
polynomials below the Nyquist frequency exactly.

Fields are value snapshots: constructing a field copies its array and
freezes it, and operators return new fields.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

_SCHEMES = ("central", "upwind_plus", "upwind_minus")


@dataclass(frozen=True)
class PeriodicGrid:
    """Uniform periodic grid with N nodes per axis on [0, 1)^dim."""

    dim: int
    n: int

    def __post_init__(self):
        if self.dim not in (1, 2):
            raise ValueError(f"dim must be 1 or 2, got {self.dim}")
        if self.n < 4:
            raise ValueError(f"need at least 4 nodes per axis, got {self.n}")

    @property
    def h(self) -> float:
        return 1.0 / self.n

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.n,) * self.dim

    @property
    def size(self) -> int:
        return self.n**self.dim

    def coordinates(self) -> np.ndarray:
        """Node coordinates, shape (dim,) + shape."""
        axis = np.arange(self.n) * self.h
        if self.dim == 1:
            return axis[np.newaxis, :]
        x0, x1 = np.meshgrid(axis, axis, indexing="ij")
        return np.stack([x0, x1])

    def wrap(self, index):
        """Wrap a (multi-)index onto the grid."""
        if self.dim == 1:
            return int(index) % self.n
        i, j = index
        return (int(i) % self.n, int(j) % self.n)


def make_grid(dim: int, n: int) -> PeriodicGrid:
    """Construct a periodic grid, validating dim and N.

    Powers of two for N keep h * N == 1 exact in floating point; other
    values are accepted but the quadrature weight picks up one ulp.
    """
    return PeriodicGrid(dim=dim, n=n)


def _frozen(values: np.ndarray) -> np.ndarray:
    out = np.array(values, dtype=float, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class ScalarField:
    """A scalar function sampled at grid nodes (immutable snapshot)."""

    grid: PeriodicGrid
    values: np.ndarray

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        if vals.shape != self.grid.shape:
            raise ValueError(
                f"values shape {vals.shape} does not match grid {self.grid.shape}"
            )
        object.__setattr__(self, "values", _frozen(vals))


@dataclass(frozen=True)
class VectorField:
    """A d-vector per node, stored with component axis first."""

    grid: PeriodicGrid
    values: np.ndarray

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        expected = (self.grid.dim,) + self.grid.shape
        if vals.shape != expected:
            raise ValueError(f"values shape {vals.shape}, expected {expected}")
        object.__setattr__(self, "values", _frozen(vals))


@dataclass(frozen=True)
class MatrixField:
    """A symmetric positive semidefinite d x d matrix per node.

    Per-node symmetry is required exactly; the smallest eigenvalue may dip
    to -1e-12 to allow for roundoff in user-supplied factorizations.
    """

    grid: PeriodicGrid
    values: np.ndarray

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        d = self.grid.dim
        expected = (d, d) + self.grid.shape
        if vals.shape != expected:
            raise ValueError(f"values shape {vals.shape}, expected {expected}")
        for i in range(d):
            for j in range(i + 1, d):
                if not np.array_equal(vals[i, j], vals[j, i]):
                    raise ValueError("matrix field must be symmetric per node")
        if _min_eigenvalue(vals, d) < -1e-12:
            raise ValueError("matrix field must be positive semidefinite per node")
        object.__setattr__(self, "values", _frozen(vals))


def _min_eigenvalue(vals: np.ndarray, d: int) -> float:
    if d == 1:
        return float(vals[0, 0].min())
    a, b, c = vals[0, 0], vals[0, 1], vals[1, 1]
    disc = np.sqrt(((a - c) / 2.0) ** 2 + b**2)
    return float(((a + c) / 2.0 - disc).min())


# ---------------------------------------------------------------------------
# stencil operators (array-level helpers first, field wrappers below)
# ---------------------------------------------------------------------------


def gradient_values(values: np.ndarray, h: float, scheme: str = "central") -> np.ndarray:
    """Gradient of a nodal array; returns shape (dim,) + values.shape."""
    if scheme not in _SCHEMES:
        raise ValueError(f"unknown scheme {scheme!r}, expected one of {_SCHEMES}")
    dim = values.ndim
    out = np.empty((dim,) + values.shape)
    for a in range(dim):
        fwd = np.roll(values, -1, axis=a)
        bwd = np.roll(values, 1, axis=a)
        if scheme == "central":
            out[a] = (fwd - bwd) / (2.0 * h)
        elif scheme == "upwind_plus":
            out[a] = (fwd - values) / h
        else:
            out[a] = (values - bwd) / h
    return out


def laplacian_values(values: np.ndarray, h: float) -> np.ndarray:
    out = np.zeros_like(values)
    for a in range(values.ndim):
        out += np.roll(values, -1, axis=a) - 2.0 * values + np.roll(values, 1, axis=a)
    return out / (h * h)


def second_difference_values(values: np.ndarray, h: float, i: int, j: int) -> np.ndarray:
    """Entry (i, j) of the discrete Hessian."""
    if i == j:
        return (
            np.roll(values, -1, axis=i) - 2.0 * values + np.roll(values, 1, axis=i)
        ) / (h * h)
    pp = np.roll(np.roll(values, -1, axis=i), -1, axis=j)
    mm = np.roll(np.roll(values, 1, axis=i), 1, axis=j)
    pm = np.roll(np.roll(values, -1, axis=i), 1, axis=j)
    mp = np.roll(np.roll(values, 1, axis=i), -1, axis=j)
    return (pp + mm - pm - mp) / (4.0 * h * h)


def hessian_values(values: np.ndarray, h: float) -> np.ndarray:
    """Full discrete Hessian, shape (dim, dim) + values.shape."""
    dim = values.ndim
    out = np.empty((dim, dim) + values.shape)
    for i in range(dim):
        for j in range(i, dim):
            out[i, j] = second_difference_values(values, h, i, j)
            if i != j:
                out[j, i] = out[i, j]
    return out


def gradient(f: ScalarField, scheme: str = "central") -> VectorField:
    """Discrete gradient of a scalar field.

    Parameters
    ----------
    f : ScalarField
    scheme : {"central", "upwind_plus", "upwind_minus"}
        Central difference or the one-sided differences used by the
        monotone numerical Hamiltonian.
    """
    return VectorField(f.grid, gradient_values(f.values, f.grid.h, scheme))


def laplacian(f: ScalarField) -> ScalarField:
    """(2 dim + 1)-point discrete Laplacian."""
    return ScalarField(f.grid, laplacian_values(f.values, f.grid.h))


def contract_second_derivatives(a: MatrixField, f: ScalarField) -> ScalarField:
    """Pointwise contraction sum_ij a^ij(x) (D^2 f)_ij(x).

    Diagonal entries use the axis second difference, off-diagonal entries
    the 4-point cross difference.  With a == identity this reproduces
    ``laplacian`` exactly, stencil for stencil.
    """
    if a.grid != f.grid:
        raise ValueError("matrix and scalar fields live on different grids")
    h = f.grid.h
    dim = f.grid.dim
    out = np.zeros(f.grid.shape)
    for i in range(dim):
        for j in range(dim):
            out += a.values[i, j] * second_difference_values(f.values, h, i, j)
    return ScalarField(f.grid, out)


def integrate(f: ScalarField) -> float:
    """Periodic trapezoid quadrature: h^dim times the nodal sum."""
    return float(f.values.sum() * f.grid.h**f.grid.dim)


def argmax_node(values: np.ndarray):
    """Index of the node maximizing |values| (ties broken by flat order)."""
    flat = int(np.argmax(np.abs(values)))
    if values.ndim == 1:
        return flat
    return np.unravel_index(flat, values.shape)
