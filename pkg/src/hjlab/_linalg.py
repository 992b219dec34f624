"""Linear solvers for the implicit steps.

Two operator representations cover every system the steppers assemble:

* ``PeriodicBandedOperator`` stores "periodic diagonals": row-indexed
  arrays ``d_k`` with ``A[i, (i + k) % n] = d_k[i]``.  This is the natural
  output of a one-dimensional stencil assembly (including interleaved
  weakly coupled systems, where the bandwidth equals the component
  count).  Solves go through LAPACK banded LU plus a Woodbury correction
  for the handful of wraparound entries.

* ``SparseOperator`` wraps a scipy CSR matrix (two-dimensional grids,
  bordered ergodic systems) and factorizes once with SuperLU; the same
  factorization serves both A x = b and A^T x = b.

Both expose exact-transpose solves, which the adjoint marches rely on.
All paths are deterministic.
"""

from __future__ import annotations

import numpy as np
import scipy.linalg
import scipy.sparse
import scipy.sparse.linalg


class PeriodicBandedOperator:
    """Banded matrix with periodic wraparound, from periodic diagonals.

    Parameters
    ----------
    diagonals : dict[int, np.ndarray]
        Offset -> length-n array, entry i giving A[i, (i + k) % n].
        Offsets must satisfy |k| < n // 2 so bands and corners do not
        overlap.
    """

    def __init__(self, diagonals: dict[int, np.ndarray]):
        offsets = sorted(diagonals)
        n = len(diagonals[offsets[0]])
        if any(len(diagonals[k]) != n for k in offsets):
            raise ValueError("all periodic diagonals must have length n")
        if max(abs(k) for k in offsets) >= n // 2:
            raise ValueError("bandwidth too large for periodic banded form")
        self.n = n
        self.offsets = offsets
        self.diagonals = {k: np.asarray(diagonals[k], dtype=float) for k in offsets}
        self._solver = None
        self._solver_t = None

    # -- dense-free application ------------------------------------------

    def matvec(self, x: np.ndarray) -> np.ndarray:
        y = np.zeros_like(x, dtype=float)
        for k, d in self.diagonals.items():
            y += d * np.roll(x, -k)
        return y

    def matvec_transpose(self, x: np.ndarray) -> np.ndarray:
        y = np.zeros_like(x, dtype=float)
        for k, d in self.diagonals.items():
            y += np.roll(d * x, k)
        return y

    # -- solves ------------------------------------------------------------

    def solve(self, b: np.ndarray) -> np.ndarray:
        if self._solver is None:
            self._solver = _BandedWoodbury(self.diagonals, self.n)
        return self._solver.solve(b)

    def solve_transpose(self, b: np.ndarray) -> np.ndarray:
        if self._solver_t is None:
            transposed = {
                -k: np.roll(d, k) for k, d in self.diagonals.items()
            }
            self._solver_t = _BandedWoodbury(transposed, self.n)
        return self._solver_t.solve(b)

    def to_csr(self) -> scipy.sparse.csr_matrix:
        n = self.n
        rows, cols, vals = [], [], []
        idx = np.arange(n)
        for k, d in self.diagonals.items():
            rows.append(idx)
            cols.append((idx + k) % n)
            vals.append(d)
        mat = scipy.sparse.coo_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(n, n),
        )
        return mat.tocsr()


class _BandedWoodbury:
    """LAPACK banded LU with a low-rank update for wraparound entries."""

    def __init__(self, diagonals: dict[int, np.ndarray], n: int):
        offsets = sorted(diagonals)
        kl = max(0, -min(offsets))
        ku = max(0, max(offsets))
        ab = np.zeros((kl + ku + 1, n))
        corner_rows, corner_cols, corner_vals = [], [], []
        for k, d in diagonals.items():
            if k >= 0:
                # in-band rows i = 0 .. n-k-1 map to columns j = i + k
                if k < n:
                    ab[ku - k, k:] = d[: n - k]
                for i in range(n - k, n):
                    v = d[i]
                    if v != 0.0:
                        corner_rows.append(i)
                        corner_cols.append(i + k - n)
                        corner_vals.append(v)
            else:
                m = -k
                ab[ku + m, : n - m] = d[m:]
                for i in range(m):
                    v = d[i]
                    if v != 0.0:
                        corner_rows.append(i)
                        corner_cols.append(i + k + n)
                        corner_vals.append(v)
        self.kl, self.ku, self.ab = kl, ku, ab
        self.corner_rows = np.asarray(corner_rows, dtype=int)
        self.corner_cols = np.asarray(corner_cols, dtype=int)
        self.corner_vals = np.asarray(corner_vals, dtype=float)

    def solve(self, b: np.ndarray) -> np.ndarray:
        ncorn = len(self.corner_vals)
        if ncorn == 0:
            return scipy.linalg.solve_banded((self.kl, self.ku), self.ab, b)
        # A = B + U V^T with U[:, t] = val_t * e_{row_t}, V[:, t] = e_{col_t}
        n = self.ab.shape[1]
        rhs = np.zeros((n, 1 + ncorn))
        rhs[:, 0] = b
        rhs[self.corner_rows, 1 + np.arange(ncorn)] = self.corner_vals
        sol = scipy.linalg.solve_banded((self.kl, self.ku), self.ab, rhs)
        xb = sol[:, 0]
        xu = sol[:, 1:]
        cap = np.eye(ncorn) + xu[self.corner_cols, :]
        y = scipy.linalg.solve(cap, xb[self.corner_cols])
        return xb - xu @ y


class SparseOperator:
    """CSR matrix with a cached SuperLU factorization for both A and A^T."""

    def __init__(self, matrix: scipy.sparse.spmatrix):
        self.matrix = matrix.tocsr()
        self.n = self.matrix.shape[0]
        self._lu = None

    def _factor(self):
        if self._lu is None:
            # stencil matrices have symmetric sparsity; AT_PLUS_A ordering
            # roughly halves the fill of the default
            self._lu = scipy.sparse.linalg.splu(
                self.matrix.tocsc(), permc_spec="MMD_AT_PLUS_A"
            )
        return self._lu

    def matvec(self, x: np.ndarray) -> np.ndarray:
        return self.matrix @ x

    def matvec_transpose(self, x: np.ndarray) -> np.ndarray:
        return self.matrix.T @ x

    def solve(self, b: np.ndarray) -> np.ndarray:
        return self._factor().solve(b)

    def solve_transpose(self, b: np.ndarray) -> np.ndarray:
        return self._factor().solve(b, trans="T")

    def to_csr(self) -> scipy.sparse.csr_matrix:
        return self.matrix


def solve_transpose_iterative(
    operator, b: np.ndarray, rtol: float, maxiter: int = 2000
) -> np.ndarray:
    """Solve A^T x = b with GMRES at relative tolerance ``rtol``.

    Only used by the solver-tolerance study; the production path is the
    direct factorization, whose residual sits at machine precision.
    """
    mat = operator.to_csr().T.tocsr()
    x, info = scipy.sparse.linalg.gmres(
        mat, b, rtol=rtol, atol=0.0, maxiter=maxiter
    )
    if info != 0:
        raise RuntimeError(f"GMRES failed to converge (info={info})")
    return x
