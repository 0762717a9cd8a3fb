"""Triplet assembly and sparse LU solves.

Every linearized circuit in the package is built as a :class:`TripletMatrix`
and solved through :func:`lu_solve`.  The factorization is SuperLU (via
scipy) with partial row pivoting; a pivot-magnitude check on ``U`` turns
near-singular circuits into :class:`SingularMatrixError` instead of
returning garbage.
"""

from __future__ import annotations

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla

#: Relative pivot threshold: |u_kk| <= PIVOT_TOL * max|a_ij| is singular.
PIVOT_TOL = 1e-12

# Dense fallback used only to locate the pivot when SuperLU gives up.
_DENSE_LOCATE_LIMIT = 4000


class SingularMatrixError(ArithmeticError):
    """Raised when a pivot falls below the singularity threshold.

    ``pivot`` is the column (unknown) index at which elimination broke down,
    or ``None`` when it could not be located.
    """

    def __init__(self, pivot: int | None, message: str | None = None):
        self.pivot = pivot
        if message is None:
            message = f"singular matrix: pivot {pivot} below threshold"
        super().__init__(message)


class TripletMatrix:
    """Square sparse matrix under construction, stored as (row, col, value).

    Duplicate coordinates are summed by :func:`assemble`.
    """

    def __init__(self, n: int):
        if n < 0:
            raise ValueError("dimension must be non-negative")
        self.n = n
        self._rows: list[np.ndarray] = []
        self._cols: list[np.ndarray] = []
        self._vals: list[np.ndarray] = []

    def add(self, row: int, col: int, value: float) -> None:
        self.add_many([row], [col], [value])

    def add_many(self, rows, cols, values) -> None:
        rows = np.asarray(rows, dtype=np.int64).ravel()
        cols = np.asarray(cols, dtype=np.int64).ravel()
        values = np.asarray(values, dtype=float).ravel()
        if not (rows.shape == cols.shape == values.shape):
            raise ValueError("rows, cols and values must have equal length")
        self._rows.append(rows)
        self._cols.append(cols)
        self._vals.append(values)

    @property
    def entries(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        if not self._rows:
            empty_i = np.zeros(0, dtype=np.int64)
            return empty_i, empty_i.copy(), np.zeros(0)
        return (np.concatenate(self._rows), np.concatenate(self._cols),
                np.concatenate(self._vals))

    def __len__(self) -> int:
        return sum(len(r) for r in self._rows)


def assemble(triplets: TripletMatrix) -> sp.csr_matrix:
    """Compress to CSR, summing duplicates; column indices sorted per row."""
    rows, cols, vals = triplets.entries
    n = triplets.n
    if rows.size:
        if rows.min() < 0 or rows.max() >= n or cols.min() < 0 or cols.max() >= n:
            raise IndexError(f"triplet index out of range for n={n}")
        if not np.all(np.isfinite(vals)):
            raise ValueError("non-finite triplet value")
    mat = sp.csr_matrix((vals, (rows, cols)), shape=(n, n))
    mat.sum_duplicates()
    mat.sort_indices()
    return mat


class Factorization:
    """LU factors of one matrix; only valid for that matrix."""

    def __init__(self, matrix, ordering: str = "colamd"):
        csc = sp.csc_matrix(matrix, dtype=float)
        n = csc.shape[0]
        if csc.shape != (n, n):
            raise ValueError("matrix must be square")
        self.n = n
        scale = max(1.0, float(abs(csc).max())) if csc.nnz else 1.0
        permc = {"colamd": "COLAMD", "natural": "NATURAL"}[ordering]
        try:
            # diag_pivot_thresh=1.0 forces classic partial pivoting.
            self._lu = spla.splu(csc, permc_spec=permc, diag_pivot_thresh=1.0)
        except RuntimeError as exc:
            raise SingularMatrixError(_locate_pivot(csc), f"singular matrix: {exc}") from None
        diag = np.abs(self._lu.U.diagonal())
        bad = np.flatnonzero(diag <= PIVOT_TOL * scale)
        if bad.size:
            k = int(bad[0])
            raise SingularMatrixError(int(self._lu.perm_c[k]) if k < n else None)

    def solve(self, rhs) -> np.ndarray:
        rhs = np.asarray(rhs, dtype=float)
        if rhs.shape[0] != self.n:
            raise ValueError("rhs length does not match matrix dimension")
        return self._lu.solve(rhs)


def _locate_pivot(csc) -> int | None:
    n = csc.shape[0]
    # Structurally empty rows/columns are the common case (isolated node).
    empty_cols = np.flatnonzero(np.diff(csc.indptr) == 0)
    if empty_cols.size:
        return int(empty_cols[0])
    empty_rows = np.setdiff1d(np.arange(n), csc.indices)
    if empty_rows.size:
        return int(empty_rows[0])
    if n > _DENSE_LOCATE_LIMIT:
        return None
    _, _, u = scipy.linalg.lu(csc.toarray())
    scale = max(1.0, float(abs(csc).max()))
    bad = np.flatnonzero(np.abs(np.diag(u)) <= PIVOT_TOL * scale)
    return int(bad[0]) if bad.size else None


def lu_solve(matrix, rhs, ordering: str = "colamd") -> np.ndarray:
    """Solve ``matrix @ x = rhs`` by sparse LU with partial pivoting."""
    return Factorization(matrix, ordering=ordering).solve(rhs)
