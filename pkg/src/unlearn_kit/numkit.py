"""Deterministic dense linear-algebra kernels.

Orthonormal bases via modified Gram-Schmidt with rank detection, Euclidean
projections, minimum-norm least squares, and reduced column echelon form.
Everything runs in float64 on plain numpy arrays; all functions are pure and
thread-safe.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Single relative tolerance shared across the repo: a vector counts as
# dependent, or an entry as zero, when it falls below REL_TOL times the
# relevant scale (max input norm, max column norm, ...).
REL_TOL = 1e-10


class LinAlgError(ValueError):
    """Contract violation: dimension mismatch, infeasible system, bad input."""


def as_vector(x, name: str = "vector") -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 1:
        raise LinAlgError(f"{name} must be 1-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise LinAlgError(f"{name} contains non-finite entries")
    return arr


def as_matrix(x, name: str = "matrix") -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 2:
        raise LinAlgError(f"{name} must be 2-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise LinAlgError(f"{name} contains non-finite entries")
    return arr


@dataclass(frozen=True)
class OrthonormalBasis:
    """Orthonormal spanning set of a subspace of R^ambient_dim.

    ``vectors`` holds the basis as rows of a (k, ambient_dim) array, possibly
    k = 0.  Rows are unit norm and mutually orthogonal; construction checks
    both.
    """

    ambient_dim: int
    vectors: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.vectors, dtype=np.float64)
        if v.ndim != 2 or v.shape[1] != self.ambient_dim:
            raise LinAlgError(
                f"basis vectors must have shape (k, {self.ambient_dim}), got {v.shape}"
            )
        if v.shape[0] > self.ambient_dim:
            raise LinAlgError("more basis vectors than ambient dimensions")
        if v.shape[0]:
            norms = np.linalg.norm(v, axis=1)
            if np.max(np.abs(norms - 1.0)) > 1e-12:
                raise LinAlgError("basis vectors are not unit norm")
            gram = v @ v.T
            off = gram - np.eye(v.shape[0])
            if np.max(np.abs(off)) > 1e-10:
                raise LinAlgError("basis vectors are not mutually orthogonal")
        object.__setattr__(self, "vectors", v)

    def __len__(self) -> int:
        return self.vectors.shape[0]


def orthonormalize(vectors, tol: float = REL_TOL, ambient_dim: int | None = None) -> OrthonormalBasis:
    """Orthonormal basis for span(vectors), in input order.

    Modified Gram-Schmidt with one full re-orthogonalization pass, no
    pivoting.  A vector whose residual after projection onto the partial
    basis is <= tol * (max input norm) is dropped as dependent.  Deterministic
    given input order.  An empty input yields an empty basis; pass
    ``ambient_dim`` to fix its dimension in that case.
    """
    if tol <= 0:
        raise LinAlgError("tol must be positive")
    vecs = [as_vector(v, "input vector") for v in vectors]
    if not vecs:
        return OrthonormalBasis(ambient_dim or 0, np.zeros((0, ambient_dim or 0)))
    dim = vecs[0].shape[0]
    for v in vecs:
        if v.shape[0] != dim:
            raise LinAlgError("input vectors do not share one dimension")
    if ambient_dim is not None and ambient_dim != dim:
        raise LinAlgError(f"ambient_dim {ambient_dim} != vector dimension {dim}")
    scale = max(np.linalg.norm(v) for v in vecs)
    threshold = tol * scale
    basis: list[np.ndarray] = []
    for v in vecs:
        u = v.copy()
        for _ in range(2):  # second pass re-orthogonalizes against rounding
            for b in basis:
                u -= (u @ b) * b
        norm = np.linalg.norm(u)
        if norm > threshold:
            basis.append(u / norm)
    mat = np.array(basis) if basis else np.zeros((0, dim))
    return OrthonormalBasis(dim, mat)


def project(x, basis: OrthonormalBasis) -> np.ndarray:
    """Euclidean projection of x onto span(basis): sum_i <x, v_i> v_i."""
    xv = as_vector(x)
    if xv.shape[0] != basis.ambient_dim:
        raise LinAlgError(
            f"dimension mismatch: x has dim {xv.shape[0]}, basis ambient {basis.ambient_dim}"
        )
    if len(basis) == 0:
        return np.zeros_like(xv)
    return basis.vectors.T @ (basis.vectors @ xv)


def project_complement(x, basis: OrthonormalBasis) -> np.ndarray:
    """Projection of x onto the orthogonal complement of span(basis)."""
    xv = as_vector(x)
    return xv - project(xv, basis)


def min_norm_least_squares(X, y) -> np.ndarray:
    """Minimum-norm solution of X w = y for wide X: w = X^T (X X^T)^{-1} y.

    The returned w lies in the rowspace of X and satisfies X w = y to 1e-8.
    Rank-deficient X is solved on the maximal independent row subset with the
    earliest indices; if a dropped row is inconsistent with that solution the
    system is infeasible and an error is raised.  This routine doubles as the
    brute-force retraining oracle in the test suite.
    """
    Xm = as_matrix(X, "X")
    yv = as_vector(y, "y")
    n, m = Xm.shape
    if yv.shape[0] != n:
        raise LinAlgError(f"y has length {yv.shape[0]}, expected {n}")
    if n == 0:
        return np.zeros(m)
    scale = np.max(np.linalg.norm(Xm, axis=1))
    if scale == 0.0:
        if np.max(np.abs(yv)) > 1e-8:
            raise LinAlgError("infeasible: zero rows with nonzero targets")
        return np.zeros(m)
    # Greedy independent-row selection in index order, mirroring orthonormalize.
    threshold = REL_TOL * scale
    kept: list[int] = []
    ortho: list[np.ndarray] = []
    for i in range(n):
        u = Xm[i].copy()
        for _ in range(2):
            for b in ortho:
                u -= (u @ b) * b
        norm = np.linalg.norm(u)
        if norm > threshold:
            kept.append(i)
            ortho.append(u / norm)
    Xk = Xm[kept]
    w = Xk.T @ np.linalg.solve(Xk @ Xk.T, yv[kept])
    residual = np.max(np.abs(Xm @ w - yv))
    if residual > 1e-8 * max(1.0, np.max(np.abs(yv))):
        raise LinAlgError(f"infeasible: dropped rows inconsistent (residual {residual:.3e})")
    return w


def reduced_column_echelon(P, tol: float = REL_TOL) -> np.ndarray:
    """Reduced column echelon form of P.

    Column operations only, so the column space is preserved.  Each nonzero
    column of the result has a leading one, that one is the only nonzero
    entry in its row, and leading-one row indices strictly increase left to
    right; zero columns are pushed to the right.  Entries below
    tol * (max column norm) are snapped to exact zero.
    """
    if tol <= 0:
        raise LinAlgError("tol must be positive")
    Pm = as_matrix(P, "P")
    if Pm.size == 0:
        return Pm.copy()
    col_scale = np.max(np.linalg.norm(Pm, axis=0))
    if col_scale == 0.0:
        return np.zeros_like(Pm)
    threshold = tol * col_scale
    # Row-reduce the transpose: row ops on P^T are column ops on P.
    A = Pm.T.copy()
    n_rows, n_cols = A.shape
    r = 0
    for c in range(n_cols):
        if r >= n_rows:
            break
        pivot = r + int(np.argmax(np.abs(A[r:, c])))
        if np.abs(A[pivot, c]) <= threshold:
            continue
        if pivot != r:
            A[[r, pivot]] = A[[pivot, r]]
        A[r] = A[r] / A[r, c]
        for i in range(n_rows):
            if i != r and A[i, c] != 0.0:
                A[i] = A[i] - A[i, c] * A[r]
        A[:, c] = 0.0
        A[r, c] = 1.0
        r += 1
    A[np.abs(A) <= threshold] = 0.0
    return A.T
