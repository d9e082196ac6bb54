"""Dense kernels for the merge system: truncated SVD, Gram and Hadamard
products, and a minimum-norm solver for symmetric systems.

All arithmetic is done in float64.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from stfmerge.errors import NumericError, ShapeError

DEFAULT_RANK_TOL = 1e-5
DEFAULT_SOLVER_TOL = 1e-8


@dataclass(frozen=True)
class SvdBundle:
    """Retained singular triplets of one task matrix.

    ``left`` is (m, r) and ``right`` is (n, r); column ``k`` of each pairs
    with ``sigmas[k]``. Sigmas are in descending order.
    """

    task_id: str
    sigmas: np.ndarray
    left: np.ndarray
    right: np.ndarray
    source_shape: tuple[int, int]

    @property
    def rank(self) -> int:
        return int(self.sigmas.shape[0])

    def reconstruct(self) -> np.ndarray:
        return (self.left * self.sigmas) @ self.right.T

    def take(self, index) -> "SvdBundle":
        """Sub-bundle with the triplets selected by ``index``."""
        return SvdBundle(self.task_id, self.sigmas[index], self.left[:, index], self.right[:, index], self.source_shape)


@dataclass
class MergeSystem:
    """The assembled system ``(U o V) alpha = sigma`` for one layer."""

    coeff: np.ndarray
    rhs: np.ndarray
    index_map: list[tuple[str, int]]
    weights: np.ndarray = field(default_factory=lambda: np.zeros(0))
    residual_norm: float = 0.0

    @property
    def size(self) -> int:
        return len(self.index_map)


def _check_finite(arr: np.ndarray, what: str):
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{what} contains non-finite entries")


def orient_signs(left: np.ndarray, right: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Flip singular pairs so each left vector's largest-|.| entry is positive.

    ``argmax`` returns the first maximum, which breaks ties by lowest index.
    """
    if left.shape[1] == 0:
        return left, right
    pivots = np.argmax(np.abs(left), axis=0)
    signs = np.where(left[pivots, np.arange(left.shape[1])] < 0, -1.0, 1.0)
    return left * signs, right * signs


def truncated_svd(matrix, rank_tol: float = DEFAULT_RANK_TOL, task_id: str = "") -> SvdBundle:
    """SVD of ``matrix`` keeping triplets with ``sigma > rank_tol * sigma_max``."""
    mat = np.asarray(matrix, dtype=np.float64)
    if mat.ndim != 2 or min(mat.shape) < 1:
        raise ShapeError(f"expected a non-empty 2-D matrix, got shape {mat.shape}")
    if not 0.0 <= rank_tol < 1.0:
        raise ValueError(f"rank_tol must lie in [0, 1), got {rank_tol}")
    _check_finite(mat, "matrix")
    m, n = mat.shape
    try:
        u, s, vt = np.linalg.svd(mat, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"SVD failed: {exc}") from exc
    keep = int(np.count_nonzero(s > rank_tol * s[0])) if s[0] > 0 else 0
    left, right = orient_signs(u[:, :keep], vt[:keep].T)
    return SvdBundle(
        task_id,
        np.ascontiguousarray(s[:keep]),
        np.ascontiguousarray(left),
        np.ascontiguousarray(right),
        (m, n),
    )


def _stack(column_sets) -> np.ndarray:
    sets = [np.asarray(c, dtype=np.float64) for c in column_sets]
    sets = [c.reshape(-1, 1) if c.ndim == 1 else c for c in sets]
    if not sets:
        return np.zeros((0, 0))
    dims = {c.shape[0] for c in sets}
    if len(dims) > 1:
        raise ShapeError(f"column sets have different ambient dimensions {sorted(dims)}")
    return np.concatenate(sets, axis=1)


def gram(vectors_a, vectors_b=None) -> np.ndarray:
    """Inner products between the concatenated columns of two lists of column sets.

    Entry ``(p, q)`` is ``a_p . b_q``. With ``vectors_b`` omitted the Gram
    matrix of ``vectors_a`` with itself is returned.
    """
    a = _stack(vectors_a)
    b = a if vectors_b is None else _stack(vectors_b)
    if a.size == 0 and b.size == 0:
        return np.zeros((a.shape[1], b.shape[1]))
    if a.shape[0] != b.shape[0]:
        raise ShapeError(f"ambient dimensions differ: {a.shape[0]} vs {b.shape[0]}")
    return a.T @ b


def hadamard(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"Hadamard product needs equal shapes, got {a.shape} and {b.shape}")
    return a * b


def solve_sym(coeff, rhs, solver_tol: float = DEFAULT_SOLVER_TOL) -> tuple[np.ndarray, float]:
    """Minimum-norm least-squares solution of a symmetric system.

    Eigenvalues with magnitude below ``solver_tol`` times the largest are
    treated as zero. Returns ``(weights, ||coeff @ weights - rhs||_2)``.
    """
    a = np.asarray(coeff, dtype=np.float64)
    b = np.asarray(rhs, dtype=np.float64).reshape(-1)
    if a.ndim != 2 or a.shape[0] != a.shape[1] or a.shape[0] != b.shape[0]:
        raise ShapeError(f"coefficient {a.shape} and right-hand side {b.shape} are incompatible")
    if a.shape[0] == 0:
        return np.zeros(0), 0.0
    _check_finite(a, "coefficient matrix")
    _check_finite(b, "right-hand side")
    scale = max(float(np.abs(a).max()), 1.0)
    if np.abs(a - a.T).max() > 1e-6 * scale:
        raise NumericError("coefficient matrix is not symmetric")
    a = 0.5 * (a + a.T)
    try:
        evals, evecs = np.linalg.eigh(a)
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"eigendecomposition failed: {exc}") from exc
    cutoff = solver_tol * np.abs(evals).max()
    keep = np.abs(evals) > cutoff
    proj = evecs[:, keep].T @ b
    weights = evecs[:, keep] @ (proj / evals[keep])
    residual = float(np.linalg.norm(a @ weights - b))
    return weights, residual
