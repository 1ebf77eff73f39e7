"""Square maxvol: pick r rows of a tall n x r matrix with near-maximal |det|."""
import warnings
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from . import _kernels
from .errors import RankDeficientError, TTCAWarning

RANK_RTOL = 1e-10


@dataclass(frozen=True)
class MaxvolResult:
    rows: np.ndarray          # (r,) selected row indices
    coefficients: np.ndarray  # (n, r) A @ inv(A[rows])
    iterations: int           # number of row swaps
    dominance: float          # max |coefficient| on exit
    converged: bool
    logdet: np.ndarray        # log|det A[rows]| after 0, 1, ... swaps


def numerical_rank(A, rtol=RANK_RTOL):
    s = np.linalg.svd(A, compute_uv=False)
    if s.size == 0 or s[0] == 0.0:
        return 0
    return int(np.sum(s > rtol * s[0]))


def maxvol(A, tol=1e-2, max_iters=100):
    """Greedy row-swap maxvol starting from the pivot rows of an LU factorization.

    Each swap replaces the selected row that gives the largest coefficient
    ``|B[i, j]| > 1 + tol`` and multiplies |det| by that coefficient, so the
    volume grows strictly.  On exit every ``|B[i, j]| <= 1 + tol`` unless
    ``max_iters`` ran out, in which case a :class:`TTCAWarning` is issued.
    """
    A = np.asarray(A, dtype=np.float64)
    if A.ndim != 2:
        raise ValueError("maxvol expects a matrix")
    n, r = A.shape
    if n < r:
        raise ValueError(f"maxvol needs n >= r, got {n} x {r}")
    rank = numerical_rank(A)
    if rank < r:
        raise RankDeficientError(f"matrix of shape {A.shape} has numerical rank {rank} < {r}", rank)

    p, _, _ = scipy.linalg.lu(A, p_indices=True)
    rows = np.ascontiguousarray(np.argsort(p, kind="stable")[:r], dtype=np.int64)
    sub = A[rows]
    B = np.ascontiguousarray(np.linalg.solve(sub.T, A.T).T)
    _, logdet0 = np.linalg.slogdet(sub)

    iters, gains = _kernels.maxvol_swaps(B, rows, tol, max_iters)
    dominance = float(np.max(np.abs(B))) if B.size else 0.0
    converged = dominance <= 1.0 + tol
    if not converged:
        warnings.warn(f"maxvol stopped after {iters} swaps with dominance {dominance:.4g} > {1 + tol:.4g}",
                      TTCAWarning, stacklevel=2)
    logdet = logdet0 + np.concatenate([[0.0], np.cumsum(np.log(gains))])
    return MaxvolResult(rows=rows.copy(), coefficients=B, iterations=int(iters),
                        dominance=dominance, converged=converged, logdet=logdet)
