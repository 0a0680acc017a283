"""Dense linear-algebra kernels used by the reduction machinery.

Two building blocks live here:

- a thin SVD with rank truncation and a deterministic column-sign
  convention (largest-magnitude entry of every left vector is made
  positive), so bases rebuilt from the same snapshots are bit-identical
  across runs;
- a sparse non-negative least-squares solver (Lawson-Hanson active set)
  with an early exit on the relative-residual test
  ``||Y w - b||_2 < tau * ||b||_2``.  The early exit is what produces
  sparse weight vectors for tau > 0.

All functions are pure; nothing here holds shared mutable state.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class LinalgError(ValueError):
    """Raised on contract violations of the kernels in this module."""


class RankError(ValueError):
    """A reduction request exceeds the attainable rank.

    ``attainable`` carries the usable rank(s) so callers can adjust.
    """

    def __init__(self, message: str, attainable):
        super().__init__(message)
        self.attainable = attainable


@dataclass(frozen=True)
class SvdResult:
    """Thin SVD ``matrix = left @ diag(singular_values) @ right``.

    ``left`` is (n, r), ``right`` is (r, l) with r = min(n, l).  Singular
    values are non-negative and non-increasing; left columns are
    orthonormal.
    """

    left_vectors: np.ndarray
    singular_values: np.ndarray
    right_vectors: np.ndarray

    @property
    def rank(self) -> int:
        return self.singular_values.size

    def numerical_rank(self, rel_tol: float = 1e-12) -> int:
        """Count singular values above ``rel_tol`` times the largest one."""
        s = self.singular_values
        if s.size == 0 or s[0] == 0.0:
            return 0
        return int(np.count_nonzero(s > rel_tol * s[0]))


@dataclass(frozen=True)
class NnlsSolution:
    """Result of :func:`snnls`.

    ``weights`` are all >= 0, ``residual_norm`` is recomputed from the
    inputs (not carried over from solver internals), and ``termination``
    records which stopping condition fired: ``"tolerance_met"`` when the
    relative-residual test passed, ``"optimum_reached"`` when the
    active-set optimum was hit first.  ``tolerance_not_met`` flags the
    case where the optimum was reached but the requested tolerance was
    still out of reach.
    """

    weights: np.ndarray
    residual_norm: float
    iterations: int
    termination: str
    tolerance_not_met: bool


def _check_finite_columns(matrix: np.ndarray, name: str) -> None:
    bad = ~np.isfinite(matrix)
    if bad.any():
        col = int(np.argwhere(bad.any(axis=0))[0, 0])
        raise LinalgError(f"{name} contains non-finite entries (first offending column: {col})")


def svd_thin(matrix: np.ndarray) -> SvdResult:
    """Thin SVD with the deterministic sign convention applied.

    The largest-magnitude entry of each left singular vector is made
    positive (ties broken by lowest row index); the matching right
    vector row is flipped along with it so the product is unchanged.
    """
    matrix = np.asarray(matrix, dtype=float)
    if matrix.ndim != 2 or matrix.size == 0:
        raise LinalgError("svd_thin expects a non-empty 2d matrix")
    _check_finite_columns(matrix, "svd input")

    left, sig, right = np.linalg.svd(matrix, full_matrices=False)
    # Sign convention: flip columns so the dominant entry is positive.
    dominant = np.abs(left).argmax(axis=0)
    signs = np.sign(left[dominant, np.arange(left.shape[1])])
    signs[signs == 0.0] = 1.0
    left = left * signs
    right = right * signs[:, None]
    return SvdResult(left_vectors=left, singular_values=sig, right_vectors=right)


def truncate_basis(svd: SvdResult, m: int) -> np.ndarray:
    """First ``m`` left singular vectors as an (n, m) orthonormal block."""
    r = svd.rank
    if not 1 <= m <= r:
        raise LinalgError(f"truncation size m={m} out of range [1, {r}] (available rank r={r})")
    return np.array(svd.left_vectors[:, :m])


def snnls(Y: np.ndarray, b: np.ndarray, tau: float, max_iter: int | None = None) -> NnlsSolution:
    """Sparse non-negative least squares via Lawson-Hanson with early exit.

    Solves ``min ||Y w - b||_2  s.t.  w >= 0`` greedily, adding one column
    per outer iteration, and stops as soon as
    ``||Y w - b||_2 < tau * ||b||_2`` (or exactly zero residual) or the
    active-set optimum is reached.  Stopping early is what keeps ``w``
    sparse; at tau = 0 this is plain NNLS.

    Parameters
    ----------
    Y : (m, n) array
    b : (m,) array
    tau : float
        Relative residual tolerance, >= 0.
    max_iter : int, optional
        Cap on outer iterations (default ``3 * n``).
    """
    Y = np.asarray(Y, dtype=float)
    b = np.asarray(b, dtype=float).reshape(-1)
    if Y.ndim != 2 or Y.shape[0] != b.size:
        raise LinalgError(f"shape mismatch: Y is {Y.shape}, b has length {b.size}")
    if tau < 0.0:
        raise LinalgError("tau must be >= 0")
    _check_finite_columns(Y, "snnls Y")

    n = Y.shape[1]
    if max_iter is None:
        max_iter = max(3 * n, 30)
    bnorm = float(np.linalg.norm(b))
    target = tau * bnorm
    grad_tol = 10.0 * np.finfo(float).eps * max(Y.shape) * max(1.0, float(np.abs(b).max(initial=0.0)))

    w = np.zeros(n)
    passive = np.zeros(n, dtype=bool)
    banned = np.zeros(n, dtype=bool)  # zero-progress candidates, cleared on improvement
    resid = b.copy()
    rnorm = bnorm
    iterations = 0
    termination = "optimum_reached"

    def _feasible(r: float) -> bool:
        return r < target or r == 0.0

    if _feasible(rnorm):
        # The empty solution already meets the tolerance (greedy starts empty).
        return NnlsSolution(w, _recomputed_norm(Y, w, b), 0, "tolerance_met", False)

    while iterations < max_iter:
        grad = Y.T @ resid
        grad[passive | banned] = -np.inf
        j = int(np.argmax(grad))
        if not np.isfinite(grad[j]) or grad[j] <= grad_tol:
            break  # KKT optimum on the current passive set (up to banned columns)
        passive[j] = True
        iterations += 1

        # Inner loop: solve LS on the passive set, walk back if any
        # component leaves the feasible orthant.
        for _ in range(2 * n):
            cols = np.flatnonzero(passive)
            sol, *_ = np.linalg.lstsq(Y[:, cols], b, rcond=None)
            if np.all(sol > 0.0):
                w = np.zeros(n)
                w[cols] = sol
                break
            trial = np.zeros(n)
            trial[cols] = sol
            neg = cols[sol <= 0.0]
            alpha = np.min(w[neg] / (w[neg] - trial[neg]))
            w = w + alpha * (trial - w)
            passive = w > 0.0
            if not passive.any():
                w = np.zeros(n)
                break

        resid = b - Y @ w
        new_rnorm = float(np.linalg.norm(resid))
        if new_rnorm < rnorm - 1e-14 * bnorm:
            banned[:] = False  # genuine progress unlocks every candidate
        else:
            # Degenerate add (near-collinear column): trying it again before
            # the residual changes would cycle forever.
            banned[j] = True
        rnorm = new_rnorm
        if _feasible(rnorm):
            termination = "tolerance_met"
            break

    met = _feasible(rnorm)
    if met:
        termination = "tolerance_met"
    return NnlsSolution(
        weights=w,
        residual_norm=_recomputed_norm(Y, w, b),
        iterations=iterations,
        termination=termination,
        tolerance_not_met=not met,
    )


def _recomputed_norm(Y: np.ndarray, w: np.ndarray, b: np.ndarray) -> float:
    return float(np.linalg.norm(Y @ w - b))
