"""Force-displacement curve error, timing shares, selection statistics.

The curve error resamples both records onto N uniformly spaced shared
displacements and averages the relative reaction-force mismatch::

    eps = (1/N) sum_i |F_ref(u_i) - F_cand(u_i)| / F_ref(u_i)

Sampling runs over ``(0, U]`` with ``U = min(max displacement of the two
curves)`` -- the only interval defined when one run terminates early.
Samples where the reference force vanishes are excluded (their count is
reported).  Arc-length paths may backtrack in displacement; curves are
made functions of displacement by first crossing: the value at ``u`` is
the force at the first instant the path reaches ``u``.  Records are
prepended with the unloaded state (0, 0).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class MetricsError(ValueError):
    """Invalid comparison inputs (for example, no displacement overlap)."""


@dataclass(frozen=True)
class CurveComparison:
    """Resampled curve error plus the cost ratios of the candidate run."""

    epsilon: float
    sample_count: int
    time_ratio: float
    element_fraction: float
    excluded_samples: int
    backtracking_detected: bool

    def to_json_dict(self) -> dict:
        return {
            "epsilon": self.epsilon,
            "N": self.sample_count,
            "time_ratio": self.time_ratio,
            "element_fraction": self.element_fraction,
            "excluded_samples": self.excluded_samples,
            "backtracking_detected": self.backtracking_detected,
        }


def _first_crossing_segments(u: np.ndarray, f: np.ndarray):
    """Piecewise-linear first-crossing function of displacement.

    Returns segment arrays (ua, ub, fa, fb) covering (u[0], max u] with
    ua < ub strictly, plus a flag for detected backtracking.  Only parts
    of the path that extend the running displacement maximum contribute;
    re-visits after a backtrack are ignored (first crossing wins).
    """
    if u.size < 2:
        raise MetricsError("need at least two points per curve")
    ua, ub, fa, fb = [], [], [], []
    u_max = u[0]
    backtrack = False
    for j in range(1, u.size):
        u0, u1, f0, f1 = u[j - 1], u[j], f[j - 1], f[j]
        if u1 < u0:
            backtrack = True
        if u1 <= u_max:
            continue
        lo = max(u0, u_max)
        if u1 == u0:
            continue
        f_lo = f0 + (f1 - f0) * (lo - u0) / (u1 - u0)
        ua.append(lo)
        ub.append(u1)
        fa.append(f_lo)
        fb.append(f1)
        u_max = u1
    if not ua:
        raise MetricsError("curve has no displacement extent")
    return np.array(ua), np.array(ub), np.array(fa), np.array(fb), backtrack


def _sample(segments, x: np.ndarray) -> np.ndarray:
    ua, ub, fa, fb, _ = segments
    idx = np.searchsorted(ub, x, side="left")
    idx = np.clip(idx, 0, ub.size - 1)
    t = (x - ua[idx]) / (ub[idx] - ua[idx])
    t = np.clip(t, 0.0, 1.0)
    return fa[idx] + (fb[idx] - fa[idx]) * t


def _curve_arrays(record) -> tuple[np.ndarray, np.ndarray]:
    """Accept a ContinuationRecord or a list of row dicts; prepend (0, 0)."""
    rows = record.rows if hasattr(record, "rows") else record
    u = np.array([0.0] + [r["u_control_mm"] for r in rows])
    f = np.array([0.0] + [r["F_reaction_N"] for r in rows])
    return u, f


def curve_error(reference, candidate, n_samples: int = 1000) -> tuple[float, int, bool]:
    """Mean relative reaction-force error over shared displacements.

    Returns ``(epsilon, excluded_samples, backtracking_detected)``.
    """
    if n_samples < 1:
        raise MetricsError("n_samples must be positive")
    u_ref, f_ref = _curve_arrays(reference)
    u_cand, f_cand = _curve_arrays(candidate)
    seg_ref = _first_crossing_segments(u_ref, f_ref)
    seg_cand = _first_crossing_segments(u_cand, f_cand)
    hi = min(seg_ref[1][-1], seg_cand[1][-1])
    lo = max(seg_ref[0][0], seg_cand[0][0])
    if hi <= lo:
        raise MetricsError("curves share no displacement interval")
    x = np.linspace(hi / n_samples, hi, n_samples)
    x = x[x > lo]
    fr = _sample(seg_ref, x)
    fc = _sample(seg_cand, x)
    keep = fr != 0.0
    excluded = int(n_samples - keep.sum())
    if not np.any(keep):
        raise MetricsError("reference force vanishes at every sample")
    eps = float(np.mean(np.abs(fr[keep] - fc[keep]) / np.abs(fr[keep])))
    return eps, excluded, bool(seg_ref[4] or seg_cand[4])


def compare_runs(
    reference,
    candidate,
    n_samples: int = 1000,
    reference_summary: dict | None = None,
    candidate_summary: dict | None = None,
) -> CurveComparison:
    """Curve error plus timing / element-evaluation cost ratios.

    ``element_fraction`` is the candidate's element evaluations per
    Newton iteration divided by the reference's (the online assembly
    cost ratio); ``time_ratio`` compares total assembly+solve seconds.
    Both fall back to 1.0 when summaries are not supplied.
    """
    eps, excluded, backtrack = curve_error(reference, candidate, n_samples)
    time_ratio = 1.0
    element_fraction = 1.0
    if reference_summary and candidate_summary:
        t_ref = reference_summary.get("t_assembly_s", 0.0) + reference_summary.get("t_solve_s", 0.0)
        t_cand = candidate_summary.get("t_assembly_s", 0.0) + candidate_summary.get("t_solve_s", 0.0)
        if t_ref > 0.0:
            time_ratio = t_cand / t_ref
        per_it_ref = _evals_per_iteration(reference_summary)
        per_it_cand = _evals_per_iteration(candidate_summary)
        if per_it_ref > 0.0:
            element_fraction = per_it_cand / per_it_ref
    return CurveComparison(
        epsilon=eps,
        sample_count=n_samples,
        time_ratio=float(time_ratio),
        element_fraction=float(element_fraction),
        excluded_samples=excluded,
        backtracking_detected=backtrack,
    )


def _evals_per_iteration(summary: dict) -> float:
    iters = summary.get("n_newton_iters", 0)
    if not iters:
        return 0.0
    return summary.get("n_element_evals", 0) / iters


def timing_report(rows: list[dict]) -> dict:
    """Assembly/solve wall-time breakdown of a continuation record.

    Flags clock skew (negative durations) instead of failing.
    """
    t_asm = np.array([r["t_assembly_s"] for r in rows], dtype=float)
    t_sol = np.array([r["t_solve_s"] for r in rows], dtype=float)
    skew = bool(np.any(t_asm < 0.0) or np.any(t_sol < 0.0))
    total = float(t_asm.sum() + t_sol.sum())
    return {
        "t_assembly_s": float(t_asm.sum()),
        "t_solve_s": float(t_sol.sum()),
        "t_total_s": total,
        "assembly_share": float(t_asm.sum() / total) if total > 0.0 else 0.0,
        "solve_share": float(t_sol.sum() / total) if total > 0.0 else 0.0,
        "clock_skew_flagged": skew,
    }
