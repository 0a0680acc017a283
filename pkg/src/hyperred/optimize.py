"""Limit-load width optimization via scalar root finding.

The design question "which plate width gives a desired limit load" is a
scalar root find on ``g(b) = F_lim(b) - F_target``.  :func:`brent`
implements the classic bracketing scheme (inverse quadratic
interpolation with secant and bisection fallbacks) in-repo; the
optimization protocol evaluates three seed widths with the full-order
model (checking monotonicity and bracketing), builds the reduced-order
evaluator once from those seeds' snapshots, and then lets the root
finder drive the reduced model only.  Reduction artifacts are never
refreshed mid-optimization.

The iteration table mirrors the protocol: one row per limit-load
evaluation with the width and the squared error
``(F_lim - F_target)**2``.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field
from typing import Callable

import numpy as np


class OptimizationError(RuntimeError):
    """Seed runs violate the protocol preconditions (bracket/monotonicity)."""


@dataclass
class BrentResult:
    root: float
    converged: bool
    n_evaluations: int


def brent(
    f: Callable[[float], float],
    a: float,
    b: float,
    fa: float | None = None,
    fb: float | None = None,
    xtol: float = 1e-10,
    max_iter: int = 60,
) -> BrentResult:
    """Root of ``f`` on the bracketing interval [a, b].

    Inverse quadratic interpolation where it is safe, secant otherwise,
    bisection as the fallback; terminates when the bracket shrinks below
    ``xtol`` (plus floating-point slack).  ``fa``/``fb`` may be supplied
    to reuse known endpoint evaluations.
    """
    rtol = 4.0 * np.finfo(float).eps
    fa = f(a) if fa is None else fa
    fb = f(b) if fb is None else fb
    evals = 0
    if fa == 0.0:
        return BrentResult(a, True, evals)
    if fb == 0.0:
        return BrentResult(b, True, evals)
    if fa * fb > 0.0:
        raise OptimizationError("root is not bracketed by the seed interval")

    c, fc = a, fa
    d = e = b - a
    for _ in range(max_iter):
        if fb * fc > 0.0:
            c, fc = a, fa
            d = e = b - a
        if abs(fc) < abs(fb):
            a, b, c = b, c, b
            fa, fb, fc = fb, fc, fb
        tol1 = 2.0 * rtol * abs(b) + 0.5 * xtol
        xm = 0.5 * (c - b)
        if abs(xm) <= tol1 or fb == 0.0:
            return BrentResult(b, True, evals)
        if abs(e) >= tol1 and abs(fa) > abs(fb):
            s = fb / fa
            if a == c:
                p = 2.0 * xm * s
                q = 1.0 - s
            else:
                q = fa / fc
                r = fb / fc
                p = s * (2.0 * xm * q * (q - r) - (b - a) * (r - 1.0))
                q = (q - 1.0) * (r - 1.0) * (s - 1.0)
            if p > 0.0:
                q = -q
            p = abs(p)
            if 2.0 * p < min(3.0 * xm * q - abs(tol1 * q), abs(e * q)):
                e = d
                d = p / q
            else:
                d = xm
                e = d
        else:
            d = xm
            e = d
        a, fa = b, fb
        b += d if abs(d) > tol1 else (tol1 if xm > 0.0 else -tol1)
        fb = f(b)
        evals += 1
    return BrentResult(b, False, evals)


@dataclass
class OptimizationResult:
    """Outcome of a limit-load width optimization."""

    width: float
    converged: bool
    table: list[dict] = dc_field(default_factory=list)

    def to_json_dict(self) -> dict:
        return {"width": self.width, "converged": self.converged, "table": self.table}


def optimize_width(
    seed_eval: Callable[[float], float],
    rom_factory: Callable[[], Callable[[float], float]] | None,
    bracket: tuple[float, float],
    target_limit_load: float,
    tol_width: float,
    max_iterations: int = 40,
) -> OptimizationResult:
    """Three full-order seeds, then root finding on the (reduced) model.

    ``seed_eval(width)`` must run the full-order model and return the
    limit load (the caller records snapshots inside).  ``rom_factory``
    is invoked once, after the seeds, and must return the frozen
    reduced evaluator; pass ``None`` for a full-order-only optimization.
    Preconditions checked from the seeds: the limit load is strictly
    monotone over the bracket and the target is bracketed.
    """
    lo, hi = bracket
    if not lo < hi:
        raise OptimizationError("bracket must satisfy lo < hi")
    mid = 0.5 * (lo + hi)
    table: list[dict] = []

    def note(width: float, f_lim: float, model: str) -> None:
        table.append(
            {
                "iteration": len(table) + 1,
                "width": float(width),
                "limit_load": float(f_lim),
                "sq_error": float((f_lim - target_limit_load) ** 2),
                "model": model,
            }
        )

    f_lo = seed_eval(lo)
    note(lo, f_lo, "fom")
    f_mid = seed_eval(mid)
    note(mid, f_mid, "fom")
    f_hi = seed_eval(hi)
    note(hi, f_hi, "fom")

    if not (f_lo < f_mid < f_hi or f_lo > f_mid > f_hi):
        raise OptimizationError(
            f"limit load is not monotone over the bracket: {f_lo:.4g}, {f_mid:.4g}, {f_hi:.4g}"
        )
    g_lo = f_lo - target_limit_load
    g_hi = f_hi - target_limit_load
    if g_lo * g_hi > 0.0:
        raise OptimizationError("target limit load is not bracketed by the seed runs")

    inner = rom_factory() if rom_factory is not None else seed_eval
    model_tag = "rom" if rom_factory is not None else "fom"

    def g(width: float) -> float:
        f_lim = inner(width)
        note(width, f_lim, model_tag)
        return f_lim - target_limit_load

    res = brent(g, lo, hi, fa=g_lo, fb=g_hi, xtol=tol_width, max_iter=max_iterations)
    return OptimizationResult(width=res.root, converged=res.converged, table=table)
