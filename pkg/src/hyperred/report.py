"""Figure rendering for run artifacts (headless matplotlib).

Every report path that writes delimited output can also render a figure
next to it: force-displacement curves for single runs, overlays with the
error annotation for comparisons, and the iteration scatter for the
width optimization.  Contour/field plotting is deliberately not provided
here; nodal fields leave the package as delimited data.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt


def _curve(rows) -> tuple[list[float], list[float]]:
    u = [0.0] + [r["u_control_mm"] for r in rows]
    f = [0.0] + [r["F_reaction_N"] for r in rows]
    return u, f


def render_record_figure(rows: list[dict], path, title: str = "") -> None:
    """Force-displacement curve of one continuation record."""
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    u, f = _curve(rows)
    ax.plot(u, f, "-o", ms=2.5, lw=1.2, color="#00549f")
    ax.set_xlabel("Control displacement [mm]")
    ax.set_ylabel("Reaction force [N]")
    if title:
        ax.set_title(title)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def render_comparison_figure(ref_rows, cand_rows, comparison: dict, path,
                             labels=("reference", "candidate")) -> None:
    """Overlay of two force-displacement curves with the error annotation."""
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    u, f = _curve(ref_rows)
    ax.plot(u, f, "-", lw=1.6, color="#00549f", label=labels[0])
    u, f = _curve(cand_rows)
    ax.plot(u, f, "--", lw=1.4, color="#f6a800", label=labels[1])
    ax.set_xlabel("Control displacement [mm]")
    ax.set_ylabel("Reaction force [N]")
    eps = comparison.get("epsilon")
    if eps is not None:
        ax.set_title(f"mean relative force error = {eps:.3e}")
    ax.legend()
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def render_optimization_figure(table: list[dict], target: float, path) -> None:
    """Limit load vs width for every optimization iteration."""
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    for model, color in (("fom", "#00549f"), ("rom", "#f6a800")):
        pts = [(r["width"], r["limit_load"]) for r in table if r["model"] == model]
        if pts:
            ax.plot(*zip(*pts), "o", color=color, label=f"{model} evaluations", ms=5)
    ax.axhline(target, color="k", lw=0.8, ls=":", label="target limit load")
    ax.set_xlabel("Width [mm]")
    ax.set_ylabel("Limit load [N]")
    ax.legend()
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
