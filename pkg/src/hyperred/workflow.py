"""Shared orchestration: configs to meshes, runs and reduction artifacts.

Everything the CLI subcommands and the optimization loop have in common
lives here, so both go through identical code paths (a requirement for
reproducible byte-identical artifacts).
"""

from __future__ import annotations

import numpy as np

from .assembly import Assembler
from .config import RunConfig
from .ddeim import DeimOperator, build_deim_operator, run_ddeim
from .decsw import EcswWeights, build_ecsw_training, compute_ecsw_weights, run_decsw
from .dpod import ReducedBasis, build_decomposed_basis, run_dpod
from .fom import (
    ContinuationRecord,
    SnapshotStore,
    arc_length_run,
    assemble_k_lin,
    record_nonlinear_snapshots,
)
from .mesh import DofLayout, Mesh, build_quarter_plate, number_dofs


def bc_spec(cfg: RunConfig) -> dict:
    return {
        "fixed": {"sym_x": ["ux"], "sym_y": ["uy"]},
        "load": {"node_set": "top", "component": "uy", "traction": cfg.geometry.traction},
    }


def build_problem(cfg: RunConfig, width_b: float | None = None) -> tuple[Mesh, DofLayout]:
    """Mesh + layout for the configured geometry (optionally re-widened).

    Width sweeps keep the corner grid index of the base geometry so the
    mesh family deforms smoothly in the width parameter.
    """
    g = cfg.geometry
    corner = None
    if width_b is not None:
        s_corner = g.width_b / (g.height + g.width_b)
        corner = int(round(g.nx * (1.0 - (1.0 - s_corner) ** (1.0 / g.arc_bias))))
    mesh = build_quarter_plate(
        width_b if width_b is not None else g.width_b,
        g.hole_radius,
        g.height,
        g.nx,
        g.ny,
        thickness=g.thickness,
        arc_bias=g.arc_bias,
        corner_index=corner,
    )
    return mesh, number_dofs(mesh, bc_spec(cfg))


def run_fom(cfg: RunConfig, width_b: float | None = None) -> tuple[ContinuationRecord, SnapshotStore]:
    mesh, layout = build_problem(cfg, width_b)
    provenance = {
        "method": "fom",
        "width_b": width_b if width_b is not None else cfg.geometry.width_b,
        "geometry": vars(cfg.geometry),
    }
    return arc_length_run(mesh, layout, cfg.material, cfg.solver, provenance)


def build_reduction_artifacts(cfg: RunConfig, store: SnapshotStore,
                              mesh: Mesh, layout: DofLayout) -> dict:
    """Offline phase for the configured method; returns the artifact map."""
    red = cfg.reduction
    basis = build_decomposed_basis(store, red.m_u, red.m_d)
    artifacts: dict = {"basis": basis}
    if red.method == "ddeim":
        k_lin = assemble_k_lin(mesh, layout, cfg.material)
        record_nonlinear_snapshots(store, k_lin)
        artifacts["k_lin"] = k_lin
        artifacts["deim"] = build_deim_operator(store, basis, red.k_u, red.k_d, k_lin, mesh)
    elif red.method == "decsw":
        training = build_ecsw_training(store, basis, mesh, layout, cfg.material, red.tau)
        artifacts["weights"] = compute_ecsw_weights(training)
    return artifacts


def run_reduced(cfg: RunConfig, artifacts: dict,
                mesh: Mesh, layout: DofLayout) -> ContinuationRecord:
    red = cfg.reduction
    basis: ReducedBasis = artifacts["basis"]
    if red.method == "dpod":
        return run_dpod(mesh, layout, cfg.material, cfg.solver, basis)
    if red.method == "ddeim":
        op: DeimOperator = artifacts["deim"]
        k_lin = artifacts.get("k_lin")
        if k_lin is None:
            k_lin = assemble_k_lin(mesh, layout, cfg.material)
        return run_ddeim(mesh, layout, cfg.material, cfg.solver, basis, op, k_lin)
    if red.method == "decsw":
        weights: EcswWeights = artifacts["weights"]
        return run_decsw(mesh, layout, cfg.material, cfg.solver, basis, weights)
    raise ValueError(f"'{red.method}' is not a reduced method")


def fom_equivalent_evals(record: ContinuationRecord) -> int:
    return record.n_element_evals


def build_pooled_artifacts(
    cfg: RunConfig,
    seed_stores: list[SnapshotStore],
    seed_widths: list[float],
) -> tuple[dict, int]:
    """Offline phase from several seed runs at different widths.

    The basis comes from the pooled solution snapshots.  Geometry-bound
    quantities are evaluated per seed: element-residual training blocks
    are replayed on each seed's own mesh and stacked; nonlinear-force
    snapshots use each seed's own zero-state tangent.  Returns the
    artifact map plus the offline element-evaluation count.
    """
    red = cfg.reduction
    pooled = SnapshotStore.concatenate(seed_stores)
    basis = build_decomposed_basis(pooled, red.m_u, red.m_d)
    artifacts: dict = {"basis": basis}
    offline_evals = 0
    if red.method == "decsw":
        from .decsw import EcswTraining

        blocks = []
        rhs = []
        for store_i, width_i in zip(seed_stores, seed_widths):
            mesh_i, layout_i = build_problem(cfg, width_b=width_i)
            tr = build_ecsw_training(store_i, basis, mesh_i, layout_i, cfg.material, red.tau)
            blocks.append(tr.y)
            rhs.append(tr.b)
            offline_evals += store_i.n_snapshots * mesh_i.n_elements
        stacked = EcswTraining(
            y=np.concatenate(blocks, axis=0),
            b=np.concatenate(rhs),
            tau=red.tau,
            provenance={"pooled_widths": list(seed_widths)},
        )
        artifacts["weights"] = compute_ecsw_weights(stacked)
    elif red.method == "ddeim":
        nl_blocks = []
        for store_i, width_i in zip(seed_stores, seed_widths):
            mesh_i, layout_i = build_problem(cfg, width_b=width_i)
            k_lin_i = assemble_k_lin(mesh_i, layout_i, cfg.material)
            record_nonlinear_snapshots(store_i, k_lin_i)
            nl_blocks.append(store_i.nonlinear_force_snapshots)
        pooled.nonlinear_force_snapshots = np.concatenate(nl_blocks, axis=1)
        mesh0, layout0 = build_problem(cfg)
        k_lin0 = assemble_k_lin(mesh0, layout0, cfg.material)
        artifacts["k_lin"] = k_lin0
        artifacts["deim"] = build_deim_operator(pooled, basis, red.k_u, red.k_d, k_lin0, mesh0)
    return artifacts, offline_evals


def rebuild_deim_for_mesh(cfg: RunConfig, artifacts: dict,
                          mesh: Mesh, layout: DofLayout) -> dict:
    """Refresh only the geometry-bound operator pieces for a new width.

    The interpolation basis, selected DOFs and evaluation elements stay
    frozen; the zero-state tangent and its projection are recomputed for
    the new geometry (they are mesh-dependent constants, not training
    data).
    """
    op: DeimOperator = artifacts["deim"]
    basis: ReducedBasis = artifacts["basis"]
    k_lin = assemble_k_lin(mesh, layout, cfg.material)
    new_op = DeimOperator(
        omega=op.omega,
        selected_dofs=op.selected_dofs,
        m_deim=op.m_deim,
        k_lin_reduced=basis.phi.T @ (k_lin @ basis.phi),
        evaluation_elements=op.evaluation_elements,
        k_u=op.k_u,
        k_d=op.k_d,
        cond_interp=op.cond_interp,
        provenance=op.provenance,
    )
    return {**artifacts, "deim": new_op, "k_lin": k_lin}
