"""Field-decomposed empirical interpolation of the nonlinear forces.

The residual is split around the zero-state tangent ``K_lin = K(0)``::

    G(V) = K_lin V + R_nl(V) - lam P,    R_nl(V) = R(V) - K_lin V

and only the nonlinear remainder is interpolated.  Nonlinear-force
snapshots are field-split like the solution snapshots; each field block
gets its own SVD-derived interpolation basis and its own greedy pass of
the interpolation-DOF selection; the selections and bases are then
concatenated.  The online operator

    M = phi^T Omega (Z^T Omega)^{-1}

is constant and computed once; online iterations evaluate only the
elements that contain a selected DOF and read the interpolation samples
off the assembled rows (full element kernels are computed for the
selection neighborhood and non-selected rows discarded; row-sparse
kernels would be an optimization, not a correctness change).

Greedy selection ties break to the lowest index so operators rebuild
identically across runs.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np
import scipy.sparse as sp

from .assembly import Assembler
from .dpod import GalerkinModel, RANK_REL_TOL, ReducedBasis
from .fom import ContinuationRecord, SolverConfig, SnapshotStore, _FactorizedSystem, run_continuation
from .io import read_matrix, write_json, write_matrix, read_json
from .linalg import LinalgError, RankError, svd_thin, truncate_basis
from .material import MaterialParams, StateBatch
from .mesh import DofLayout, Mesh


@dataclass
class DeimOperator:
    """Constant interpolation operator plus its bookkeeping.

    ``selected_dofs`` keeps selection order (displacement block first);
    ``evaluation_elements`` are exactly the elements containing at least
    one selected DOF's node; ``cond_interp`` is the condition number of
    ``Z^T Omega``.
    """

    omega: np.ndarray
    selected_dofs: np.ndarray
    m_deim: np.ndarray
    k_lin_reduced: np.ndarray
    evaluation_elements: np.ndarray
    k_u: int
    k_d: int
    cond_interp: float
    provenance: dict = dc_field(default_factory=dict)

    @property
    def k(self) -> int:
        return self.k_u + self.k_d

    def save(self, matrix_path, sidecar_path) -> None:
        write_matrix(matrix_path, self.omega, {"kind": "deim_omega"})
        write_matrix(str(matrix_path) + ".m", self.m_deim, {"kind": "deim_m"})
        write_matrix(str(matrix_path) + ".klin", self.k_lin_reduced, {"kind": "deim_klin"})
        write_json(
            sidecar_path,
            {
                "k_u": self.k_u,
                "k_d": self.k_d,
                "selected_dofs": self.selected_dofs.tolist(),
                "evaluation_elements": self.evaluation_elements.tolist(),
                "cond_interp": self.cond_interp,
                "provenance": self.provenance,
            },
        )

    @classmethod
    def load(cls, matrix_path, sidecar_path) -> "DeimOperator":
        omega, _ = read_matrix(matrix_path)
        m_deim, _ = read_matrix(str(matrix_path) + ".m")
        k_lin_reduced, _ = read_matrix(str(matrix_path) + ".klin")
        meta = read_json(sidecar_path)
        return cls(
            omega=omega,
            selected_dofs=np.asarray(meta["selected_dofs"], dtype=np.int64),
            m_deim=m_deim,
            k_lin_reduced=k_lin_reduced,
            evaluation_elements=np.asarray(meta["evaluation_elements"], dtype=np.int64),
            k_u=int(meta["k_u"]),
            k_d=int(meta["k_d"]),
            cond_interp=float(meta["cond_interp"]),
            provenance=meta.get("provenance", {}),
        )


def deim_greedy(omega_block: np.ndarray) -> np.ndarray:
    """Greedy interpolation-DOF selection.

    First DOF: argmax of the first column's magnitudes.  Each further
    step solves the interpolatory system on the chosen DOFs for the next
    column, takes the residual against its interpolation, and picks the
    residual's largest-magnitude entry.  Ties break to the lowest index.
    """
    omega_block = np.asarray(omega_block, dtype=float)
    if omega_block.ndim != 2 or omega_block.shape[1] == 0:
        raise LinalgError("greedy selection expects a non-empty basis block")
    k = omega_block.shape[1]
    selected = [int(np.argmax(np.abs(omega_block[:, 0])))]
    for i in range(1, k):
        sub = omega_block[np.asarray(selected), :i]
        try:
            coeff = np.linalg.solve(sub, omega_block[np.asarray(selected), i])
        except np.linalg.LinAlgError as exc:
            raise LinalgError(f"singular interpolatory subsystem at greedy iteration {i}") from exc
        residual = omega_block[:, i] - omega_block[:, :i] @ coeff
        selected.append(int(np.argmax(np.abs(residual))))
    if len(set(selected)) != k:
        raise LinalgError("greedy selection produced duplicate DOFs (rank-deficient block)")
    return np.asarray(selected, dtype=np.int64)


def elements_containing_dofs(mesh: Mesh, dofs: np.ndarray) -> np.ndarray:
    """Elements owning at least one node of the given DOFs (sorted ids)."""
    nodes = np.unique(np.asarray(dofs, dtype=np.int64) // 3)
    hit = np.isin(mesh.elements, nodes).any(axis=1)
    return np.flatnonzero(hit).astype(np.int64)


def _field_interpolation(d_nl: np.ndarray, mask: np.ndarray, k: int, label: str):
    if k == 0:
        return np.zeros((d_nl.shape[0], 0)), np.empty(0, dtype=np.int64)
    block = np.zeros_like(d_nl)
    block[mask, :] = d_nl[mask, :]
    if not np.any(block):
        raise RankError(f"{label} nonlinear-force snapshots are identically zero "
                        "(rank 0, interpolation inapplicable)", 0)
    svd = svd_thin(block)
    attainable = svd.numerical_rank(RANK_REL_TOL)
    if k > attainable:
        raise RankError(
            f"requested {k} {label} interpolation modes but the snapshots support only {attainable}",
            attainable,
        )
    omega = truncate_basis(svd, k)
    return omega, deim_greedy(omega)


def build_deim_operator(
    store: SnapshotStore,
    basis: ReducedBasis,
    k_u: int,
    k_d: int,
    k_lin: sp.spmatrix,
    mesh: Mesh,
) -> DeimOperator:
    """Per-field interpolation bases, selections and the constant operator."""
    if store.nonlinear_force_snapshots is None:
        raise ValueError("store has no nonlinear-force snapshots; derive them first")
    d_nl = store.nonlinear_force_snapshots
    omega_u, sel_u = _field_interpolation(d_nl, store.field_mask_u, k_u, "displacement")
    omega_d, sel_d = _field_interpolation(d_nl, store.field_mask_d, k_d, "nonlocal-damage")

    omega = np.concatenate([omega_u, omega_d], axis=1)
    selected = np.concatenate([sel_u, sel_d])
    interp = omega[selected, :]  # Z^T Omega
    cond = float(np.linalg.cond(interp))
    m_deim = np.linalg.solve(interp.T, (basis.phi.T @ omega).T).T
    k_hat_lin = basis.phi.T @ (k_lin @ basis.phi)
    return DeimOperator(
        omega=omega,
        selected_dofs=selected,
        m_deim=m_deim,
        k_lin_reduced=k_hat_lin,
        evaluation_elements=elements_containing_dofs(mesh, selected),
        k_u=k_u,
        k_d=k_d,
        cond_interp=cond,
        provenance={"n_snapshots": store.n_snapshots},
    )


class DeimModel(GalerkinModel):
    """Interpolated continuation model (restricted element evaluations).

    Gauss-point states are kept for the evaluation neighborhood only, in
    subset order.
    """

    def __init__(self, assembler: Assembler, basis: ReducedBasis, op: DeimOperator,
                 k_lin: sp.spmatrix):
        super().__init__(assembler, basis)
        self.op = op
        self.elements = np.sort(op.evaluation_elements)
        self.states = StateBatch.virgin(4 * self.elements.size)
        self.unit_weights = np.ones(self.elements.size)
        self.k_lin_rows = k_lin.tocsr()[op.selected_dofs, :]
        self.phi_sel = basis.phi  # full basis; row slices taken per iteration

    def assemble(self, q: np.ndarray, lam: float):
        v = self.phi @ q
        sys_sub = self.assembler.subset(
            v, self.states, self.elements, self.unit_weights,
            need_tangent=True, local_states=True,
        )
        sel = self.op.selected_dofs
        r_nl_sel = sys_sub.r[sel] - self.k_lin_rows @ v
        g_hat = self.op.k_lin_reduced @ q + self.op.m_deim @ r_nl_sel - lam * self.p_hat
        k_rows = sys_sub.k_t.tocsr()[sel, :]
        k_nl_rows = k_rows - self.k_lin_rows
        k_hat = self.op.k_lin_reduced + self.op.m_deim @ (k_nl_rows @ self.phi)
        if self.capture_trace:
            self.trace.append(q.copy())
        return _FactorizedSystem(k_hat), g_hat, sys_sub

    def commit(self, aux) -> None:
        self.states = aux.states_new


def deim_reduced_step(
    op: DeimOperator,
    basis: ReducedBasis,
    assembler: Assembler,
    q_hat: np.ndarray,
    load_factor: float,
    config: SolverConfig,
    k_lin: sp.spmatrix,
):
    """One interpolated Newton solve at fixed load (spec-level operation)."""
    from .fom import newton_step

    model = DeimModel(assembler, basis, op, k_lin)
    return newton_step(model, q_hat, load_factor, config)


def run_ddeim(
    mesh: Mesh,
    layout: DofLayout,
    params: MaterialParams,
    config: SolverConfig,
    basis: ReducedBasis,
    op: DeimOperator,
    k_lin: sp.spmatrix,
) -> ContinuationRecord:
    """Interpolated arc-length continuation."""
    assembler = Assembler(mesh, layout, params)
    model = DeimModel(assembler, basis, op, k_lin)
    return run_continuation(model, config)
