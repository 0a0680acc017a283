"""Field-decomposed POD reduction and the projected Newton scheme.

The snapshot matrix is split by field masks into a displacement part and
a nonlocal-damage part (zero-padded, so they sum back to the original
exactly), each part gets its own thin SVD and truncation, and the final
basis concatenates the two blocks::

    phi = [phi_u_1 ... phi_u_mU | phi_d_1 ... phi_d_mD]

The blocks have disjoint row support, so the combined matrix is
orthonormal whenever each block is.  Mode counts are chosen per field.

The online scheme assembles the full system and projects it (Galerkin):
``phi^T K phi  dq = -(phi^T R - lam phi^T P)``.  Continuation reuses the
shared arc-length driver with the cylindrical constraint taken over the
displacement-block coordinates of the reduced vector; since the block is
column-orthonormal this matches the full-space displacement constraint
for any iterate in the span.

Snapshots are recorded on free DOFs only (constrained rows are zero), so
every basis column satisfies the homogeneous constraints exactly and no
inhomogeneous lifting is needed anywhere.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np

from .assembly import Assembler
from .fom import (
    ContinuationRecord,
    NewtonResult,
    SolverConfig,
    SnapshotStore,
    _FactorizedSystem,
    newton_step,
    run_continuation,
)
from .io import read_matrix, write_json, write_matrix, read_json
from .linalg import RankError, svd_thin, truncate_basis
from .material import MaterialParams, StateBatch
from .mesh import DofLayout, Mesh

RANK_REL_TOL = 1e-13  # singular values below this (relative) do not count as rank


@dataclass
class ReducedBasis:
    """Concatenated per-field projection basis.

    ``column_fields`` tags every column ``"u"`` or ``"d"`` (all ``"u"``
    first).  Invariants: u-block columns vanish on the damage mask and
    vice versa; each block is orthonormal, hence so is the whole matrix.
    """

    phi: np.ndarray
    m_u: int
    m_d: int
    column_fields: list[str]
    layout_fingerprint: str = ""
    provenance: dict = dc_field(default_factory=dict)

    @property
    def m(self) -> int:
        return self.m_u + self.m_d

    @property
    def u_block(self) -> np.ndarray:
        return self.phi[:, : self.m_u]

    @property
    def d_block(self) -> np.ndarray:
        return self.phi[:, self.m_u:]

    def save(self, matrix_path, sidecar_path) -> None:
        write_matrix(matrix_path, self.phi, {"kind": "basis"})
        write_json(
            sidecar_path,
            {
                "m_u": self.m_u,
                "m_d": self.m_d,
                "column_fields": self.column_fields,
                "layout_fingerprint": self.layout_fingerprint,
                "provenance": self.provenance,
            },
        )

    @classmethod
    def load(cls, matrix_path, sidecar_path) -> "ReducedBasis":
        phi, _ = read_matrix(matrix_path)
        meta = read_json(sidecar_path)
        return cls(
            phi=phi,
            m_u=int(meta["m_u"]),
            m_d=int(meta["m_d"]),
            column_fields=list(meta["column_fields"]),
            layout_fingerprint=meta.get("layout_fingerprint", ""),
            provenance=meta.get("provenance", {}),
        )

    @classmethod
    def monolithic(cls, phi: np.ndarray, layout_fingerprint: str = "") -> "ReducedBasis":
        """Un-decomposed basis (test-harness use; same online code path)."""
        m = phi.shape[1]
        return cls(
            phi=np.array(phi, dtype=float),
            m_u=m,
            m_d=0,
            column_fields=["u"] * m,
            layout_fingerprint=layout_fingerprint,
            provenance={"monolithic": True},
        )


def decompose_snapshots(store: SnapshotStore) -> tuple[np.ndarray, np.ndarray]:
    """Zero-padded field split of the solution snapshots.

    The two parts have disjoint row support and sum to the original
    matrix bit for bit.
    """
    if store.n_snapshots == 0:
        raise ValueError("empty snapshot store")
    d = store.solution_snapshots
    d_u = np.zeros_like(d)
    d_d = np.zeros_like(d)
    d_u[store.field_mask_u, :] = d[store.field_mask_u, :]
    d_d[store.field_mask_d, :] = d[store.field_mask_d, :]
    return d_u, d_d


def _field_modes(matrix: np.ndarray, m: int, label: str) -> tuple[np.ndarray, int]:
    """Leading ``m`` left singular vectors of one zero-padded field block.

    Rows that are identically zero in the data (the other field's rows
    and constrained rows) are zeroed exactly afterwards; the dense SVD
    can smear round-off noise into them.
    """
    if m == 0:
        return np.zeros((matrix.shape[0], 0)), 0
    svd = svd_thin(matrix)
    attainable = svd.numerical_rank(RANK_REL_TOL)
    if m > attainable:
        raise RankError(
            f"requested {m} {label} modes but the snapshots support only {attainable}",
            attainable,
        )
    block = truncate_basis(svd, m)
    block[~np.any(matrix != 0.0, axis=1), :] = 0.0
    return block, attainable


def build_decomposed_basis(store: SnapshotStore, m_u: int, m_d: int) -> ReducedBasis:
    """Per-field SVD + truncation, concatenated into one orthonormal basis."""
    d_u, d_d = decompose_snapshots(store)
    phi_u, _ = _field_modes(d_u, m_u, "displacement")
    phi_d, _ = _field_modes(d_d, m_d, "nonlocal-damage")
    return ReducedBasis(
        phi=np.concatenate([phi_u, phi_d], axis=1),
        m_u=m_u,
        m_d=m_d,
        column_fields=["u"] * m_u + ["d"] * m_d,
        layout_fingerprint=store.layout_fingerprint,
        provenance={"n_snapshots": store.n_snapshots, **store.provenance},
    )


def attainable_ranks(store: SnapshotStore) -> tuple[int, int]:
    """Numerical ranks of the two field blocks (for mode-count choices)."""
    d_u, d_d = decompose_snapshots(store)
    rank_u = svd_thin(d_u).numerical_rank(RANK_REL_TOL) if np.any(d_u) else 0
    rank_d = svd_thin(d_d).numerical_rank(RANK_REL_TOL) if np.any(d_d) else 0
    return rank_u, rank_d


class GalerkinModel:
    """Projected continuation model: full assembly, reduced solve.

    Also the base class for the hyper-reduced models, which override
    :meth:`assemble` (and state handling) but keep the projection-space
    bookkeeping: reduced load pattern, displacement-block constraint
    indices and the observation hooks.
    """

    def __init__(self, assembler: Assembler, basis: ReducedBasis):
        self.assembler = assembler
        self.layout = assembler.layout
        self.basis = basis
        self.phi = basis.phi
        self.n = basis.m
        self.u_index = np.arange(basis.m_u)
        self.states = StateBatch.virgin(4 * assembler.n_elements)
        self.p_hat = self.phi.T @ assembler.p_ref
        self.total_load = float(assembler.p_ref.sum())
        loaded = self.layout.loaded_dofs
        self.control_dofs = loaded[np.isin(loaded, self.layout.field_mask_u)]
        self.phi_control = self.phi[self.control_dofs, :]
        self.trace: list[np.ndarray] = []
        self.capture_trace = False

    def assemble(self, q: np.ndarray, lam: float):
        v = self.phi @ q
        sys_full = self.assembler.full(v, self.states, lam)
        k_hat = self.phi.T @ (sys_full.k_t @ self.phi)
        g_hat = self.phi.T @ sys_full.r - lam * self.p_hat
        if self.capture_trace:
            self.trace.append(q.copy())
        return _FactorizedSystem(k_hat), g_hat, sys_full

    def solve(self, fact: _FactorizedSystem, rhs: np.ndarray) -> np.ndarray:
        return fact.solve(rhs)

    def external(self) -> np.ndarray:
        return self.p_hat

    def commit(self, aux) -> None:
        self.states = aux.states_new

    def observe(self, q: np.ndarray, lam: float, aux) -> tuple[float, float]:
        u_control = float((self.phi_control @ q).mean()) if self.control_dofs.size else 0.0
        return u_control, lam * self.total_load

    def on_step_committed(self, q: np.ndarray, lam: float, aux) -> None:
        pass

    def element_evals(self) -> int:
        return self.assembler.n_element_evals


def reduced_newton_step(
    basis: ReducedBasis,
    assembler: Assembler,
    q_hat: np.ndarray,
    load_factor: float,
    config: SolverConfig,
    states: StateBatch | None = None,
) -> NewtonResult:
    """Galerkin-projected Newton at fixed load (spec-level operation).

    Solves ``phi^T K phi dq = -phi^T G`` until ``||phi^T G|| < tol``; the
    full-state reconstruction is ``v = phi @ q``.
    """
    model = GalerkinModel(assembler, basis)
    if states is not None:
        model.states = states
    return newton_step(model, q_hat, load_factor, config)


def run_dpod(
    mesh: Mesh,
    layout: DofLayout,
    params: MaterialParams,
    config: SolverConfig,
    basis: ReducedBasis,
) -> ContinuationRecord:
    """Reduced arc-length continuation with the decomposed basis."""
    assembler = Assembler(mesh, layout, params)
    model = GalerkinModel(assembler, basis)
    return run_continuation(model, config)
