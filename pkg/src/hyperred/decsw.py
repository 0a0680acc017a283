"""Field-decomposed element sampling and weighting.

Offline, the projected internal force is written as a sum of per-element
contributions at every training snapshot and stacked into a linear
system::

    Y[j*m:(j+1)*m, e] = phi_e^T r_e(V_j),    b[j*m:(j+1)*m] = sum_e ...

which unit weights satisfy exactly.  A sparse non-negative least-squares
solve with the early-exit test ``||Y w - b|| < tau ||b||`` then picks a
small positive-weight element subset.  Online, residual and tangent are
weighted sums over that subset only; the projected external load stays
exact.  No decomposition-specific machinery exists here: the field split
enters solely through the projection basis.

Element residuals at training snapshots are recomputed by replaying the
committed Gauss-point history in step order (the material is history
dependent, so the replay walks the snapshots sequentially from the
virgin state, which reproduces the recording run's states exactly).
The weighted subset approximates the full internal force R, with no
linear/nonlinear split.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np

from .assembly import Assembler, AssemblyError
from .dpod import GalerkinModel, ReducedBasis
from .fom import ContinuationRecord, SolverConfig, SnapshotStore, _FactorizedSystem, run_continuation
from .io import read_json, write_json
from .linalg import snnls
from .material import MaterialParams, StateBatch
from .mesh import DofLayout, Mesh


@dataclass
class EcswTraining:
    """Stacked projected element-residual system.

    ``y`` is (l * m, n_elements); block row j holds snapshot j.  The
    defining identity ``y @ 1 = b`` is exact up to round-off.
    """

    y: np.ndarray
    b: np.ndarray
    tau: float
    provenance: dict = dc_field(default_factory=dict)


@dataclass
class EcswWeights:
    """Positive element weights on the selected subset.

    ``achieved_residual_ratio`` is ``||Y w - b|| / ||b||``; when the
    solver hit its active-set optimum before reaching ``tau`` the result
    is flagged via ``tolerance_not_met``.
    """

    element_ids: np.ndarray
    weights: np.ndarray
    tau: float
    achieved_residual_ratio: float
    tolerance_not_met: bool = False

    @property
    def n_selected(self) -> int:
        return self.element_ids.size

    def save(self, path) -> None:
        write_json(
            path,
            {
                "tau": self.tau,
                "elements": self.element_ids.tolist(),
                "weights": self.weights.tolist(),
                "residual_ratio": self.achieved_residual_ratio,
                "tolerance_not_met": self.tolerance_not_met,
            },
        )

    @classmethod
    def load(cls, path) -> "EcswWeights":
        meta = read_json(path)
        return cls(
            element_ids=np.asarray(meta["elements"], dtype=np.int64),
            weights=np.asarray(meta["weights"], dtype=float),
            tau=float(meta["tau"]),
            achieved_residual_ratio=float(meta["residual_ratio"]),
            tolerance_not_met=bool(meta.get("tolerance_not_met", False)),
        )


def build_ecsw_training(
    store: SnapshotStore,
    basis: ReducedBasis,
    mesh: Mesh,
    layout: DofLayout,
    params: MaterialParams,
    tau: float,
) -> EcswTraining:
    """Replay the snapshots and stack the projected element residuals.

    The basis may come from pooled multi-geometry snapshots (the width
    optimization does exactly that), so only dimensional consistency is
    enforced here; same-geometry fingerprint checks live in the CLI.
    """
    if basis.phi.shape[0] != store.solution_snapshots.shape[0]:
        raise ValueError("basis and snapshot dimensions do not match")
    if basis.phi.shape[0] != layout.n_dofs:
        raise ValueError("basis and layout dimensions do not match")
    assembler = Assembler(mesh, layout, params)
    n_e = mesh.n_elements
    m = basis.m
    ell = store.n_snapshots
    phi_e = basis.phi[assembler.edofs]  # (n_e, 12, m)
    all_elements = np.arange(n_e)

    y = np.empty((ell * m, n_e))
    states = StateBatch.virgin(4 * n_e)
    for j in range(ell):
        v_j = store.solution_snapshots[:, j]
        try:
            r_local, _, states = assembler.element_batch(
                all_elements, v_j, states, need_tangent=False
            )
        except AssemblyError as exc:
            raise AssemblyError(
                f"training replay failed at snapshot {j}: {exc}", exc.element_id, exc.gauss_point
            ) from exc
        y[j * m:(j + 1) * m, :] = np.einsum("edm,ed->me", phi_e, r_local)
    b = y.sum(axis=1)
    return EcswTraining(y=y, b=b, tau=tau, provenance={"n_snapshots": ell, "m": m})


def compute_ecsw_weights(training: EcswTraining) -> EcswWeights:
    """Sparse non-negative weights meeting the relative-residual test."""
    if training.tau <= 0.0:
        raise ValueError("tau must be positive")
    sol = snnls(training.y, training.b, training.tau)
    keep = sol.weights > 0.0
    bnorm = float(np.linalg.norm(training.b))
    ratio = sol.residual_norm / bnorm if bnorm > 0.0 else 0.0
    return EcswWeights(
        element_ids=np.flatnonzero(keep).astype(np.int64),
        weights=sol.weights[keep],
        tau=training.tau,
        achieved_residual_ratio=float(ratio),
        tolerance_not_met=sol.tolerance_not_met,
    )


class EcswModel(GalerkinModel):
    """Weighted-subset continuation model.

    Assembles only the selected elements (states kept for those alone),
    projects the weighted internal force and tangent with the reduced
    basis, and keeps the external-load projection exact.  With all
    elements at unit weight this path reproduces the plain projected
    model bit for bit.
    """

    def __init__(self, assembler: Assembler, basis: ReducedBasis, weights: EcswWeights):
        super().__init__(assembler, basis)
        order = np.argsort(weights.element_ids, kind="stable")
        self.elements = weights.element_ids[order]
        self.element_weights = weights.weights[order]
        self.states = StateBatch.virgin(4 * self.elements.size)

    def assemble(self, q: np.ndarray, lam: float):
        v = self.phi @ q
        sys_w = self.assembler.subset(
            v, self.states, self.elements, self.element_weights,
            need_tangent=True, local_states=True,
        )
        k_hat = self.phi.T @ (sys_w.k_t @ self.phi)
        g_hat = self.phi.T @ sys_w.r - lam * self.p_hat
        if self.capture_trace:
            self.trace.append(q.copy())
        return _FactorizedSystem(k_hat), g_hat, sys_w

    def commit(self, aux) -> None:
        self.states = aux.states_new


def ecsw_reduced_step(
    weights: EcswWeights,
    basis: ReducedBasis,
    assembler: Assembler,
    q_hat: np.ndarray,
    load_factor: float,
    config: SolverConfig,
):
    """One weighted-subset Newton solve at fixed load (spec-level op)."""
    from .fom import newton_step

    model = EcswModel(assembler, basis, weights)
    return newton_step(model, q_hat, load_factor, config)


def run_decsw(
    mesh: Mesh,
    layout: DofLayout,
    params: MaterialParams,
    config: SolverConfig,
    basis: ReducedBasis,
    weights: EcswWeights,
) -> ContinuationRecord:
    """Weighted-subset arc-length continuation."""
    assembler = Assembler(mesh, layout, params)
    model = EcswModel(assembler, basis, weights)
    return run_continuation(model, config)
