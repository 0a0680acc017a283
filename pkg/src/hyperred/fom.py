"""Full-order Newton / arc-length continuation and snapshot recording.

The continuation driver here is shared by the full-order model and every
reduced model: a model object exposes assembly, linear solves, the
external-load pattern and observation hooks, and the driver runs a
cylindrical (Crisfield-type) arc-length scheme on top:

- constraint ``||delta q_u||_2 = arc`` over the displacement-type
  components of the unknown vector (for reduced models these are the
  displacement-block coordinates; column orthonormality makes the two
  constraints equivalent whenever the iterate lies in the basis span);
- predictor along the tangential solve, sign continued from the previous
  increment;
- corrector with two linear solves per iteration (shared factorization)
  and the quadratic root picked by maximum alignment with the running
  increment;
- step adaptivity ``arc *= (target_iters / iters) ** 0.5`` clipped to the
  configured bounds, halving on failure.

Convergence is tested on ``||G||`` with the tolerance preconditioned by
the first corrector residual of each step
(``tol = newton_tol * max(1, ||G_predictor||)``).

Recorded per committed step: load factor, control displacement (mean
loaded-component displacement over the loaded node set), reaction force
(load factor times the total reference load; the internal-force reaction
at the loaded DOFs equals it at equilibrium within the Newton tolerance),
iteration count and the assembly/solve wall-time split.  Snapshots are
the raw converged solution vectors plus the internal-force vectors,
with constrained rows zeroed.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field as dc_field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .assembly import Assembler, AssemblyError
from .io import read_matrix, write_matrix
from .material import MaterialParams, StateBatch
from .mesh import DofLayout, Mesh


class SolverFailure(RuntimeError):
    """Continuation or Newton failure that ends a run."""


@dataclass
class SolverConfig:
    """Newton and arc-length continuation controls."""

    newton_tol: float = 1e-9
    max_newton_iters: int = 16
    initial_arc_length: float = 0.01
    min_arc_length: float = 1e-6
    max_arc_length: float = 0.05
    target_iterations: int = 5
    max_steps: int = 200
    max_step_cuts: int = 8
    target_control_displacement: float | None = None
    max_load_factor: float | None = None
    stop_after_peak_drop: float | None = None  # stop once F <= drop * max(F)

    def __post_init__(self) -> None:
        if self.newton_tol <= 0.0 or self.initial_arc_length <= 0.0:
            raise ValueError("tolerances and the initial arc length must be positive")
        if not self.min_arc_length <= self.initial_arc_length <= self.max_arc_length:
            raise ValueError("initial_arc_length must lie within [min, max] bounds")


@dataclass
class ContinuationRecord:
    """Per-step committed results of one continuation run."""

    rows: list[dict] = dc_field(default_factory=list)
    termination: str = "incomplete"
    flagged: bool = False
    residual_histories: list[list[float]] = dc_field(default_factory=list)
    n_element_evals: int = 0
    n_newton_iters: int = 0

    @property
    def load_factors(self) -> np.ndarray:
        return np.array([r["load_factor"] for r in self.rows])

    @property
    def displacements(self) -> np.ndarray:
        return np.array([r["u_control_mm"] for r in self.rows])

    @property
    def reactions(self) -> np.ndarray:
        return np.array([r["F_reaction_N"] for r in self.rows])

    @property
    def limit_load(self) -> float:
        return float(self.reactions.max(initial=0.0))

    def summary(self) -> dict:
        return {
            "steps": len(self.rows),
            "termination": self.termination,
            "flagged": self.flagged,
            "n_element_evals": self.n_element_evals,
            "n_newton_iters": self.n_newton_iters,
            "limit_load": self.limit_load,
            "t_assembly_s": float(sum(r["t_assembly_s"] for r in self.rows)),
            "t_solve_s": float(sum(r["t_solve_s"] for r in self.rows)),
        }


@dataclass
class SnapshotStore:
    """Column-wise converged solution and internal-force snapshots.

    Columns correspond one-to-one to committed continuation steps.
    Constrained (Dirichlet) rows are zeroed so downstream bases satisfy
    the homogeneous constraints exactly.  ``nonlinear_force_snapshots``
    are derived columns ``R_j - K_lin V_j`` (see
    :func:`record_nonlinear_snapshots`).
    """

    solution_snapshots: np.ndarray
    force_snapshots: np.ndarray
    fixed_dofs: np.ndarray
    field_mask_u: np.ndarray
    field_mask_d: np.ndarray
    layout_fingerprint: str
    provenance: dict = dc_field(default_factory=dict)
    nonlinear_force_snapshots: np.ndarray | None = None

    @property
    def n_snapshots(self) -> int:
        return self.solution_snapshots.shape[1]

    def save(self, solutions_path, forces_path) -> None:
        meta = {
            "fixed_dofs": self.fixed_dofs.tolist(),
            "field_mask_u": self.field_mask_u.tolist(),
            "field_mask_d": self.field_mask_d.tolist(),
            "layout_fingerprint": self.layout_fingerprint,
            "provenance": self.provenance,
        }
        write_matrix(solutions_path, self.solution_snapshots, {**meta, "kind": "solutions"})
        write_matrix(forces_path, self.force_snapshots, {**meta, "kind": "forces"})

    @classmethod
    def load(cls, solutions_path, forces_path) -> "SnapshotStore":
        sol, meta = read_matrix(solutions_path)
        frc, meta_f = read_matrix(forces_path)
        if meta.get("layout_fingerprint") != meta_f.get("layout_fingerprint"):
            raise SolverFailure("snapshot files belong to different layouts")
        return cls(
            solution_snapshots=sol,
            force_snapshots=frc,
            fixed_dofs=np.asarray(meta.get("fixed_dofs", []), dtype=np.int64),
            field_mask_u=np.asarray(meta.get("field_mask_u", []), dtype=np.int64),
            field_mask_d=np.asarray(meta.get("field_mask_d", []), dtype=np.int64),
            layout_fingerprint=meta.get("layout_fingerprint", ""),
            provenance=meta.get("provenance", {}),
        )

    @classmethod
    def concatenate(cls, stores: list["SnapshotStore"]) -> "SnapshotStore":
        first = stores[0]
        for st in stores[1:]:
            if st.solution_snapshots.shape[0] != first.solution_snapshots.shape[0]:
                raise SolverFailure("snapshot stores have mismatched dimensions")
        return cls(
            solution_snapshots=np.concatenate([s.solution_snapshots for s in stores], axis=1),
            force_snapshots=np.concatenate([s.force_snapshots for s in stores], axis=1),
            fixed_dofs=first.fixed_dofs,
            field_mask_u=first.field_mask_u,
            field_mask_d=first.field_mask_d,
            layout_fingerprint=first.layout_fingerprint,
            provenance={"pooled_from": [s.provenance for s in stores]},
        )


def record_nonlinear_snapshots(store: SnapshotStore, k_lin: sp.spmatrix) -> SnapshotStore:
    """Derive the nonlinear-force columns ``R_j - K_lin V_j``.

    ``k_lin`` must be the coupled tangent assembled at the zero state.
    Constrained rows are zeroed like the parent snapshots.
    """
    if k_lin.shape[0] != store.solution_snapshots.shape[0]:
        raise SolverFailure("K_lin dimension does not match the snapshot store")
    nl = store.force_snapshots - k_lin @ store.solution_snapshots
    nl[store.fixed_dofs, :] = 0.0
    store.nonlinear_force_snapshots = nl
    return store


# ---------------------------------------------------------------------------
# linear-solve helper with a cached factorization
# ---------------------------------------------------------------------------


class _FactorizedSystem:
    """Holds one assembled tangent; factorizes lazily, solves many."""

    def __init__(self, matrix):
        self.matrix = matrix
        self._lu = None

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        if sp.issparse(self.matrix):
            if self._lu is None:
                self._lu = spla.splu(self.matrix.tocsc())
            return self._lu.solve(rhs)
        if self._lu is None:
            import scipy.linalg as sla

            self._lu = sla.lu_factor(self.matrix)
        import scipy.linalg as sla

        return sla.lu_solve(self._lu, rhs)


class FomModel:
    """Full-order continuation model over the free DOFs.

    Owns the committed Gauss-point states; records solution/force
    snapshots at every committed step.
    """

    def __init__(self, assembler: Assembler, record_snapshots: bool = True):
        self.assembler = assembler
        layout = assembler.layout
        self.layout = layout
        self.free = layout.free_dofs
        self.n = self.free.size
        # Positions of displacement-type coordinates inside the free vector.
        in_u = np.zeros(layout.n_dofs, dtype=bool)
        in_u[layout.field_mask_u] = True
        self.u_index = np.flatnonzero(in_u[self.free])
        self.states = StateBatch.virgin(4 * assembler.n_elements)
        self.p_r = assembler.p_ref[self.free]
        self.total_load = float(assembler.p_ref.sum())
        self._sub = _FreeSubmatrix(assembler, self.free)
        loaded = layout.loaded_dofs
        comp_mask = np.isin(loaded, layout.field_mask_u)
        self.control_dofs = loaded[comp_mask]
        self.record_snapshots = record_snapshots
        self.snap_v: list[np.ndarray] = []
        self.snap_r: list[np.ndarray] = []

    # -- driver interface ----------------------------------------------------

    def embed(self, q: np.ndarray) -> np.ndarray:
        v = np.zeros(self.layout.n_dofs)
        v[self.free] = q
        return v

    def assemble(self, q: np.ndarray, lam: float):
        sys_full = self.assembler.full(self.embed(q), self.states, lam)
        k_ff = self._sub.extract(sys_full.k_t)
        return _FactorizedSystem(k_ff), sys_full.g[self.free], sys_full

    def solve(self, fact: _FactorizedSystem, rhs: np.ndarray) -> np.ndarray:
        return fact.solve(rhs)

    def external(self) -> np.ndarray:
        return self.p_r

    def commit(self, aux) -> None:
        self.states = aux.states_new

    def observe(self, q: np.ndarray, lam: float, aux) -> tuple[float, float]:
        v = self.embed(q)
        u_control = float(v[self.control_dofs].mean()) if self.control_dofs.size else 0.0
        return u_control, lam * self.total_load

    def on_step_committed(self, q: np.ndarray, lam: float, aux) -> None:
        if not self.record_snapshots:
            return
        v = self.embed(q)
        r = aux.r.copy()
        r[self.layout.fixed_dofs] = 0.0
        self.snap_v.append(v)
        self.snap_r.append(r)

    def element_evals(self) -> int:
        return self.assembler.n_element_evals

    def snapshot_store(self, provenance: dict) -> SnapshotStore:
        if not self.snap_v:
            raise SolverFailure("no committed steps, nothing to store")
        return SnapshotStore(
            solution_snapshots=np.stack(self.snap_v, axis=1),
            force_snapshots=np.stack(self.snap_r, axis=1),
            fixed_dofs=self.layout.fixed_dofs.copy(),
            field_mask_u=self.layout.field_mask_u.copy(),
            field_mask_d=self.layout.field_mask_d.copy(),
            layout_fingerprint=self.layout.fingerprint(),
            provenance=provenance,
        )


class _FreeSubmatrix:
    """Precomputed extraction of the free-DOF block from the cached pattern."""

    def __init__(self, assembler: Assembler, free: np.ndarray):
        n = assembler.n_dofs
        free_mask = np.zeros(n, dtype=bool)
        free_mask[free] = True
        renumber = -np.ones(n, dtype=np.int64)
        renumber[free] = np.arange(free.size)
        indptr, indices = assembler._indptr, assembler._indices
        col_of_pos = np.repeat(np.arange(n), np.diff(indptr))
        keep = free_mask[indices] & free_mask[col_of_pos]
        self.data_map = np.flatnonzero(keep)
        sub_cols = renumber[col_of_pos[keep]]
        self.sub_indices = renumber[indices[keep]]
        self.sub_indptr = np.zeros(free.size + 1, dtype=np.int64)
        np.cumsum(np.bincount(sub_cols, minlength=free.size), out=self.sub_indptr[1:])
        self.shape = (free.size, free.size)

    def extract(self, k_t: sp.csc_matrix) -> sp.csc_matrix:
        return sp.csc_matrix(
            (k_t.data[self.data_map], self.sub_indices, self.sub_indptr), shape=self.shape
        )


# ---------------------------------------------------------------------------
# Newton step (load control) and the arc-length driver
# ---------------------------------------------------------------------------


@dataclass
class NewtonResult:
    q: np.ndarray
    iterations: int
    residuals: list[float]
    aux: object


def newton_step(model, q: np.ndarray, load_factor: float, config: SolverConfig) -> NewtonResult:
    """Plain Newton at a fixed load factor; commits states on convergence.

    Raises :class:`SolverFailure` on divergence or iteration exhaustion
    (the continuation caller reacts by cutting the arc length).
    """
    q = q.copy()
    residuals: list[float] = []
    tol_eff = None
    for it in range(config.max_newton_iters + 1):
        try:
            fact, g, aux = model.assemble(q, load_factor)
        except AssemblyError as exc:
            raise SolverFailure(f"assembly failed during Newton: {exc}") from exc
        gnorm = float(np.linalg.norm(g))
        residuals.append(gnorm)
        if tol_eff is None:
            tol_eff = config.newton_tol * max(1.0, gnorm)
        if gnorm < tol_eff:
            model.commit(aux)
            return NewtonResult(q=q, iterations=it, residuals=residuals, aux=aux)
        if not np.isfinite(gnorm):
            raise SolverFailure("Newton residual is not finite")
        q = q + model.solve(fact, -g)
    raise SolverFailure(
        f"Newton did not converge in {config.max_newton_iters} iterations "
        f"(last residual {residuals[-1]:.3e})"
    )


class _StepFailed(Exception):
    pass


def _arc_step(model, q0, lam0, arc, prev_dq_u, config: SolverConfig):
    """One predictor/corrector arc-length step; no state commitment."""
    u_idx = model.u_index
    p_r = model.external()
    t_asm = t_solve = 0.0
    residuals: list[float] = []

    t0 = time.perf_counter()
    fact, g0, aux = model.assemble(q0, lam0)
    t_asm += time.perf_counter() - t0
    t0 = time.perf_counter()
    dq_p = model.solve(fact, p_r)
    t_solve += time.perf_counter() - t0
    denom = float(np.linalg.norm(dq_p[u_idx]))
    if denom == 0.0 or not np.isfinite(denom):
        raise _StepFailed("tangential solve has no displacement content")
    dlam = arc / denom
    if prev_dq_u is not None:
        orient = float(prev_dq_u @ dq_p[u_idx])
        if orient < 0.0:
            dlam = -dlam
    dq = dlam * dq_p
    q, lam = q0 + dq, lam0 + dlam

    tol_eff = None
    for it in range(1, config.max_newton_iters + 1):
        t0 = time.perf_counter()
        fact, g, aux = model.assemble(q, lam)
        t_asm += time.perf_counter() - t0
        gnorm = float(np.linalg.norm(g))
        residuals.append(gnorm)
        if not np.isfinite(gnorm):
            raise _StepFailed("residual is not finite")
        if tol_eff is None:
            tol_eff = config.newton_tol * max(1.0, gnorm)
        if gnorm < tol_eff:
            return q, lam, aux, it, residuals, (t_asm, t_solve)

        t0 = time.perf_counter()
        dq_g = model.solve(fact, -g)
        dq_p = model.solve(fact, p_r)
        t_solve += time.perf_counter() - t0

        d_u = (dq + dq_g)[u_idx]
        p_u = dq_p[u_idx]
        a = float(p_u @ p_u)
        b = 2.0 * float(d_u @ p_u)
        c = float(d_u @ d_u) - arc * arc
        disc = b * b - 4.0 * a * c
        if disc < 0.0 or a == 0.0:
            raise _StepFailed("arc-length constraint has no real root")
        sq = np.sqrt(disc)
        r1 = (-b + sq) / (2.0 * a)
        r2 = (-b - sq) / (2.0 * a)
        ref = dq[u_idx]
        pick = r1 if (d_u + r1 * p_u) @ ref >= (d_u + r2 * p_u) @ ref else r2
        dq = dq + dq_g + pick * dq_p
        q = q0 + dq
        lam = lam + pick

    raise _StepFailed(f"corrector did not converge in {config.max_newton_iters} iterations")


def run_continuation(model, config: SolverConfig) -> ContinuationRecord:
    """Arc-length continuation driver shared by the FOM and all ROMs."""
    record = ContinuationRecord()
    q = np.zeros(model.n)
    lam = 0.0
    arc = config.initial_arc_length
    prev_dq_u = None
    peak = 0.0
    cuts = 0
    evals0 = model.element_evals()

    while len(record.rows) < config.max_steps:
        try:
            q_new, lam_new, aux, iters, residuals, times = _arc_step(
                model, q, lam, arc, prev_dq_u, config
            )
        except (_StepFailed, AssemblyError, SolverFailure):
            cuts += 1
            arc *= 0.5
            if cuts > config.max_step_cuts or arc < config.min_arc_length:
                record.termination = "cut_exhaustion"
                record.flagged = True
                break
            continue

        cuts = 0
        prev_dq_u = (q_new - q)[model.u_index]
        q, lam = q_new, lam_new
        model.commit(aux)
        u_control, reaction = model.observe(q, lam, aux)
        record.rows.append(
            {
                "step": len(record.rows) + 1,
                "load_factor": lam,
                "u_control_mm": u_control,
                "F_reaction_N": reaction,
                "iters": iters,
                "t_assembly_s": times[0],
                "t_solve_s": times[1],
            }
        )
        record.residual_histories.append(residuals)
        record.n_newton_iters += iters
        model.on_step_committed(q, lam, aux)

        peak = max(peak, reaction)
        if (
            config.target_control_displacement is not None
            and abs(u_control) >= config.target_control_displacement
        ):
            record.termination = "target_displacement"
            break
        if config.max_load_factor is not None and lam >= config.max_load_factor:
            record.termination = "max_load_factor"
            break
        if (
            config.stop_after_peak_drop is not None
            and len(record.rows) >= 3
            and reaction <= config.stop_after_peak_drop * peak
        ):
            record.termination = "peak_drop"
            break

        # Adaptivity counts corrector updates; the recorded ``iters`` also
        # includes the final convergence-check evaluation.
        work = max(iters - 1, 1)
        arc = float(np.clip(
            arc * (config.target_iterations / work) ** 0.5,
            config.min_arc_length,
            config.max_arc_length,
        ))
    else:
        record.termination = "max_steps"

    record.n_element_evals = model.element_evals() - evals0
    return record


def arc_length_run(
    mesh: Mesh,
    layout: DofLayout,
    params: MaterialParams,
    config: SolverConfig,
    provenance: dict | None = None,
) -> tuple[ContinuationRecord, SnapshotStore]:
    """Full-order continuation with snapshot recording."""
    assembler = Assembler(mesh, layout, params)
    model = FomModel(assembler)
    record = run_continuation(model, config)
    if not model.snap_v:
        raise SolverFailure(f"continuation produced no committed steps ({record.termination})")
    store = model.snapshot_store(provenance or {})
    return record, store


def assemble_k_lin(mesh: Mesh, layout: DofLayout, params: MaterialParams) -> sp.csc_matrix:
    """Coupled tangent at the zero state (both fields, all coupling blocks)."""
    assembler = Assembler(mesh, layout, params)
    n = assembler.n_elements
    return assembler.full(
        np.zeros(layout.n_dofs), StateBatch.virgin(4 * n), 0.0
    ).k_t
