"""Element kernels and global assembly for the coupled two-field problem.

Discretization: 4-node isoparametric quads, 2x2 Gauss quadrature, total
Lagrangian kinematics with plane strain (F_zz = 1).  Per element the
local DOF vector follows the node-major ``(u_x, u_y, dbar)`` ordering of
:mod:`hyperred.mesh`, so the local nonlocal-damage slots are
``{2, 5, 8, 11}``.

Residual conventions (internal forces, before external load):

- displacement rows:  ``r_u[a,i] = sum_gp w (F S)_iJ dN_a/dX_J``
- nonlocal rows:      ``r_d[a] = sum_gp w (A grad(dbar).dN_a
  + H (dbar - D) N_a)``

so the assembled residual ``G = R - load_scale * P`` vanishes at
equilibrium of both weak forms.  The tangent includes the geometric
(initial stress) stiffness and the full four-block coupling; its sparsity
is structurally symmetric while the value blocks are generally not.

Dirichlet handling is by row/column elimination: the assembled system is
returned raw, constrained residual rows are zeroed in ``G``, and solvers
slice the free sub-matrix.  Reactions are recovered from the unreduced
internal-force vector ``R``.

A symbolic sparse pattern (CSC) is built once per mesh; repeated
assemblies scatter into it with a fixed, thread-count-independent
ordering, so identical inputs give bit-identical matrices.  Weighted
subset assembly uses the same scatter path: with all elements and unit
weights it reproduces the full assembly bit for bit.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .material import (
    GaussPointState,
    LocalSolveError,
    MaterialParams,
    StateBatch,
    update_batch,
)
from .mesh import DofLayout, Mesh, shape_gradients_reference

_U_SLOTS = np.array([[0, 1], [3, 4], [6, 7], [9, 10]])
_D_SLOTS = np.array([2, 5, 8, 11])


class AssemblyError(RuntimeError):
    """Element-level failure with the offending element (and Gauss point)."""

    def __init__(self, message: str, element_id: int, gauss_point: int | None = None):
        super().__init__(message)
        self.element_id = element_id
        self.gauss_point = gauss_point


def assembly_threads() -> int:
    """Requested element-loop parallelism cap (``HYPERRED_THREADS``).

    The element batch is evaluated with deterministic array kernels whose
    results do not depend on this cap; it exists to bound worker usage on
    shared machines.
    """
    try:
        return max(1, int(os.environ.get("HYPERRED_THREADS", "1")))
    except ValueError:
        return 1


@dataclass
class ElementKernelOutput:
    """Residual, tangent and uncommitted Gauss-point states of one element."""

    r_local: np.ndarray
    k_local: np.ndarray
    states: list[GaussPointState]


@dataclass
class GlobalSystem:
    """Assembled coupled system.

    ``k_t`` is the raw tangent (CSC), ``r`` the internal-force vector,
    ``g = r - load_scale * p_ref`` with constrained rows zeroed.
    ``states_new`` are the uncommitted Gauss-point states belonging to
    the evaluated elements.
    """

    k_t: sp.csc_matrix
    g: np.ndarray
    r: np.ndarray
    states_new: StateBatch


class Assembler:
    """Cached-geometry assembler bound to one mesh/layout/material triple.

    Holds the reference shape data, per-element Jacobian geometry and the
    symbolic sparse pattern.  The Gauss-point state array is owned by the
    caller; assembly never mutates it.
    """

    def __init__(self, mesh: Mesh, layout: DofLayout, params: MaterialParams):
        self.mesh = mesh
        self.layout = layout
        self.params = params
        self.n_dofs = layout.n_dofs
        self.n_elements = mesh.n_elements

        self.shape_n, dn_ref = shape_gradients_reference()
        coords = mesh.nodes[mesh.elements]  # (e, 4, 2)
        # jac[e, g, d, a] = dX_a / dxi_d
        jac = np.einsum("gnd,ena->egda", dn_ref, coords)
        det = jac[..., 0, 0] * jac[..., 1, 1] - jac[..., 0, 1] * jac[..., 1, 0]
        bad = np.argwhere(det <= 0.0)
        if bad.size:
            raise AssemblyError(
                "non-positive Jacobian", int(bad[0, 0]), int(bad[0, 1])
            )
        inv = np.empty_like(jac)  # array inverse of jac: inv[i, j] with sum_j jac[i,j] inv[j,k] = I
        inv[..., 0, 0] = jac[..., 1, 1]
        inv[..., 1, 1] = jac[..., 0, 0]
        inv[..., 0, 1] = -jac[..., 0, 1]
        inv[..., 1, 0] = -jac[..., 1, 0]
        inv /= det[..., None, None]
        # gradN[e, g, n, J] = dN_n/dX_J = dN_n/dxi_d * dxi_d/dX_J; with
        # jac = dX/dxi laid out [d, a], dxi_d/dX_J is inv's [J, d] entry.
        self.grad_n = np.einsum("gnd,egJd->egnJ", dn_ref, inv)
        self.weights = det * mesh.thickness  # 2x2 Gauss weights are 1

        self.edofs = (
            3 * mesh.elements[:, :, None] + np.arange(3)[None, None, :]
        ).reshape(self.n_elements, 12)

        rows = np.repeat(self.edofs, 12, axis=1).ravel()
        cols = np.tile(self.edofs, (1, 12)).ravel()
        pattern = sp.coo_matrix(
            (np.ones(rows.size), (rows, cols)), shape=(self.n_dofs, self.n_dofs)
        ).tocsc()
        pattern.sum_duplicates()
        pattern.sort_indices()
        self._indptr = pattern.indptr.copy()
        self._indices = pattern.indices.copy()
        col_of_pos = np.repeat(np.arange(self.n_dofs), np.diff(self._indptr))
        keys = col_of_pos.astype(np.int64) * self.n_dofs + self._indices
        self._scatter_pos = np.searchsorted(
            keys, cols.astype(np.int64) * self.n_dofs + rows
        ).reshape(self.n_elements, 144)

        self.p_ref = layout.load_pattern()
        self.n_element_evals = 0  # cumulative cost counter

    # -- element batch -----------------------------------------------------

    def element_batch(
        self,
        subset: np.ndarray,
        v: np.ndarray,
        states: StateBatch,
        need_tangent: bool = True,
        local_states: bool = False,
    ):
        """Evaluate the kernels of ``subset`` elements at global vector ``v``.

        Returns ``(r_local (s, 12), k_local (s, 12, 12) or None,
        states_new (len 4 s))``.  ``states`` is the full-mesh batch with
        Gauss-point slot ``4 e + g`` -- unless ``local_states`` is set, in
        which case it must hold exactly the subset's points in subset
        order (hyper-reduced callers keep state memory proportional to
        their element selection).
        """
        s = subset.size
        self.n_element_evals += int(s)
        ve = v[self.edofs[subset]]  # (s, 12)
        u = ve[:, _U_SLOTS]  # (s, 4, 2)
        db = ve[:, _D_SLOTS]  # (s, 4)
        grad_n = self.grad_n[subset]  # (s, g, n, J)
        w = self.weights[subset]  # (s, g)
        n_ref = self.shape_n  # (g, n)

        f = np.einsum("sni,sgnJ->sgiJ", u, grad_n)
        f[..., 0, 0] += 1.0
        f[..., 1, 1] += 1.0
        c = np.einsum("sgki,sgkj->sgij", f, f)
        c3 = np.stack([c[..., 0, 0], c[..., 1, 1], c[..., 0, 1]], axis=-1)
        dbar_gp = np.einsum("sn,gn->sg", db, n_ref)
        gdb = np.einsum("sn,sgnJ->sgJ", db, grad_n)

        if local_states:
            if len(states) != 4 * s:
                raise AssemblyError("local state batch does not match the subset", -1)
            states_in = states
        else:
            gp_idx = (4 * subset[:, None] + np.arange(4)[None, :]).reshape(-1)
            states_in = states.gather(gp_idx)
        try:
            mat = update_batch(
                c3.reshape(-1, 3),
                np.ones(4 * s),
                dbar_gp.reshape(-1),
                states_in,
                self.params,
                need_tangent=need_tangent,
            )
        except LocalSolveError as exc:
            slot = int(exc.indices[0]) if exc.indices.size else 0
            eid = int(subset[slot // 4])
            raise AssemblyError(
                f"material update failed in element {eid}, gauss point {slot % 4}: {exc}",
                eid,
                slot % 4,
            ) from exc

        p = self.params
        s2 = _unpack_sym(mat.s3.reshape(s, 4, 3))
        d_loc = mat.damage.reshape(s, 4)

        pk1 = np.einsum("sgiM,sgMJ->sgiJ", f, s2)
        r_u = np.einsum("sg,sgiJ,sgnJ->sni", w, pk1, grad_n)
        r_d = p.a_grad * np.einsum("sg,sgJ,sgnJ->sn", w, gdb, grad_n) + p.h_pen * np.einsum(
            "sg,sg,gn->sn", w, dbar_gp - d_loc, n_ref
        )
        r_local = np.empty((s, 12))
        r_local[:, _U_SLOTS] = r_u
        r_local[:, _D_SLOTS] = r_d

        if not need_tangent:
            return r_local, None, mat.state

        ds_dc = mat.ds_dc.reshape(s, 4, 3, 3)
        ds_ddbar = mat.ds_ddbar.reshape(s, 4, 3)
        dd_dc = mat.dd_dc.reshape(s, 4, 3)
        dd_ddbar = mat.dd_ddbar.reshape(s, 4)

        # dC(packed)/du[b, k]: the symmetric xy component counts once.
        gc = np.empty((s, 4, 4, 2, 3))
        gc[..., 0] = 2.0 * np.einsum("sgk,sgn->sgnk", f[..., 0], grad_n[..., 0])
        gc[..., 1] = 2.0 * np.einsum("sgk,sgn->sgnk", f[..., 1], grad_n[..., 1])
        gc[..., 2] = np.einsum("sgk,sgn->sgnk", f[..., 0], grad_n[..., 1]) + np.einsum(
            "sgk,sgn->sgnk", f[..., 1], grad_n[..., 0]
        )

        ds_full = _unpack_sym_last(ds_dc)  # (s, g, 2, 2, 3)
        a1 = np.einsum("sgiM,sgMJm->sgiJm", f, ds_full)
        a2 = np.einsum("sg,sgiJm,sgaJ->sgaim", w, a1, grad_n)
        k_uu = np.einsum("sgaim,sgbkm->saibk", a2, gc)
        geo = np.einsum("sg,sgaM,sgMJ,sgbJ->sab", w, grad_n, s2, grad_n)
        k_uu[:, :, 0, :, 0] += geo
        k_uu[:, :, 1, :, 1] += geo

        dsd_full = _unpack_sym(ds_ddbar)  # (s, g, 2, 2)
        k_ud = np.einsum("sg,sgiM,sgMJ,sgaJ,gb->saib", w, f, dsd_full, grad_n, n_ref)
        k_du = -p.h_pen * np.einsum("sg,sgm,sgbkm,ga->sabk", w, dd_dc, gc, n_ref)
        k_dd = p.a_grad * np.einsum("sg,sgaJ,sgbJ->sab", w, grad_n, grad_n) + p.h_pen * np.einsum(
            "sg,sg,ga,gb->sab", w, 1.0 - dd_ddbar, n_ref, n_ref
        )

        k_local = np.zeros((s, 12, 12))
        k_local[:, _U_SLOTS[:, :, None, None], _U_SLOTS[None, None, :, :]] = k_uu
        k_local[:, _U_SLOTS[:, :, None], _D_SLOTS[None, None, :]] = k_ud
        k_local[:, _D_SLOTS[:, None, None], _U_SLOTS[None, :, :]] = k_du
        k_local[:, _D_SLOTS[:, None], _D_SLOTS[None, :]] = k_dd
        return r_local, k_local, mat.state

    # -- global assembly -----------------------------------------------------

    def full(
        self,
        v: np.ndarray,
        states: StateBatch,
        load_scale: float,
        need_tangent: bool = True,
    ) -> GlobalSystem:
        subset = np.arange(self.n_elements)
        return self._assemble(subset, None, v, states, load_scale, need_tangent)

    def subset(
        self,
        v: np.ndarray,
        states: StateBatch,
        elements: np.ndarray,
        weights: np.ndarray,
        need_tangent: bool = True,
        local_states: bool = False,
    ) -> GlobalSystem:
        """Weighted restricted assembly over ``elements`` only.

        Non-listed elements contribute nothing (their rows are partial /
        meaningless except at DOFs fully surrounded by listed elements).
        ``G`` is returned as weighted internal forces with constrained
        rows zeroed; no external load is subtracted (hyper-reduced
        callers treat the load projection separately).  Pass elements in
        ascending order to reproduce the full-assembly scatter order bit
        for bit; with ``local_states`` the state batch must follow the
        given element order.
        """
        elements = np.asarray(elements, dtype=np.int64)
        if elements.size and (elements.min() < 0 or elements.max() >= self.n_elements):
            raise AssemblyError("unknown element id in subset", int(elements.max()))
        if np.unique(elements).size != elements.size:
            raise AssemblyError("duplicate element id in subset", -1)
        weights = np.asarray(weights, dtype=float)
        if weights.shape != elements.shape:
            raise AssemblyError("weights must match the element subset", -1)
        if not local_states:
            order = np.argsort(elements, kind="stable")  # match full-assembly scatter order
            elements, weights = elements[order], weights[order]
        return self._assemble(elements, weights, v, states, 0.0, need_tangent, local_states)

    def _assemble(self, subset, weights, v, states, load_scale, need_tangent,
                  local_states: bool = False) -> GlobalSystem:
        if subset.size == 0:
            k_t = sp.csc_matrix(
                (np.zeros(self._indices.size), self._indices, self._indptr),
                shape=(self.n_dofs, self.n_dofs),
            ) if need_tangent else None
            g = -load_scale * self.p_ref
            g[self.layout.fixed_dofs] = 0.0
            return GlobalSystem(k_t=k_t, g=g, r=np.zeros(self.n_dofs),
                                states_new=StateBatch.virgin(0))
        r_local, k_local, states_new = self.element_batch(
            subset, v, states, need_tangent, local_states
        )
        if weights is not None:
            r_local = r_local * weights[:, None]
            if k_local is not None:
                k_local = k_local * weights[:, None, None]

        r = np.zeros(self.n_dofs)
        np.add.at(r, self.edofs[subset].ravel(), r_local.ravel())

        if need_tangent:
            data = np.zeros(self._indices.size)
            np.add.at(data, self._scatter_pos[subset].ravel(), k_local.ravel())
            k_t = sp.csc_matrix(
                (data, self._indices, self._indptr), shape=(self.n_dofs, self.n_dofs)
            )
        else:
            k_t = None

        g = r - load_scale * self.p_ref
        g[self.layout.fixed_dofs] = 0.0
        return GlobalSystem(k_t=k_t, g=g, r=r, states_new=states_new)


def _unpack_sym(packed: np.ndarray) -> np.ndarray:
    """(..., 3) packed [xx, yy, xy] -> (..., 2, 2) symmetric."""
    out = np.empty(packed.shape[:-1] + (2, 2))
    out[..., 0, 0] = packed[..., 0]
    out[..., 1, 1] = packed[..., 1]
    out[..., 0, 1] = packed[..., 2]
    out[..., 1, 0] = packed[..., 2]
    return out


def _unpack_sym_last(packed: np.ndarray) -> np.ndarray:
    """(..., 3, m) packed rows -> (..., 2, 2, m) symmetric in the pair."""
    out = np.empty(packed.shape[:-2] + (2, 2, packed.shape[-1]))
    out[..., 0, 0, :] = packed[..., 0, :]
    out[..., 1, 1, :] = packed[..., 1, :]
    out[..., 0, 1, :] = packed[..., 2, :]
    out[..., 1, 0, :] = packed[..., 2, :]
    return out


# ---------------------------------------------------------------------------
# spec-level convenience wrappers
# ---------------------------------------------------------------------------


def element_kernel(
    element_id: int,
    coords: np.ndarray,
    v_local: np.ndarray,
    states_old: list[GaussPointState],
    params: MaterialParams,
) -> ElementKernelOutput:
    """Single-element residual/tangent kernel (standalone geometry)."""
    coords = np.asarray(coords, dtype=float).reshape(4, 2)
    mesh = Mesh(
        nodes=coords,
        elements=np.array([[0, 1, 2, 3]], dtype=np.int64),
        node_sets={},
        thickness=1.0,
    )
    from .mesh import number_dofs  # local import avoids a cycle at module load

    try:
        asm = Assembler(mesh, number_dofs(mesh), params)
    except AssemblyError as exc:
        raise AssemblyError(str(exc), element_id, exc.gauss_point) from exc
    batch = StateBatch.from_states(states_old)
    try:
        r_local, k_local, states_new = asm.element_batch(
            np.array([0]), np.asarray(v_local, dtype=float), batch
        )
    except AssemblyError as exc:
        raise AssemblyError(str(exc), element_id, exc.gauss_point) from exc
    return ElementKernelOutput(
        r_local=r_local[0],
        k_local=k_local[0],
        states=[states_new.state(i) for i in range(4)],
    )


def assemble_full(
    mesh: Mesh,
    layout: DofLayout,
    v: np.ndarray,
    states_old: StateBatch,
    params: MaterialParams,
    load_scale: float,
) -> GlobalSystem:
    """One-shot full assembly (builds a transient :class:`Assembler`)."""
    return Assembler(mesh, layout, params).full(v, states_old, load_scale)


def assemble_subset(
    mesh: Mesh,
    layout: DofLayout,
    v: np.ndarray,
    states_old: StateBatch,
    params: MaterialParams,
    elements: np.ndarray,
    weights: np.ndarray,
) -> GlobalSystem:
    """One-shot weighted restricted assembly."""
    return Assembler(mesh, layout, params).subset(v, states_old, elements, weights)
