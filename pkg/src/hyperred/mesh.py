"""Mesh storage, DOF numbering with field partition, and desk geometries.

The mesh is a plain container for 2D bilinear quads (counter-clockwise
connectivity) plus named node sets; *mm* units throughout.  DOF numbering
is node-major with the per-node order ``(u_x, u_y, dbar)``, so the
nonlocal-damage field mask is simply ``{3i + 2}``.  That interleaved
ordering makes every field decomposition downstream a pure index
operation.

The quarter-plate builder maps a structured grid between the hole arc and
the outer right/top edges; the outer corner is pinned onto a grid line so
no element edge cuts it.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

# 2x2 Gauss-Legendre points in the reference square, fixed ordering.
GAUSS_POINTS = np.array(
    [(-1.0, -1.0), (1.0, -1.0), (1.0, 1.0), (-1.0, 1.0)]
) / np.sqrt(3.0)
GAUSS_WEIGHTS = np.ones(4)


class MeshError(ValueError):
    """Raised for invalid geometry or boundary-condition specs."""


@dataclass
class Mesh:
    """Quadrilateral mesh: nodes (n, 2) [mm], elements (e, 4), node sets."""

    nodes: np.ndarray
    elements: np.ndarray
    node_sets: dict[str, np.ndarray]
    thickness: float = 1.0

    @property
    def n_nodes(self) -> int:
        return self.nodes.shape[0]

    @property
    def n_elements(self) -> int:
        return self.elements.shape[0]

    def validate(self) -> None:
        if self.elements.min(initial=0) < 0 or self.elements.max(initial=-1) >= self.n_nodes:
            raise MeshError("element connectivity references a missing node")
        for name, idx in self.node_sets.items():
            if idx.size and (idx.min() < 0 or idx.max() >= self.n_nodes):
                raise MeshError(f"node set '{name}' references a missing node")
        det = jacobian_determinants(self)
        bad = np.argwhere(det <= 0.0)
        if bad.size:
            raise MeshError(f"element {int(bad[0, 0])} has a non-positive Jacobian")

    def to_json_dict(self) -> dict:
        return {
            "nodes": self.nodes.tolist(),
            "elements": self.elements.tolist(),
            "node_sets": {k: v.tolist() for k, v in self.node_sets.items()},
            "thickness": self.thickness,
        }

    @classmethod
    def from_json_dict(cls, data: dict) -> "Mesh":
        mesh = cls(
            nodes=np.asarray(data["nodes"], dtype=float),
            elements=np.asarray(data["elements"], dtype=np.int64),
            node_sets={k: np.asarray(v, dtype=np.int64) for k, v in data["node_sets"].items()},
            thickness=float(data.get("thickness", 1.0)),
        )
        mesh.validate()
        return mesh

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json_dict(), fh)

    @classmethod
    def load(cls, path) -> "Mesh":
        with open(path, encoding="utf-8") as fh:
            return cls.from_json_dict(json.load(fh))


def shape_gradients_reference() -> tuple[np.ndarray, np.ndarray]:
    """Bilinear shape values N (gp, node) and gradients dN (gp, node, 2)."""
    xi = GAUSS_POINTS[:, 0][:, None]
    eta = GAUSS_POINTS[:, 1][:, None]
    sx = np.array([-1.0, 1.0, 1.0, -1.0])
    sy = np.array([-1.0, -1.0, 1.0, 1.0])
    n_val = 0.25 * (1.0 + sx * xi) * (1.0 + sy * eta)
    dn = np.empty((4, 4, 2))
    dn[:, :, 0] = 0.25 * sx * (1.0 + sy * eta)
    dn[:, :, 1] = 0.25 * sy * (1.0 + sx * xi)
    return n_val, dn


def jacobian_determinants(mesh: Mesh) -> np.ndarray:
    """det J at the 2x2 Gauss points of every element, shape (e, 4)."""
    _, dn = shape_gradients_reference()
    coords = mesh.nodes[mesh.elements]  # (e, 4, 2)
    jac = np.einsum("gna,end->egad", dn, coords)  # (e, g, 2ref, 2phys)
    return jac[..., 0, 0] * jac[..., 1, 1] - jac[..., 0, 1] * jac[..., 1, 0]


def build_quarter_plate(
    width_b: float,
    hole_radius: float,
    height: float,
    nx: int,
    ny: int,
    thickness: float = 1.0,
    arc_bias: float = 1.0,
    corner_index: int | None = None,
) -> Mesh:
    """Structured quarter of a center-holed plate.

    The quarter occupies ``[0, width_b] x [0, height]`` minus the hole
    quadrant of radius ``hole_radius`` centered at the origin.  ``nx``
    counts divisions along the hole arc, ``ny`` radial divisions from the
    arc to the outer boundary.  ``arc_bias`` > 1 grades the angular grid
    toward the ligament side (the y = 0 plane), where the process zone
    localizes.  ``corner_index`` pins the grid line carrying the outer
    corner; pass it when sweeping the width parametrically so the mesh
    family deforms smoothly instead of re-gridding discontinuously.
    Node sets: ``sym_x`` (x = 0 edge), ``sym_y`` (y = 0 edge), ``top``
    (y = height edge).
    """
    if hole_radius >= width_b:
        raise MeshError(f"hole_radius={hole_radius} must be smaller than width_b={width_b}")
    if hole_radius >= height:
        raise MeshError(f"hole_radius={hole_radius} must be smaller than height={height}")
    if hole_radius <= 0.0 or width_b <= 0.0 or height <= 0.0:
        raise MeshError("geometry lengths must be positive")
    if nx < 2 or ny < 2:
        raise MeshError("nx and ny must both be >= 2")
    if arc_bias <= 0.0:
        raise MeshError("arc_bias must be positive")

    # Outer path: top edge (0, height)->(width_b, height), then right edge
    # ->(width_b, 0); parametrized by s in [0, 1] with the corner pinned onto
    # the s-grid so element edges never cut it.  Running the arc from the top
    # down keeps (arc direction) x (radial direction) counter-clockwise.
    # The bias warp w(s) = 1 - (1 - s)^q concentrates grid lines near s = 1
    # (the ligament); it is applied piecewise so the corner stays pinned.
    q = float(arc_bias)
    warp = lambda s: 1.0 - (1.0 - s) ** q
    warp_inv = lambda y: 1.0 - (1.0 - y) ** (1.0 / q)
    s_corner = width_b / (height + width_b)
    if corner_index is None:
        i_corner = int(round(nx * warp_inv(s_corner)))
    else:
        i_corner = int(corner_index)
    i_corner = min(max(i_corner, 1), nx - 1)
    t_lo = np.linspace(0.0, warp_inv(s_corner), i_corner + 1)
    t_hi = np.linspace(warp_inv(s_corner), 1.0, nx - i_corner + 1)[1:]
    s_grid = warp(np.concatenate([t_lo, t_hi]))
    s_grid[0], s_grid[i_corner], s_grid[-1] = 0.0, s_corner, 1.0

    def outer_point(s: float) -> tuple[float, float]:
        if s <= s_corner:
            return width_b * (s / s_corner), height
        return width_b, height * (1.0 - (s - s_corner) / (1.0 - s_corner))

    theta = (1.0 - s_grid) * (np.pi / 2.0)
    inner = np.stack([hole_radius * np.cos(theta), hole_radius * np.sin(theta)], axis=1)
    outer = np.array([outer_point(s) for s in s_grid])

    t_grid = np.linspace(0.0, 1.0, ny + 1)
    # nodes[(j along radius) * (nx+1) + (i along arc)]
    nodes = (1.0 - t_grid[:, None, None]) * inner[None, :, :] + t_grid[:, None, None] * outer[None, :, :]
    nodes = nodes.reshape(-1, 2)

    elements = np.empty((nx * ny, 4), dtype=np.int64)
    e = 0
    for j in range(ny):
        for i in range(nx):
            n0 = j * (nx + 1) + i
            n1 = n0 + 1
            n2 = n0 + (nx + 1) + 1
            n3 = n0 + (nx + 1)
            elements[e] = (n0, n1, n2, n3)
            e += 1

    tol = 1e-9 * max(width_b, height)
    node_sets = {
        "sym_x": np.flatnonzero(np.abs(nodes[:, 0]) < tol).astype(np.int64),
        "sym_y": np.flatnonzero(np.abs(nodes[:, 1]) < tol).astype(np.int64),
        "top": np.flatnonzero(np.abs(nodes[:, 1] - height) < tol).astype(np.int64),
        "hole": np.arange(nx + 1, dtype=np.int64),
    }
    mesh = Mesh(nodes=nodes, elements=elements, node_sets=node_sets, thickness=thickness)
    mesh.validate()
    return mesh


DOF_COMPONENTS = ("ux", "uy", "dbar")


@dataclass
class DofLayout:
    """Node-major DOF numbering with the displacement/damage field split.

    DOF of node ``i``: ``3 i + c`` with component order ``(ux, uy, dbar)``.
    ``field_mask_u`` and ``field_mask_d`` are disjoint, exhaustive index
    arrays; ``fixed_dofs`` carry homogeneous Dirichlet constraints;
    ``loaded_dofs``/``load_values`` hold the reference external pattern
    (displacement components only; the nonlocal field has natural
    boundary conditions and never carries load).
    """

    n_dofs: int
    field_mask_u: np.ndarray
    field_mask_d: np.ndarray
    fixed_dofs: np.ndarray
    loaded_dofs: np.ndarray
    load_values: np.ndarray
    free_dofs: np.ndarray = field(init=False)

    def __post_init__(self) -> None:
        free = np.ones(self.n_dofs, dtype=bool)
        free[self.fixed_dofs] = False
        self.free_dofs = np.flatnonzero(free)

    def load_pattern(self) -> np.ndarray:
        p = np.zeros(self.n_dofs)
        p[self.loaded_dofs] = self.load_values
        return p

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for arr in (
            np.array([self.n_dofs], dtype=np.int64),
            self.field_mask_u.astype(np.int64),
            self.field_mask_d.astype(np.int64),
            self.fixed_dofs.astype(np.int64),
            self.loaded_dofs.astype(np.int64),
            self.load_values.astype(np.float64),
        ):
            h.update(arr.tobytes())
        return h.hexdigest()


def dof_index(node: int, component: str) -> int:
    return 3 * node + DOF_COMPONENTS.index(component)


def number_dofs(mesh: Mesh, bc_spec: dict | None = None) -> DofLayout:
    """Deterministic DOF numbering plus boundary conditions.

    ``bc_spec`` keys:

    - ``"fixed"``: mapping node-set name -> list of components to
      constrain (for example ``{"sym_x": ["ux"]}``);
    - ``"load"``: ``{"node_set": name, "component": "uy", "traction": t}``
      builds the consistent nodal pattern for a uniform boundary traction
      ``t`` [MPa] on the edges of that set.

    All constraints are homogeneous; missing keys mean no constraint / no
    load.
    """
    bc_spec = bc_spec or {}
    n = mesh.n_nodes
    n_dofs = 3 * n
    all_dofs = np.arange(n_dofs)
    field_mask_d = all_dofs[2::3]
    field_mask_u = np.setdiff1d(all_dofs, field_mask_d)

    fixed: list[int] = []
    for set_name, comps in bc_spec.get("fixed", {}).items():
        if set_name not in mesh.node_sets:
            raise MeshError(f"unknown node set '{set_name}' in fixed spec")
        for comp in comps:
            if comp not in DOF_COMPONENTS:
                raise MeshError(f"unknown dof component '{comp}'")
            fixed.extend(dof_index(int(nd), comp) for nd in mesh.node_sets[set_name])
    fixed_dofs = np.unique(np.asarray(fixed, dtype=np.int64))

    load = bc_spec.get("load")
    if load is None:
        loaded_dofs = np.empty(0, dtype=np.int64)
        load_values = np.empty(0)
    else:
        set_name = load["node_set"]
        if set_name not in mesh.node_sets:
            raise MeshError(f"unknown node set '{set_name}' in load spec")
        comp = load.get("component", "uy")
        if comp == "dbar":
            raise MeshError("the nonlocal damage field cannot carry external load")
        traction = float(load.get("traction", 1.0))
        pattern = _consistent_edge_load(mesh, set_name, comp, traction)
        loaded_dofs = np.flatnonzero(pattern).astype(np.int64)
        load_values = pattern[loaded_dofs]
        if np.intersect1d(loaded_dofs, fixed_dofs).size:
            raise MeshError("loaded dofs overlap fixed dofs")

    return DofLayout(
        n_dofs=n_dofs,
        field_mask_u=field_mask_u,
        field_mask_d=field_mask_d,
        fixed_dofs=fixed_dofs,
        loaded_dofs=loaded_dofs,
        load_values=load_values,
    )


def _consistent_edge_load(mesh: Mesh, set_name: str, comp: str, traction: float) -> np.ndarray:
    """Consistent nodal forces for a uniform traction on boundary edges.

    An element edge contributes when both endpoints lie in the node set;
    each endpoint receives ``traction * length / 2 * thickness`` [N].
    """
    members = np.zeros(mesh.n_nodes, dtype=bool)
    members[mesh.node_sets[set_name]] = True
    pattern = np.zeros(3 * mesh.n_nodes)
    ci = DOF_COMPONENTS.index(comp)
    edges = set()
    for quad in mesh.elements:
        for a, b in ((0, 1), (1, 2), (2, 3), (3, 0)):
            na, nb = int(quad[a]), int(quad[b])
            if members[na] and members[nb]:
                edges.add((min(na, nb), max(na, nb)))
    if not edges:
        raise MeshError(f"node set '{set_name}' spans no element edge to load")
    for na, nb in sorted(edges):
        length = float(np.linalg.norm(mesh.nodes[nb] - mesh.nodes[na]))
        half = 0.5 * traction * length * mesh.thickness
        pattern[3 * na + ci] += half
        pattern[3 * nb + ci] += half
    return pattern
