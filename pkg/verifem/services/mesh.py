"""
Mesh Service - conforming triangulations, edge orientation and refinement
"""

import logging
from dataclasses import dataclass
from functools import cached_property
from typing import Callable, Dict, Iterable, List, Optional, Tuple

import numpy as np
import scipy.sparse as sp

from verifem.errors import InputError, MeshError

logger = logging.getLogger(__name__)

INTERIOR, DIRICHLET, NEUMANN = 0, 1, 2
LABEL_NAMES = ("interior", "dirichlet", "neumann")
LABEL_CODES = {name: code for code, name in enumerate(LABEL_NAMES)}

BC_LAYOUTS = ("all_dirichlet", "fig1")

EdgeKey = Tuple[int, int]


def _edge_key(a: int, b: int) -> EdgeKey:
    return (a, b) if a < b else (b, a)


def _readonly(array: np.ndarray) -> np.ndarray:
    array.setflags(write=False)
    return array


@dataclass
class MeshQuality:
    """Size and shape-regularity data of a mesh"""
    h: float
    h_K: np.ndarray
    rho_K: np.ndarray
    gamma0: float


class Mesh:
    """
    Immutable conforming triangulation.

    Triangles are stored counterclockwise as (v0, v1, v2) where v0 is the
    newest vertex and (v1, v2) the refinement edge. Local edge j is the edge
    opposite local vertex j. Edges are numbered by first occurrence when the
    elements are visited in order; edge_elements[e] = (K_low, K_high or -1).
    """

    def __init__(
        self,
        vertices: np.ndarray,
        triangles: np.ndarray,
        boundary: Dict[EdgeKey, str],
        parent: Optional[np.ndarray] = None,
        parent_mesh: Optional["Mesh"] = None,
        depth: Optional[np.ndarray] = None,
        prolongation: Optional[sp.csr_matrix] = None,
        refinement: str = "root",
    ):
        self.vertices = _readonly(np.array(vertices, dtype=float).reshape(-1, 2))
        self.triangles = _readonly(np.array(triangles, dtype=np.int64).reshape(-1, 3))
        self.parent_mesh = parent_mesh
        self.refinement = refinement
        nt = len(self.triangles)
        self.parent = _readonly(np.arange(nt) if parent is None else np.asarray(parent, dtype=np.int64))
        self.depth = _readonly(np.zeros(nt, dtype=np.int64) if depth is None else np.asarray(depth, dtype=np.int64))
        self.prolongation = prolongation

        self._check_elements()
        self._build_edges()
        self._assign_labels(boundary)
        self._check_hanging_nodes()

    # ------------------------------------------------------------------ build

    def _check_elements(self):
        if len(self.triangles) == 0:
            raise MeshError("Mesh has no triangles")
        if self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices):
            raise MeshError("Triangle references an unknown vertex")
        bad = np.nonzero(self.signed_areas <= 0.0)[0]
        if bad.size:
            raise MeshError(f"Element {int(bad[0])} has non-positive signed area {self.signed_areas[bad[0]]:.3e}")

    def _build_edges(self):
        tri = self.triangles
        nt, nv = len(tri), len(self.vertices)
        local = np.stack([tri[:, [1, 2]], tri[:, [2, 0]], tri[:, [0, 1]]], axis=1)
        pairs = np.sort(local.reshape(-1, 2), axis=1)
        keys = pairs[:, 0] * nv + pairs[:, 1]
        _, first, inverse, counts = np.unique(keys, return_index=True, return_inverse=True, return_counts=True)
        if counts.max() > 2:
            raise MeshError("An edge is shared by more than two triangles")

        order = np.argsort(first, kind="stable")
        rank = np.empty_like(order)
        rank[order] = np.arange(len(order))
        edge_of_flat = rank[inverse.ravel()]
        first_flat = first[order]

        flat_element = np.repeat(np.arange(nt), 3)
        edge_elements = np.full((len(order), 2), -1, dtype=np.int64)
        edge_elements[:, 0] = flat_element[first_flat]
        is_first = np.zeros(3 * nt, dtype=bool)
        is_first[first_flat] = True
        second = np.nonzero(~is_first)[0]
        edge_elements[edge_of_flat[second], 1] = flat_element[second]

        self.edges = _readonly(pairs[first_flat])
        self.element_edges = _readonly(edge_of_flat.reshape(nt, 3))
        self.edge_elements = _readonly(edge_elements)
        self._edge_local_low = _readonly(first_flat % 3)

        owner = self.edge_elements[self.element_edges, 0]
        self.sigma = _readonly(np.where(owner == np.arange(nt)[:, None], 1, -1))

    def _assign_labels(self, boundary: Dict[EdgeKey, str]):
        labels = np.full(len(self.edges), INTERIOR, dtype=np.int64)
        on_boundary = self.edge_elements[:, 1] < 0
        lookup = {_edge_key(int(a), int(b)): name for (a, b), name in boundary.items()}
        for e in np.nonzero(on_boundary)[0]:
            key = (int(self.edges[e, 0]), int(self.edges[e, 1]))
            name = lookup.pop(key, None)
            if name is None:
                raise MeshError(f"Boundary edge {key} has no label")
            if name not in ("dirichlet", "neumann"):
                raise MeshError(f"Unknown boundary label '{name}' on edge {key}")
            labels[e] = LABEL_CODES[name]
        if lookup:
            raise MeshError(f"Labels given for {len(lookup)} edges that are not boundary edges")
        if not np.any(labels == DIRICHLET):
            raise MeshError("At least one boundary edge must be labeled dirichlet")
        self.edge_labels = _readonly(labels)

    def _check_hanging_nodes(self, block: int = 256):
        boundary_edges = self.edges[self.edge_labels != INTERIOR]
        candidates = np.unique(boundary_edges)
        R = self.vertices[candidates]
        for start in range(0, len(boundary_edges), block):
            chunk = boundary_edges[start:start + block]
            P = self.vertices[chunk[:, 0]][:, None, :]
            D = self.vertices[chunk[:, 1]][:, None, :] - P
            W = R[None, :, :] - P
            length2 = np.sum(D * D, axis=2)
            cross = D[..., 0] * W[..., 1] - D[..., 1] * W[..., 0]
            dot = np.sum(D * W, axis=2)
            inside = (np.abs(cross) <= 1e-12 * length2) & (dot > 1e-12 * length2) & (dot < (1.0 - 1e-12) * length2)
            if np.any(inside):
                row, col = np.argwhere(inside)[0]
                raise MeshError(
                    f"Hanging node: vertex {int(candidates[col])} lies inside edge {tuple(int(v) for v in chunk[row])}"
                )

    # --------------------------------------------------------------- geometry

    @property
    def num_vertices(self) -> int:
        return len(self.vertices)

    @property
    def num_elements(self) -> int:
        return len(self.triangles)

    @property
    def num_edges(self) -> int:
        return len(self.edges)

    @cached_property
    def signed_areas(self) -> np.ndarray:
        P = self.vertices[self.triangles]
        d1 = P[:, 1] - P[:, 0]
        d2 = P[:, 2] - P[:, 0]
        return _readonly(0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]))

    @property
    def areas(self) -> np.ndarray:
        return self.signed_areas

    @cached_property
    def centroids(self) -> np.ndarray:
        return _readonly(self.vertices[self.triangles].mean(axis=1))

    @cached_property
    def edge_vectors(self) -> np.ndarray:
        """(nt, 3, 2) direction of local edge j, from v_{j+1} to v_{j+2}"""
        P = self.vertices[self.triangles]
        return _readonly(np.stack([P[:, (j + 2) % 3] - P[:, (j + 1) % 3] for j in range(3)], axis=1))

    @cached_property
    def element_edge_lengths(self) -> np.ndarray:
        return _readonly(np.linalg.norm(self.edge_vectors, axis=2))

    @cached_property
    def outward_normals(self) -> np.ndarray:
        """(nt, 3, 2) outward unit normal of each local edge"""
        d = self.edge_vectors
        n = np.stack([d[..., 1], -d[..., 0]], axis=2)
        return _readonly(n / self.element_edge_lengths[..., None])

    @cached_property
    def grad_lambda(self) -> np.ndarray:
        """(nt, 3, 2) gradients of the barycentric coordinates"""
        d = self.edge_vectors
        g = np.stack([-d[..., 1], d[..., 0]], axis=2)
        return _readonly(g / (2.0 * self.areas[:, None, None]))

    @cached_property
    def edge_lengths(self) -> np.ndarray:
        d = self.vertices[self.edges[:, 1]] - self.vertices[self.edges[:, 0]]
        return _readonly(np.linalg.norm(d, axis=1))

    @cached_property
    def edge_normals(self) -> np.ndarray:
        """(ne, 2) reference normal: outward normal of the lower-ordered element"""
        return _readonly(self.outward_normals[self.edge_elements[:, 0], self._edge_local_low])

    @cached_property
    def diameters(self) -> np.ndarray:
        return _readonly(self.element_edge_lengths.max(axis=1))

    @property
    def h(self) -> float:
        return float(self.diameters.max())

    def points(self, elements: np.ndarray, bary: np.ndarray) -> np.ndarray:
        """Physical coordinates of barycentric points (m, 3) in elements (m,)"""
        return np.einsum("mj,mjd->md", bary, self.vertices[self.triangles[elements]])

    def barycentric(self, elements: np.ndarray, points: np.ndarray) -> np.ndarray:
        """Barycentric coordinates of points (m, 2) with respect to elements (m,)"""
        shift = points - self.centroids[elements]
        return 1.0 / 3.0 + np.einsum("mjd,md->mj", self.grad_lambda[elements], shift)

    def edge_points(self, edges: np.ndarray, t: np.ndarray) -> np.ndarray:
        """(len(edges), len(t), 2) points along edges, t measured from the first endpoint"""
        a = self.vertices[self.edges[edges, 0]]
        b = self.vertices[self.edges[edges, 1]]
        return a[:, None, :] + t[None, :, None] * (b - a)[:, None, :]

    # --------------------------------------------------------------- topology

    @cached_property
    def _vertex_elements(self) -> sp.csr_matrix:
        nt = self.num_elements
        rows = self.triangles.ravel()
        cols = np.repeat(np.arange(nt), 3)
        incidence = sp.csr_matrix((np.ones(3 * nt), (rows, cols)), shape=(self.num_vertices, nt))
        incidence.sort_indices()
        return incidence

    def _check_vertex(self, i: int):
        if not 0 <= i < self.num_vertices:
            raise InputError(f"Invalid vertex id {i} (mesh has {self.num_vertices} vertices)")

    def _check_element(self, K: int):
        if not 0 <= K < self.num_elements:
            raise InputError(f"Invalid element id {K} (mesh has {self.num_elements} elements)")

    def vertex_patch(self, i: int) -> List[int]:
        """Elements having vertex i, in increasing element order"""
        self._check_vertex(i)
        incidence = self._vertex_elements
        return incidence.indices[incidence.indptr[i]:incidence.indptr[i + 1]].tolist()

    def element_neighborhood(self, K: int) -> List[int]:
        """U(K): elements sharing at least one vertex with K, K included"""
        self._check_element(K)
        incidence = self._vertex_elements
        members = np.concatenate([
            incidence.indices[incidence.indptr[v]:incidence.indptr[v + 1]] for v in self.triangles[K]
        ])
        return np.unique(members).tolist()

    @cached_property
    def dirichlet_vertices(self) -> np.ndarray:
        return _readonly(np.unique(self.edges[self.edge_labels == DIRICHLET]))

    def edges_labeled(self, label: str) -> np.ndarray:
        return np.nonzero(self.edge_labels == LABEL_CODES[label])[0]

    def boundary_labels(self) -> Dict[EdgeKey, str]:
        boundary = np.nonzero(self.edge_labels != INTERIOR)[0]
        return {
            (int(self.edges[e, 0]), int(self.edges[e, 1])): LABEL_NAMES[self.edge_labels[e]]
            for e in boundary
        }

    def quality(self) -> MeshQuality:
        return mesh_quality(self)

    # ------------------------------------------------------------- genealogy

    def ancestors_on(self, coarse: "Mesh") -> np.ndarray:
        """For each element of this mesh, the id of the element of `coarse` containing it"""
        mapping = np.arange(self.num_elements)
        mesh = self
        while mesh is not coarse:
            if mesh.parent_mesh is None:
                raise MeshError("Meshes are not nested")
            mapping = mesh.parent[mapping]
            mesh = mesh.parent_mesh
        return mapping

    def prolongation_from(self, coarse: "Mesh") -> sp.csr_matrix:
        """P1 prolongation matrix (nv_self x nv_coarse) from a coarser mesh of the same family"""
        P = sp.identity(self.num_vertices, format="csr")
        mesh = self
        while mesh is not coarse:
            if mesh.parent_mesh is None:
                raise MeshError("Meshes are not nested")
            P = P @ mesh.prolongation
            mesh = mesh.parent_mesh
        return P.tocsr()

    def is_refinement_of(self, coarse: "Mesh") -> bool:
        mesh = self
        while mesh is not None:
            if mesh is coarse:
                return True
            mesh = mesh.parent_mesh
        return False

    def __repr__(self) -> str:
        return f"Mesh({self.num_vertices} vertices, {self.num_elements} triangles, {self.num_edges} edges)"


def mesh_quality(mesh: Mesh) -> MeshQuality:
    perimeter = mesh.element_edge_lengths.sum(axis=1)
    rho = 4.0 * mesh.areas / perimeter
    h_K = mesh.diameters
    return MeshQuality(h=float(h_K.max()), h_K=h_K, rho_K=rho, gamma0=float(np.max(h_K / rho)))


def _orient_longest(vertices: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    """Rotate each counterclockwise triangle so its longest edge is (v1, v2)"""
    P = vertices[triangles]
    lengths = np.stack([
        np.sum((P[:, (j + 2) % 3] - P[:, (j + 1) % 3]) ** 2, axis=1) for j in range(3)
    ], axis=1)
    top = np.argmax(lengths, axis=1)
    idx = (top[:, None] + np.arange(3)[None, :]) % 3
    return np.take_along_axis(triangles, idx, axis=1)


def _label_boundary(
    vertices: np.ndarray,
    triangles: np.ndarray,
    rule: Callable[[np.ndarray], str],
) -> Dict[EdgeKey, str]:
    """Label every edge used by a single triangle through rule(midpoint)"""
    counts: Dict[EdgeKey, int] = {}
    for tri in triangles:
        for j in range(3):
            key = _edge_key(int(tri[(j + 1) % 3]), int(tri[(j + 2) % 3]))
            counts[key] = counts.get(key, 0) + 1
    return {
        key: rule(0.5 * (vertices[key[0]] + vertices[key[1]]))
        for key, count in counts.items() if count == 1
    }


def _grid_triangles(index: np.ndarray, keep_cell: np.ndarray) -> np.ndarray:
    """Split kept grid cells along the lower-left to upper-right diagonal"""
    triangles = []
    ny, nx = keep_cell.shape
    for j in range(ny):
        for i in range(nx):
            if not keep_cell[j, i]:
                continue
            v00, v10 = index[j, i], index[j, i + 1]
            v01, v11 = index[j + 1, i], index[j + 1, i + 1]
            # right angle first so the diagonal is the refinement edge
            triangles.append((v10, v11, v00))
            triangles.append((v01, v00, v11))
    return np.array(triangles, dtype=np.int64)


def unit_square_mesh(n: int, bc_layout: str = "all_dirichlet") -> Mesh:
    """Structured mesh of the unit square with 2 n^2 triangles"""
    if n < 1:
        raise InputError(f"Subdivision count must be at least 1, got {n}")
    if bc_layout not in BC_LAYOUTS:
        raise InputError(f"Unknown bc_layout '{bc_layout}', expected one of {', '.join(BC_LAYOUTS)}")

    x = np.linspace(0.0, 1.0, n + 1)
    X, Y = np.meshgrid(x, x)
    vertices = np.column_stack([X.ravel(), Y.ravel()])
    index = np.arange((n + 1) ** 2).reshape(n + 1, n + 1)
    triangles = _grid_triangles(index, np.ones((n, n), dtype=bool))

    def rule(midpoint: np.ndarray) -> str:
        if bc_layout == "fig1" and abs(midpoint[1] - 1.0) < 1e-12:
            return "neumann"
        return "dirichlet"

    mesh = Mesh(vertices, triangles, _label_boundary(vertices, triangles, rule))
    logger.info(f"Built unit square mesh n={n} ({bc_layout}): {mesh}")
    return mesh


def l_shape_mesh(n: int) -> Mesh:
    """(-1,1)^2 without [0,1)x(-1,0]; the two edges at the re-entrant corner are dirichlet"""
    if n < 1:
        raise InputError(f"Subdivision count must be at least 1, got {n}")

    coords = np.linspace(-1.0, 1.0, 2 * n + 1)
    X, Y = np.meshgrid(coords, coords)
    keep_vertex = ~((X > 1e-12) & (Y < -1e-12))
    index = np.full(X.shape, -1, dtype=np.int64)
    index[keep_vertex] = np.arange(int(keep_vertex.sum()))
    vertices = np.column_stack([X[keep_vertex], Y[keep_vertex]])

    cx = 0.5 * (coords[:-1] + coords[1:])
    CX, CY = np.meshgrid(cx, cx)
    keep_cell = ~((CX > 0.0) & (CY < 0.0))
    triangles = _grid_triangles(index, keep_cell)

    def rule(midpoint: np.ndarray) -> str:
        mx, my = midpoint
        on_x_axis = abs(my) < 1e-12 and mx > 0.0
        on_y_axis = abs(mx) < 1e-12 and my < 0.0
        return "dirichlet" if (on_x_axis or on_y_axis) else "neumann"

    mesh = Mesh(vertices, triangles, _label_boundary(vertices, triangles, rule))
    logger.info(f"Built L-shape mesh n={n}: {mesh}")
    return mesh


def refine(mesh: Mesh, marked: Iterable[int]) -> Mesh:
    """
    Newest-vertex bisection of the marked elements plus the conforming closure.

    Children replace their parent in place, so the element order stays the
    creation order. New vertices are numbered in edge order.
    """
    marked = np.unique(np.fromiter((int(K) for K in marked), dtype=np.int64))
    if marked.size and (marked[0] < 0 or marked[-1] >= mesh.num_elements):
        raise InputError("Marked set contains invalid element ids")

    nv = mesh.num_vertices
    edge_marked = np.zeros(mesh.num_edges, dtype=bool)
    edge_marked[mesh.element_edges[marked, 0]] = True
    while True:
        touched = edge_marked[mesh.element_edges].any(axis=1)
        refinement_edges = mesh.element_edges[touched, 0]
        if edge_marked[refinement_edges].all():
            break
        edge_marked[refinement_edges] = True

    split = np.nonzero(edge_marked)[0]
    midpoint: Dict[EdgeKey, int] = {
        (int(mesh.edges[e, 0]), int(mesh.edges[e, 1])): nv + rank for rank, e in enumerate(split)
    }
    new_vertices = 0.5 * (mesh.vertices[mesh.edges[split, 0]] + mesh.vertices[mesh.edges[split, 1]])

    def bisect(tri: Tuple[int, int, int], level: int) -> List[Tuple[Tuple[int, int, int], int]]:
        v0, v1, v2 = tri
        m = midpoint.get(_edge_key(v1, v2))
        if m is None:
            return [(tri, level)]
        return bisect((m, v0, v1), level + 1) + bisect((m, v2, v0), level + 1)

    triangles, parent, depth = [], [], []
    for K, tri in enumerate(mesh.triangles):
        for child, level in bisect(tuple(int(v) for v in tri), 0):
            triangles.append(child)
            parent.append(K)
            depth.append(mesh.depth[K] + level)

    boundary: Dict[EdgeKey, str] = {}
    for (a, b), label in mesh.boundary_labels().items():
        m = midpoint.get((a, b))
        if m is None:
            boundary[(a, b)] = label
        else:
            boundary[_edge_key(a, m)] = label
            boundary[_edge_key(m, b)] = label

    prolongation = _midpoint_prolongation(nv, mesh.edges[split])
    child = Mesh(
        np.vstack([mesh.vertices, new_vertices]),
        np.array(triangles, dtype=np.int64),
        boundary,
        parent=np.array(parent),
        parent_mesh=mesh,
        depth=np.array(depth),
        prolongation=prolongation,
        refinement="bisection",
    )
    logger.info(f"Bisection: {marked.size} marked, {split.size} edges split -> {child}")
    return child


def uniform_refine(mesh: Mesh) -> Mesh:
    """Red refinement: every triangle split into 4 congruent children"""
    nv, nt = mesh.num_vertices, mesh.num_elements
    mid = nv + np.arange(mesh.num_edges)
    tri = mesh.triangles
    m12 = mid[mesh.element_edges[:, 0]]
    m20 = mid[mesh.element_edges[:, 1]]
    m01 = mid[mesh.element_edges[:, 2]]
    v0, v1, v2 = tri[:, 0], tri[:, 1], tri[:, 2]
    children = np.stack([
        np.column_stack([v0, m01, m20]),
        np.column_stack([m01, v1, m12]),
        np.column_stack([m20, m12, v2]),
        np.column_stack([m01, m12, m20]),
    ], axis=1).reshape(-1, 3)

    vertices = np.vstack([mesh.vertices, 0.5 * (mesh.vertices[mesh.edges[:, 0]] + mesh.vertices[mesh.edges[:, 1]])])
    children = _orient_longest(vertices, children)

    boundary: Dict[EdgeKey, str] = {}
    for e in np.nonzero(mesh.edge_labels != INTERIOR)[0]:
        a, b = int(mesh.edges[e, 0]), int(mesh.edges[e, 1])
        label = LABEL_NAMES[mesh.edge_labels[e]]
        boundary[_edge_key(a, int(mid[e]))] = label
        boundary[_edge_key(int(mid[e]), b)] = label

    child = Mesh(
        vertices,
        children,
        boundary,
        parent=np.repeat(np.arange(nt), 4),
        parent_mesh=mesh,
        depth=np.repeat(mesh.depth + 2, 4),
        prolongation=_midpoint_prolongation(nv, mesh.edges),
        refinement="uniform",
    )
    logger.info(f"Uniform refinement -> {child}")
    return child


def _midpoint_prolongation(nv: int, split_edges: np.ndarray) -> sp.csr_matrix:
    """Identity on old vertices, edge average on the new midpoints"""
    ns = len(split_edges)
    rows = np.concatenate([np.arange(nv), np.repeat(nv + np.arange(ns), 2)])
    cols = np.concatenate([np.arange(nv), split_edges.ravel()])
    vals = np.concatenate([np.ones(nv), np.full(2 * ns, 0.5)])
    return sp.csr_matrix((vals, (rows, cols)), shape=(nv + ns, nv))
