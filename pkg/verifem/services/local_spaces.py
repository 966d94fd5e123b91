"""
Lagrange shape functions of arbitrary degree on triangles, used by the
local patch and element problems
"""

from functools import lru_cache
from typing import List, Tuple

import numpy as np

from verifem.errors import InputError
from verifem.services.quadrature import triangle_rule


class LagrangeElement:
    """
    Degree-d Lagrange basis on the reference triangle.

    Nodes are the multi-indices (i, j, k) with i + j + k = d, located at
    barycentric coordinates (i, j, k) / d. The basis is expressed in the
    monomials s^a t^b with s = lambda_1 and t = lambda_2.
    """

    def __init__(self, degree: int):
        if degree < 1:
            raise InputError(f"Lagrange degree must be at least 1, got {degree}")
        self.degree = degree
        self.multi_indices = np.array(
            [(degree - a - b, a, b) for b in range(degree + 1) for a in range(degree + 1 - b)],
            dtype=np.int64,
        )
        self.nodes = self.multi_indices / degree
        self.exponents: List[Tuple[int, int]] = [
            (a, b) for total in range(degree + 1) for b in range(total + 1) for a in [total - b]
        ]
        vandermonde = self._monomials(self.nodes)
        self.coefficients = np.linalg.inv(vandermonde)

    @property
    def size(self) -> int:
        return len(self.multi_indices)

    def _monomials(self, bary: np.ndarray) -> np.ndarray:
        s, t = bary[:, 1], bary[:, 2]
        return np.column_stack([s ** a * t ** b for a, b in self.exponents])

    def _power(self, x: np.ndarray, p: int) -> np.ndarray:
        return x ** p if p >= 0 else np.zeros_like(x)

    def values(self, bary: np.ndarray) -> np.ndarray:
        """(nq, size) basis values"""
        return self._monomials(bary) @ self.coefficients

    def reference_gradients(self, bary: np.ndarray) -> np.ndarray:
        """(nq, size, 2) derivatives with respect to (s, t)"""
        s, t = bary[:, 1], bary[:, 2]
        ds = np.column_stack([a * self._power(s, a - 1) * t ** b for a, b in self.exponents])
        dt = np.column_stack([b * s ** a * self._power(t, b - 1) for a, b in self.exponents])
        return np.stack([ds @ self.coefficients, dt @ self.coefficients], axis=2)

    def reference_hessians(self, bary: np.ndarray) -> np.ndarray:
        """(nq, size, 2, 2) second derivatives with respect to (s, t)"""
        s, t = bary[:, 1], bary[:, 2]
        dss = np.column_stack([a * (a - 1) * self._power(s, a - 2) * t ** b for a, b in self.exponents])
        dst = np.column_stack([a * b * self._power(s, a - 1) * self._power(t, b - 1) for a, b in self.exponents])
        dtt = np.column_stack([b * (b - 1) * s ** a * self._power(t, b - 2) for a, b in self.exponents])
        C = self.coefficients
        H = np.empty((len(bary), self.size, 2, 2))
        H[..., 0, 0] = dss @ C
        H[..., 0, 1] = dst @ C
        H[..., 1, 0] = H[..., 0, 1]
        H[..., 1, 1] = dtt @ C
        return H

    def node_keys(self, triangle: np.ndarray) -> List[Tuple[Tuple[int, int], ...]]:
        """
        Canonical key of every node of an element with the given global
        vertex ids: the sorted (vertex id, weight) pairs with nonzero weight.
        Nodes shared by neighbouring elements get equal keys.
        """
        keys = []
        for weights in self.multi_indices:
            pairs = tuple(sorted((int(triangle[j]), int(weights[j])) for j in range(3) if weights[j] > 0))
            keys.append(pairs)
        return keys

    def nodes_on_local_edge(self, j: int) -> np.ndarray:
        """Indices of nodes lying on local edge j (opposite vertex j)"""
        return np.nonzero(self.multi_indices[:, j] == 0)[0]

    def vertex_nodes(self) -> np.ndarray:
        """Indices of the nodes at the three vertices, in vertex order"""
        return np.array([int(np.nonzero(self.multi_indices[:, j] == self.degree)[0][0]) for j in range(3)])


@lru_cache(maxsize=None)
def lagrange_element(degree: int) -> LagrangeElement:
    return LagrangeElement(degree)


def inverse_jacobians(mesh, elements: np.ndarray) -> np.ndarray:
    """(m, 2, 2) inverse of the affine map Jacobian J = [x1 - x0, x2 - x0]"""
    P = mesh.vertices[mesh.triangles[elements]]
    J = np.stack([P[:, 1] - P[:, 0], P[:, 2] - P[:, 0]], axis=2)
    return np.linalg.inv(J)


def physical_gradients(reference: np.ndarray, inv_jac: np.ndarray) -> np.ndarray:
    """
    Map reference gradients (nq, size, 2) through J^{-T} for a batch of
    elements: returns (m, nq, size, 2)
    """
    return np.einsum("qna,mab->mqnb", reference, inv_jac)


def physical_hessians(reference: np.ndarray, inv_jac: np.ndarray) -> np.ndarray:
    """J^{-T} H J^{-1} for a batch of elements: (m, nq, size, 2, 2)"""
    return np.einsum("mca,qncd,mdb->mqnab", inv_jac, reference, inv_jac)


def element_stiffness(mesh, coefficient: np.ndarray, element: LagrangeElement) -> np.ndarray:
    """(nt, size, size) local matrices int_K A grad phi_j . grad phi_i, exact for constant A"""
    bary, weights = triangle_rule(2 * (element.degree - 1))
    G = physical_gradients(element.reference_gradients(bary), inverse_jacobians(mesh, np.arange(mesh.num_elements)))
    S = mesh.areas[:, None, None] * np.einsum("q,kqia,kab,kqjb->kij", weights, G, coefficient, G)
    return 0.5 * (S + np.transpose(S, (0, 2, 1)))


def element_means(mesh, element: LagrangeElement) -> np.ndarray:
    """(nt, size) integrals of the basis functions over every element"""
    bary, weights = triangle_rule(element.degree)
    return mesh.areas[:, None] * (weights @ element.values(bary))[None, :]


def edge_bary(j: int, s: np.ndarray) -> np.ndarray:
    """Barycentric points along local edge j, s running from v_{j+1} to v_{j+2}"""
    bary = np.zeros((len(s), 3))
    bary[:, (j + 1) % 3] = 1.0 - s
    bary[:, (j + 2) % 3] = s
    return bary
