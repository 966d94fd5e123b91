"""
Vector fields over a mesh: element fluxes, nodal recoveries, exact fluxes
and their combinations. Fields living on a coarser mesh of the same family
can be evaluated on any refinement of it.
"""

from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from verifem.errors import MeshError
from verifem.services.local_spaces import inverse_jacobians


def finest_mesh(meshes: Sequence):
    """The mesh of the sequence that refines all the others"""
    finest = meshes[0]
    for mesh in meshes[1:]:
        if mesh.is_refinement_of(finest):
            finest = mesh
        elif not finest.is_refinement_of(mesh):
            raise MeshError("Fields live on meshes that are not nested")
    return finest


class VectorField:
    """Base class: values(elements, bary) returns (m, 2) for points given
    by element ids (m,) and barycentric coordinates (m, 3)"""

    def __init__(self, mesh, problem=None):
        self.mesh = mesh
        self.problem = problem

    def values(self, elements: np.ndarray, bary: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def divergence(self, elements: np.ndarray, bary: np.ndarray) -> np.ndarray:
        raise NotImplementedError(f"{type(self).__name__} has no divergence")

    def on(self, mesh) -> "VectorField":
        if mesh is self.mesh:
            return self
        if not mesh.is_refinement_of(self.mesh):
            raise MeshError("Target mesh is not a refinement of the field's mesh")
        return TransferredField(self, mesh)

    def __add__(self, other: "VectorField") -> "VectorField":
        return CombinedField([(1.0, self), (1.0, other)])

    def __sub__(self, other: "VectorField") -> "VectorField":
        return CombinedField([(1.0, self), (-1.0, other)])

    def __neg__(self) -> "VectorField":
        return CombinedField([(-1.0, self)])

    def __mul__(self, scale: float) -> "VectorField":
        return CombinedField([(float(scale), self)])

    __rmul__ = __mul__


class ElementFlux(VectorField):
    """Piecewise constant vector field, one vector per element"""

    def __init__(self, mesh, vectors: np.ndarray, problem=None):
        super().__init__(mesh, problem)
        self.vectors = np.asarray(vectors, dtype=float).reshape(mesh.num_elements, 2)

    def values(self, elements, bary):
        return self.vectors[elements]

    def divergence(self, elements, bary):
        return np.zeros(len(elements))


class RecoveredFlux(VectorField):
    """Continuous piecewise P1 vector field given by nodal values"""

    def __init__(self, mesh, nodal: np.ndarray, problem=None, method: str = ""):
        super().__init__(mesh, problem)
        self.nodal = np.asarray(nodal, dtype=float).reshape(mesh.num_vertices, 2)
        self.method = method

    def values(self, elements, bary):
        return np.einsum("mj,mjd->md", bary, self.nodal[self.mesh.triangles[elements]])

    def element_divergence(self) -> np.ndarray:
        """(nt,) constant divergence on each element"""
        return np.einsum("kjd,kjd->k", self.nodal[self.mesh.triangles], self.mesh.grad_lambda)

    def divergence(self, elements, bary):
        return self.element_divergence()[elements]


class ElementP1Flux(VectorField):
    """Discontinuous P1 vector field: three vertex values per element"""

    def __init__(self, mesh, vertex_values: np.ndarray, problem=None):
        super().__init__(mesh, problem)
        self.vertex_values = np.asarray(vertex_values, dtype=float).reshape(mesh.num_elements, 3, 2)

    def values(self, elements, bary):
        return np.einsum("mj,mjd->md", bary, self.vertex_values[elements])

    def element_divergence(self) -> np.ndarray:
        return np.einsum("kjd,kjd->k", self.vertex_values, self.mesh.grad_lambda)

    def divergence(self, elements, bary):
        return self.element_divergence()[elements]


class FunctionField(VectorField):
    """Field given by a callable of physical points (m, 2) -> (m, 2)"""

    def __init__(self, mesh, function: Callable[[np.ndarray], np.ndarray], problem=None):
        super().__init__(mesh, problem)
        self.function = function

    def values(self, elements, bary):
        return self.function(self.mesh.points(elements, bary))

    def on(self, mesh):
        return FunctionField(mesh, self.function, self.problem)


class TransferredField(VectorField):
    """A coarse field evaluated on a nested refinement through the genealogy"""

    def __init__(self, base: VectorField, mesh):
        super().__init__(mesh, base.problem)
        self.base = base
        self.ancestors = mesh.ancestors_on(base.mesh)

    def _locate(self, elements, bary):
        coarse = self.ancestors[elements]
        points = self.mesh.points(elements, bary)
        return coarse, self.base.mesh.barycentric(coarse, points)

    def values(self, elements, bary):
        return self.base.values(*self._locate(elements, bary))

    def divergence(self, elements, bary):
        return self.base.divergence(*self._locate(elements, bary))

    def on(self, mesh):
        return self if mesh is self.mesh else self.base.on(mesh)


class CombinedField(VectorField):
    """Linear combination of fields, evaluated on the finest of their meshes"""

    def __init__(self, terms: List[Tuple[float, VectorField]]):
        flat: List[Tuple[float, VectorField]] = []
        for scale, field in terms:
            if isinstance(field, CombinedField):
                flat.extend((scale * inner_scale, inner) for inner_scale, inner in field.terms)
            else:
                flat.append((scale, field))
        mesh = finest_mesh([field.mesh for _, field in flat])
        problem = next((field.problem for _, field in flat if field.problem is not None), None)
        super().__init__(mesh, problem)
        self.terms = [(scale, field.on(mesh)) for scale, field in flat]

    def values(self, elements, bary):
        total = np.zeros((len(elements), 2))
        for scale, field in self.terms:
            total += scale * field.values(elements, bary)
        return total

    def divergence(self, elements, bary):
        total = np.zeros(len(elements))
        for scale, field in self.terms:
            total += scale * field.divergence(elements, bary)
        return total

    def on(self, mesh):
        if mesh is self.mesh:
            return self
        return CombinedField([(scale, field.on(mesh)) for scale, field in self.terms])


class ElementPolynomialFlux(VectorField):
    """A grad w_K - offset_K with w_K a Lagrange polynomial on every element"""

    def __init__(self, mesh, element, coefficients: np.ndarray, coefficient: np.ndarray,
                 offset: Optional[np.ndarray] = None, problem=None):
        super().__init__(mesh, problem)
        self.element = element
        self.coefficients = np.asarray(coefficients, dtype=float).reshape(mesh.num_elements, element.size)
        self.coefficient = coefficient
        self.offset = np.zeros((mesh.num_elements, 2)) if offset is None else offset
        self.inverse_jacobians = inverse_jacobians(mesh, np.arange(mesh.num_elements))

    def gradients(self, elements, bary):
        """grad w at the points, (m, 2)"""
        reference = self.element.reference_gradients(bary)
        G = np.einsum("mna,mab->mnb", reference, self.inverse_jacobians[elements])
        return np.einsum("mnb,mn->mb", G, self.coefficients[elements])

    def values(self, elements, bary):
        grad = self.gradients(elements, bary)
        return np.einsum("mij,mj->mi", self.coefficient[elements], grad) - self.offset[elements]

    def divergence(self, elements, bary):
        inv = self.inverse_jacobians[elements]
        H = np.einsum("mca,mncd,mdb->mnab", inv, self.element.reference_hessians(bary), inv)
        hessian = np.einsum("mnab,mn->mab", H, self.coefficients[elements])
        return np.einsum("mab,mab->m", self.coefficient[elements], hessian)
