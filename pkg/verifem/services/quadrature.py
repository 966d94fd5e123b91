"""
Quadrature rules on triangles (barycentric) and on edges
"""

import math
from functools import lru_cache
from typing import Tuple

import numpy as np
from numpy.polynomial.legendre import leggauss

from verifem.errors import InputError


def _gauss_unit_interval(npoints: int) -> Tuple[np.ndarray, np.ndarray]:
    """Gauss-Legendre points on [0, 1] with weights summing to 1"""
    x, w = leggauss(npoints)
    return 0.5 * (x + 1.0), 0.5 * w


def _seven_point_rule() -> Tuple[np.ndarray, np.ndarray]:
    """Symmetric rule exact for degree 5"""
    sq = math.sqrt(15.0)
    a1 = (6.0 - sq) / 21.0
    a2 = (6.0 + sq) / 21.0
    w1 = (155.0 - sq) / 1200.0
    w2 = (155.0 + sq) / 1200.0
    b1 = 1.0 - 2.0 * a1
    b2 = 1.0 - 2.0 * a2
    bary = np.array([
        [1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0],
        [b1, a1, a1], [a1, b1, a1], [a1, a1, b1],
        [b2, a2, a2], [a2, b2, a2], [a2, a2, b2],
    ])
    weights = np.array([9.0 / 40.0, w1, w1, w1, w2, w2, w2])
    return bary, weights


def _collapsed_gauss_rule(npoints: int) -> Tuple[np.ndarray, np.ndarray]:
    """Tensor Gauss rule mapped onto the triangle through the Duffy transform"""
    xi, wx = _gauss_unit_interval(npoints)
    eta, wy = _gauss_unit_interval(npoints)
    X, Y = np.meshgrid(xi, eta, indexing="ij")
    WX, WY = np.meshgrid(wx, wy, indexing="ij")
    s = X.ravel()
    t = (Y * (1.0 - X)).ravel()
    weights = 2.0 * (WX * WY * (1.0 - X)).ravel()
    bary = np.column_stack([1.0 - s - t, s, t])
    return bary, weights


@lru_cache(maxsize=None)
def triangle_rule(degree: int) -> Tuple[np.ndarray, np.ndarray]:
    """
    Quadrature exact for polynomials of the given degree on a triangle.

    Returns (bary, weights): barycentric points (nq, 3) and weights (nq,)
    summing to 1, so that the integral over K is |K| * sum(w * f(x_q)).
    """
    if degree < 0:
        raise InputError(f"Quadrature degree must be nonnegative, got {degree}")
    if degree <= 1:
        bary, weights = np.array([[1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0]]), np.array([1.0])
    elif degree == 2:
        bary = np.array([
            [2.0 / 3.0, 1.0 / 6.0, 1.0 / 6.0],
            [1.0 / 6.0, 2.0 / 3.0, 1.0 / 6.0],
            [1.0 / 6.0, 1.0 / 6.0, 2.0 / 3.0],
        ])
        weights = np.full(3, 1.0 / 3.0)
    elif degree <= 5:
        bary, weights = _seven_point_rule()
    else:
        # n-point Gauss is exact to 2n-1; the Duffy Jacobian adds one degree
        bary, weights = _collapsed_gauss_rule((degree + 3) // 2)
    bary.setflags(write=False)
    weights.setflags(write=False)
    return bary, weights


@lru_cache(maxsize=None)
def edge_rule(npoints: int = 3) -> Tuple[np.ndarray, np.ndarray]:
    """Gauss rule on an edge parametrised by t in [0, 1]; weights sum to 1"""
    if npoints < 1:
        raise InputError(f"Edge rule needs at least one point, got {npoints}")
    t, w = _gauss_unit_interval(npoints)
    t.setflags(write=False)
    w.setflags(write=False)
    return t, w
