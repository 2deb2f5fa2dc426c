"""Reference-element machinery: Gauss-Legendre rules and Lagrange shape functions.

Reference coordinates live on [-1, 1] (per direction). Quad corners are
numbered counter-clockwise starting at (-1, -1).
"""

from functools import lru_cache

import numpy as np
from scipy import special

QUAD_CORNERS = np.array([[-1.0, -1.0], [1.0, -1.0], [1.0, 1.0], [-1.0, 1.0]])


@lru_cache(maxsize=None)
def gauss_legendre(n_points: int) -> tuple[np.ndarray, np.ndarray]:
    """Points and weights of the n-point rule on [-1, 1] (exact to degree 2n - 1)."""
    if n_points < 1:
        raise ValueError(f"Need at least one quadrature point, got {n_points}")
    points, weights = special.roots_legendre(n_points)
    points.setflags(write=False)
    weights.setflags(write=False)
    return points, weights


@lru_cache(maxsize=None)
def tensor_gauss_legendre(n_points: int) -> tuple[np.ndarray, np.ndarray]:
    """Tensor-product rule on [-1, 1]^2; points have shape (n^2, 2)."""
    p, w = gauss_legendre(n_points)
    xi, eta = np.meshgrid(p, p, indexing="ij")
    points = np.column_stack([xi.ravel(), eta.ravel()])
    weights = np.outer(w, w).ravel()
    points.setflags(write=False)
    weights.setflags(write=False)
    return points, weights


def linear_shape(xi: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """1D linear shape functions and their reference derivatives.

    Returns:
        ``N`` of shape (q, 2) and ``dN`` of shape (q, 2).
    """
    xi = np.atleast_1d(np.asarray(xi, dtype=float))
    n = np.column_stack([(1.0 - xi) / 2.0, (1.0 + xi) / 2.0])
    dn = np.tile([-0.5, 0.5], (xi.size, 1))
    return n, dn


def bilinear_shape(points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Bilinear quad shape functions at reference points of shape (q, 2).

    Returns:
        ``N`` of shape (q, 4) and ``dN`` of shape (q, 4, 2) (d/dxi, d/deta).
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    xi, eta = points[:, :1], points[:, 1:]
    cx, cy = QUAD_CORNERS[:, 0], QUAD_CORNERS[:, 1]
    n = 0.25 * (1.0 + cx * xi) * (1.0 + cy * eta)
    dn_dxi = 0.25 * cx * (1.0 + cy * eta)
    dn_deta = 0.25 * cy * (1.0 + cx * xi)
    return n, np.stack([dn_dxi, dn_deta], axis=-1)


def quad_jacobians(coords: np.ndarray, dn: np.ndarray) -> np.ndarray:
    """Jacobians ``J[e, q, a, b] = d x_a / d xi_b`` for element corner coords (E, 4, 2)."""
    return np.einsum("ena,qnb->eqab", coords, dn)
