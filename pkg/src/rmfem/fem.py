"""Linear / bilinear finite element solver for the diffusion problem.

Solves ``-div(kappa grad u) = f`` with ``u = 0`` on the Dirichlet boundary
(both ends in 1D, left and right edges in 2D) and natural zero-flux
conditions on the top and bottom of the strip. Element integrals use a
tensor Gauss-Legendre rule with ``settings.quadrature_points`` points per
direction; the reduced SPD system is factorized in banded form.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import pandas as pd
from scipy import linalg

from src.config import settings
from src.rmfem.elements import (
    bilinear_shape,
    gauss_legendre,
    linear_shape,
    quad_jacobians,
    tensor_gauss_legendre,
)
from src.rmfem.errors import MeshValidityError, SolverError
from src.rmfem.field import STRIP_HEIGHT, ParamVector, forcing_field, kappa_field
from src.rmfem.mesh import Mesh, uniform_mesh_1d

logger = logging.getLogger(__name__)

POINT_TOL = 1e-12
NEWTON_TOL = 1e-12
NEWTON_MAX_ITER = 20
_REFERENCE_SLACK = 1e-10


@dataclass(frozen=True, eq=False)
class FemSolution:
    """Solved FEM state on one mesh for one parameter vector.

    Attributes:
        mesh: Mesh the system was assembled on.
        params: Parameters of the diffusion field.
        nodal_values: Solution per node (exactly 0 on Dirichlet nodes).
        force_vector: Assembled load on the free nodes.
        energy: ``u^T f`` over the free nodes.
    """

    mesh: Mesh
    params: ParamVector
    nodal_values: np.ndarray
    force_vector: np.ndarray
    energy: float


# ============================================================
# Element integrals
# ============================================================


def _element_system_1d(mesh: Mesh, params: ParamVector, n_points: int):
    points, weights = gauss_legendre(n_points)
    shape, _ = linear_shape(points)
    x = mesh.x
    left, right = x[mesh.elements[:, 0]], x[mesh.elements[:, 1]]
    length = right - left
    xq = left[:, None] + 0.5 * (points[None, :] + 1.0) * length[:, None]
    kq = kappa_field(params)(xq)
    fq = forcing_field()(xq)
    # grad phi = -+1/L, jacobian L/2
    stiff = (kq @ weights) / (2.0 * length)
    ke = stiff[:, None, None] * np.array([[1.0, -1.0], [-1.0, 1.0]])
    fe = np.einsum("eq,q,qa->ea", fq, weights, shape) * (0.5 * length)[:, None]
    return ke, fe


def _element_system_2d(mesh: Mesh, params: ParamVector, n_points: int):
    points, weights = tensor_gauss_legendre(n_points)
    shape, dshape = bilinear_shape(points)
    coords = mesh.nodes[mesh.elements]
    jac = quad_jacobians(coords, dshape)
    det = np.linalg.det(jac)
    if not np.all(det > 0.0):
        raise MeshValidityError("Cannot assemble on a mesh with non-positive Jacobians")
    grads = np.einsum("qnb,eqba->eqna", dshape, np.linalg.inv(jac))
    xq = np.einsum("qn,ena->eqa", shape, coords)
    kq = kappa_field(params)(xq, dim=2)
    fq = forcing_field()(xq, dim=2)
    wdet = weights[None, :] * det
    ke = np.einsum("eq,eqna,eqma->enm", kq * wdet, grads, grads)
    fe = np.einsum("eq,qn->en", fq * wdet, shape)
    return ke, fe


def _band_to_dense(band: np.ndarray) -> np.ndarray:
    upper, n = band.shape[0] - 1, band.shape[1]
    dense = np.zeros((n, n))
    for offset in range(upper + 1):
        diag = band[upper - offset, offset:]
        dense += np.diag(diag, k=offset)
        if offset:
            dense += np.diag(diag, k=-offset)
    return dense


def _solve_reduced(
    mesh: Mesh, ke: np.ndarray, fe: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    free = mesh.free_nodes
    position = np.full(mesh.n_nodes, -1)
    position[free] = np.arange(free.size)

    local = position[mesh.elements]
    rows = np.repeat(local[:, :, None], local.shape[1], axis=2)
    cols = np.repeat(local[:, None, :], local.shape[1], axis=1)
    keep = (rows >= 0) & (cols >= 0) & (rows <= cols)
    rows, cols, values = rows[keep], cols[keep], ke[keep]

    upper = int(np.max(cols - rows)) if cols.size else 0
    band = np.zeros((upper + 1, free.size))
    np.add.at(band, (upper + rows - cols, cols), values)

    load = np.zeros(free.size)
    owned = local >= 0
    np.add.at(load, local[owned], fe[owned])

    if not (np.all(np.isfinite(band)) and np.all(np.isfinite(load))):
        raise SolverError("Non-finite entries in the assembled system (diffusion field overflow?)")
    try:
        solution = linalg.solveh_banded(band, load, lower=False)
    except linalg.LinAlgError as e:
        cond = np.linalg.cond(_band_to_dense(band))
        raise SolverError(f"Stiffness matrix not positive definite (cond={cond:.3e}): {e}") from e
    return free, solution, load


# ============================================================
# Public operations
# ============================================================


def assemble_and_solve(mesh: Mesh, params: ParamVector, n_points: int | None = None) -> FemSolution:
    """Assemble the stiffness matrix and load vector on ``mesh`` and solve.

    Args:
        mesh: Valid 1D or 2D mesh.
        params: Diffusion parameters.
        n_points: Gauss points per direction (defaults to settings).

    Returns:
        FemSolution with nodal values, free-node load vector and energy.

    Raises:
        SolverError: If the reduced system cannot be factorized.
    """
    n_points = n_points or settings.quadrature_points
    if mesh.dim == 1:
        ke, fe = _element_system_1d(mesh, params, n_points)
    else:
        ke, fe = _element_system_2d(mesh, params, n_points)

    free, solution, load = _solve_reduced(mesh, ke, fe)
    nodal = np.zeros(mesh.n_nodes)
    nodal[free] = solution
    nodal.setflags(write=False)
    load.setflags(write=False)
    return FemSolution(
        mesh=mesh,
        params=params,
        nodal_values=nodal,
        force_vector=load,
        energy=float(solution @ load),
    )


def total_energy(solution: FemSolution) -> float:
    """FEM estimate ``u^T f`` of the total energy."""
    return solution.energy


@lru_cache(maxsize=8)
def reference_solution(params: ParamVector, n: int | None = None) -> FemSolution:
    """Solution on the fine uniform 1D mesh used as ground truth."""
    n = n or settings.reference_elements
    logger.info(f"Solving reference problem | n={n} | xi={params.xi}")
    return assemble_and_solve(uniform_mesh_1d(n), params)


def _invert_bilinear(coords: np.ndarray, point: np.ndarray) -> np.ndarray | None:
    ref = np.zeros(2)
    for _ in range(NEWTON_MAX_ITER):
        shape, dshape = bilinear_shape(ref[None, :])
        residual = point - shape[0] @ coords
        jac = coords.T @ dshape[0]
        try:
            step = np.linalg.solve(jac, residual)
        except np.linalg.LinAlgError:
            return None
        ref = ref + step
        if np.max(np.abs(step)) < NEWTON_TOL:
            return ref
    return None


def _evaluate_2d(solution: FemSolution, points: np.ndarray) -> np.ndarray:
    mesh = solution.mesh
    nx, ny = mesh.divisions
    values = np.empty(len(points))
    for k, point in enumerate(points):
        i0 = min(max(int(np.floor(point[0] / mesh.h)), 0), nx - 1)
        j0 = min(max(int(np.floor(point[1] / mesh.h)), 0), ny - 1)
        candidates = [(i0, j0)] + [
            (i0 + di, j0 + dj)
            for di in (-1, 0, 1)
            for dj in (-1, 0, 1)
            if (di or dj) and 0 <= i0 + di < nx and 0 <= j0 + dj < ny
        ]
        for i, j in candidates:
            element = mesh.elements[i * ny + j]
            ref = _invert_bilinear(mesh.nodes[element], point)
            if ref is not None and np.all(np.abs(ref) <= 1.0 + _REFERENCE_SLACK):
                shape, _ = bilinear_shape(ref[None, :])
                values[k] = shape[0] @ solution.nodal_values[element]
                break
        else:
            raise MeshValidityError(f"Could not locate point {point.tolist()} in any quad")
    return values


def evaluate(solution: FemSolution, points) -> np.ndarray:
    """Interpolate the FEM field at physical points.

    Args:
        solution: Solved FEM state.
        points: Abscissae (1D) or an array of ``(x, y)`` pairs (2D).

    Returns:
        Array of values, one per point.

    Raises:
        ValueError: If a point lies outside the closed domain.
    """
    mesh = solution.mesh
    pts = np.asarray(points, dtype=float)
    if mesh.dim == 1:
        pts = pts.ravel()
        if np.any(pts < -POINT_TOL) or np.any(pts > 1.0 + POINT_TOL):
            raise ValueError(f"Evaluation points outside [0, 1]: {pts[(pts < 0) | (pts > 1)]}")
        return np.interp(pts, mesh.x, solution.nodal_values)

    pts = pts.reshape(-1, 2)
    outside = (
        (pts[:, 0] < -POINT_TOL)
        | (pts[:, 0] > 1.0 + POINT_TOL)
        | (pts[:, 1] < -POINT_TOL)
        | (pts[:, 1] > STRIP_HEIGHT + POINT_TOL)
    )
    if np.any(outside):
        raise ValueError(f"Evaluation points outside the strip: {pts[outside].tolist()}")
    return _evaluate_2d(solution, pts)


def solution_frame(solution: FemSolution) -> pd.DataFrame:
    """Nodal dump with columns ``x[, y], u``."""
    mesh = solution.mesh
    columns = {"x": mesh.nodes[:, 0]}
    if mesh.dim == 2:
        columns["y"] = mesh.nodes[:, 1]
    columns["u"] = solution.nodal_values
    return pd.DataFrame(columns)
