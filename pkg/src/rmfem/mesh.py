"""Reference meshes, random node perturbation and mesh validation.

1D meshes discretize (0, 1) with ``n`` linear elements. 2D meshes discretize
the strip (0, 1) x (0, 1/10) with square bilinear quads. 2D nodes and
elements are numbered column by column (vertical index fastest) so the
stiffness matrix bandwidth stays at ``ny + 2``.

Perturbation moves node ``i`` to ``X_i + h^p alpha_i``. In 1D ``alpha_i`` is
uniform on (-1/2, 1/2); in 2D the displacement is uniform on the disk of
radius ``sqrt(2)/4 h^p``, with boundary nodes projected back onto their edge
and corners pinned.
"""

from __future__ import annotations

import json
import logging
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from src.config import settings
from src.rmfem.elements import bilinear_shape, quad_jacobians, tensor_gauss_legendre
from src.rmfem.errors import DegenerateSchemeError, MeshValidityError, ObservationOffGridError
from src.rmfem.field import STRIP_HEIGHT
from src.rmfem.streams import StreamKey

logger = logging.getLogger(__name__)

DISK_RADIUS_FACTOR = np.sqrt(2.0) / 4.0
BOUNDARY_TOL = 1e-12


class BoundaryTag(str, Enum):
    INTERIOR = "interior"
    DIRICHLET = "dirichlet"
    NEUMANN = "neumann"
    CORNER = "corner"


class SchemeKind(str, Enum):
    UNIFORM_INTERVAL_1D = "uniform_interval_1d"
    DISK_2D = "disk_2d"


SCHEME_FOR_DIM = {1: SchemeKind.UNIFORM_INTERVAL_1D, 2: SchemeKind.DISK_2D}


@dataclass(frozen=True)
class PerturbationScheme:
    """How nodes are randomized: exponent ``p``, sampling kind, pinned nodes."""

    kind: SchemeKind
    p: float = 1.0
    fixed_nodes: frozenset[int] = frozenset()

    def __post_init__(self):
        object.__setattr__(self, "kind", SchemeKind(self.kind))
        object.__setattr__(self, "fixed_nodes", frozenset(int(i) for i in self.fixed_nodes))
        if not self.p >= 1.0:
            raise ValueError(f"Perturbation exponent must satisfy p >= 1, got {self.p}")

    @classmethod
    def for_mesh(
        cls,
        mesh: Mesh,
        p: float | None = None,
        fixed_nodes: Iterable[int] = (),
    ) -> PerturbationScheme:
        """Scheme matching the mesh dimension."""
        return cls(
            kind=SCHEME_FOR_DIM[mesh.dim],
            p=settings.perturbation_exponent if p is None else p,
            fixed_nodes=frozenset(fixed_nodes),
        )

    def amplitude(self, h: float) -> float:
        """Scale ``h^p`` of the displacement."""
        return h**self.p

    def disk_radius(self, h: float) -> float:
        return DISK_RADIUS_FACTOR * self.amplitude(h)

    def to_dict(self) -> dict:
        return {"kind": self.kind.value, "p": self.p, "fixed_nodes": sorted(self.fixed_nodes)}


@dataclass(frozen=True)
class Provenance:
    """Where a mesh came from: the reference generator or a perturbation draw."""

    kind: str = "reference"
    scheme: PerturbationScheme | None = None
    stream: StreamKey | None = None
    redraws: int = 0

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "scheme": self.scheme.to_dict() if self.scheme else None,
            "stream": self.stream.to_dict() if self.stream else None,
            "redraws": self.redraws,
        }

    @classmethod
    def from_dict(cls, data: dict) -> Provenance:
        scheme = data.get("scheme")
        stream = data.get("stream")
        return cls(
            kind=data.get("kind", "reference"),
            scheme=PerturbationScheme(**scheme) if scheme else None,
            stream=StreamKey(stream["seed"], tuple(stream["path"])) if stream else None,
            redraws=int(data.get("redraws", 0)),
        )


@dataclass(frozen=True, eq=False)
class Mesh:
    """Immutable node/element description of a 1D or 2D mesh.

    Attributes:
        dim: Spatial dimension (1 or 2).
        nodes: Coordinates, shape (n_nodes, dim).
        elements: Connectivity, shape (n_elements, 2) or (n_elements, 4), quads CCW.
        tags: Boundary label per node.
        h: Nominal element size of the reference mesh.
        divisions: ``(n,)`` in 1D, ``(nx, ny)`` in 2D.
        provenance: Reference or perturbation record.
    """

    dim: int
    nodes: np.ndarray
    elements: np.ndarray
    tags: tuple[BoundaryTag, ...]
    h: float
    divisions: tuple[int, ...]
    provenance: Provenance = field(default_factory=Provenance)

    def __post_init__(self):
        nodes = np.array(self.nodes, dtype=float).reshape(-1, self.dim)
        elements = np.array(self.elements, dtype=np.int64)
        nodes.setflags(write=False)
        elements.setflags(write=False)
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "elements", elements)
        object.__setattr__(self, "tags", tuple(BoundaryTag(t) for t in self.tags))
        if len(self.tags) != len(nodes):
            raise MeshValidityError(f"Got {len(self.tags)} tags for {len(nodes)} nodes")

    @property
    def n_nodes(self) -> int:
        return self.nodes.shape[0]

    @property
    def n_elements(self) -> int:
        return self.elements.shape[0]

    @property
    def x(self) -> np.ndarray:
        """Horizontal node coordinates."""
        return self.nodes[:, 0]

    @property
    def is_reference(self) -> bool:
        return self.provenance.kind == "reference"

    @property
    def dirichlet_mask(self) -> np.ndarray:
        """Nodes carrying u = 0 (Dirichlet edges including their corners)."""
        return np.array([t in (BoundaryTag.DIRICHLET, BoundaryTag.CORNER) for t in self.tags])

    @property
    def free_nodes(self) -> np.ndarray:
        return np.flatnonzero(~self.dirichlet_mask)

    def element_sizes(self) -> np.ndarray:
        """1D element lengths."""
        if self.dim != 1:
            raise ValueError("element_sizes is defined for 1D meshes only")
        return np.diff(self.x)

    def to_dict(self) -> dict:
        return {
            "dim": self.dim,
            "nodes": self.nodes.tolist(),
            "elements": self.elements.tolist(),
            "tags": [t.value for t in self.tags],
            "h": self.h,
            "divisions": list(self.divisions),
            "provenance": self.provenance.to_dict(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> Mesh:
        data = json.loads(text)
        return cls(
            dim=data["dim"],
            nodes=np.array(data["nodes"]),
            elements=np.array(data["elements"]),
            tags=tuple(data["tags"]),
            h=data["h"],
            divisions=tuple(data["divisions"]),
            provenance=Provenance.from_dict(data["provenance"]),
        )


# ============================================================
# Reference meshes
# ============================================================


def uniform_mesh_1d(n: int) -> Mesh:
    """Uniform mesh of ``n`` linear elements on [0, 1]."""
    if n < 2:
        raise ValueError(f"A 1D mesh needs at least 2 elements, got {n}")
    nodes = np.arange(n + 1) / n
    nodes[-1] = 1.0
    elements = np.column_stack([np.arange(n), np.arange(1, n + 1)])
    tags = [BoundaryTag.INTERIOR] * (n + 1)
    tags[0] = tags[-1] = BoundaryTag.DIRICHLET
    return Mesh(dim=1, nodes=nodes, elements=elements, tags=tuple(tags), h=1.0 / n, divisions=(n,))


def strip_mesh_2d(nx: int) -> Mesh:
    """Square quads of side ``1/nx`` on the strip (0, 1) x (0, 1/10)."""
    if nx <= 0 or nx % 10 != 0:
        raise ValueError(f"Strip mesh needs nx to be a positive multiple of 10, got {nx}")
    ny = nx // 10
    xs = np.arange(nx + 1) / nx
    ys = np.arange(ny + 1) / nx
    ys[-1] = STRIP_HEIGHT

    def node_id(i, j):
        return i * (ny + 1) + j

    nodes = np.array([[xs[i], ys[j]] for i in range(nx + 1) for j in range(ny + 1)])
    elements = np.array(
        [
            [node_id(i, j), node_id(i + 1, j), node_id(i + 1, j + 1), node_id(i, j + 1)]
            for i in range(nx)
            for j in range(ny)
        ]
    )
    tags = []
    for i in range(nx + 1):
        for j in range(ny + 1):
            on_d = i in (0, nx)
            on_n = j in (0, ny)
            if on_d and on_n:
                tags.append(BoundaryTag.CORNER)
            elif on_d:
                tags.append(BoundaryTag.DIRICHLET)
            elif on_n:
                tags.append(BoundaryTag.NEUMANN)
            else:
                tags.append(BoundaryTag.INTERIOR)
    return Mesh(
        dim=2, nodes=nodes, elements=elements, tags=tuple(tags), h=1.0 / nx, divisions=(nx, ny)
    )


# ============================================================
# Validation
# ============================================================


def jacobian_determinants(mesh: Mesh, n_points: int | None = None) -> np.ndarray:
    """det J at the Gauss points of every quad, shape (n_elements, n_points^2)."""
    if mesh.dim != 2:
        raise ValueError("Jacobian determinants are computed for quad meshes only")
    points, _ = tensor_gauss_legendre(n_points or settings.quadrature_points)
    _, dn = bilinear_shape(points)
    jac = quad_jacobians(mesh.nodes[mesh.elements], dn)
    return np.linalg.det(jac)


def validate(mesh: Mesh) -> None:
    """Raise MeshValidityError unless every mesh invariant holds."""
    if mesh.dim == 1:
        x = mesh.x
        if x[0] != 0.0 or x[-1] != 1.0:
            raise MeshValidityError(f"1D endpoints must be exactly 0 and 1, got {x[0]}, {x[-1]}")
        if not np.all(np.diff(x) > 0.0):
            raise MeshValidityError("1D node coordinates are not strictly increasing")
        return

    det = jacobian_determinants(mesh)
    if not np.all(det > 0.0):
        bad = np.unique(np.nonzero(det <= 0.0)[0])
        raise MeshValidityError(f"Non-positive Jacobian in {bad.size} quads (first: {bad[0]})")

    x, y = mesh.nodes[:, 0], mesh.nodes[:, 1]
    on_vertical = (np.abs(x) <= BOUNDARY_TOL) | (np.abs(x - 1.0) <= BOUNDARY_TOL)
    on_horizontal = (np.abs(y) <= BOUNDARY_TOL) | (np.abs(y - STRIP_HEIGHT) <= BOUNDARY_TOL)
    for tag, ok in (
        (BoundaryTag.DIRICHLET, on_vertical),
        (BoundaryTag.NEUMANN, on_horizontal),
        (BoundaryTag.CORNER, on_vertical & on_horizontal),
    ):
        idx = np.array([t is tag for t in mesh.tags])
        if not np.all(ok[idx]):
            raise MeshValidityError(f"{tag.value} nodes left their boundary segment")


def is_valid(mesh: Mesh) -> bool:
    try:
        validate(mesh)
    except MeshValidityError:
        return False
    return True


# ============================================================
# Perturbation
# ============================================================


def movable_components(mesh: Mesh, scheme: PerturbationScheme) -> np.ndarray:
    """Boolean mask (n_nodes, dim): which displacement components a node keeps.

    Boundary nodes lose the component normal to their edge, which is the
    orthogonal projection back onto a straight boundary segment.
    """
    mask = np.ones((mesh.n_nodes, mesh.dim), dtype=bool)
    for i, tag in enumerate(mesh.tags):
        if tag is BoundaryTag.CORNER or (mesh.dim == 1 and tag is BoundaryTag.DIRICHLET):
            mask[i] = False
        elif tag is BoundaryTag.DIRICHLET:
            mask[i, 0] = False
        elif tag is BoundaryTag.NEUMANN:
            mask[i, 1] = False
    fixed = [i for i in scheme.fixed_nodes if 0 <= i < mesh.n_nodes]
    mask[fixed] = False
    return mask


def _check_scheme(mesh: Mesh, scheme: PerturbationScheme) -> np.ndarray:
    if not mesh.is_reference:
        raise ValueError("Only reference meshes can be perturbed")
    if scheme.kind is not SCHEME_FOR_DIM[mesh.dim]:
        raise ValueError(f"Scheme {scheme.kind.value} does not apply to a {mesh.dim}D mesh")
    unknown = [i for i in scheme.fixed_nodes if not 0 <= i < mesh.n_nodes]
    if unknown:
        raise ValueError(f"Fixed node ids out of range: {sorted(unknown)}")
    mask = movable_components(mesh, scheme)
    if not mask.any():
        raise DegenerateSchemeError(
            f"No perturbable nodes left on the {mesh.dim}D mesh with h={mesh.h:g} "
            f"({len(scheme.fixed_nodes)} fixed)"
        )
    return mask


def draw_displacements(
    mesh: Mesh, scheme: PerturbationScheme, rng: np.random.Generator
) -> np.ndarray:
    """Raw displacement for every node before projection, shape (n_nodes, dim).

    The number of variates drawn depends only on the node count.
    """
    if scheme.kind is SchemeKind.UNIFORM_INTERVAL_1D:
        alpha = rng.uniform(-0.5, 0.5, size=mesh.n_nodes)
        return (scheme.amplitude(mesh.h) * alpha)[:, None]
    radius = scheme.disk_radius(mesh.h) * np.sqrt(rng.random(mesh.n_nodes))
    angle = 2.0 * np.pi * rng.random(mesh.n_nodes)
    return np.column_stack([radius * np.cos(angle), radius * np.sin(angle)])


def _displaced(
    mesh: Mesh,
    scheme: PerturbationScheme,
    displacement: np.ndarray,
    mask: np.ndarray,
    stream: StreamKey | None,
    redraws: int,
) -> Mesh:
    nodes = mesh.nodes + np.where(mask, displacement, 0.0)
    return Mesh(
        dim=mesh.dim,
        nodes=nodes,
        elements=mesh.elements,
        tags=mesh.tags,
        h=mesh.h,
        divisions=mesh.divisions,
        provenance=Provenance(kind="perturbed", scheme=scheme, stream=stream, redraws=redraws),
    )


def displace(
    mesh: Mesh,
    scheme: PerturbationScheme,
    displacement: np.ndarray,
    stream: StreamKey | None = None,
) -> Mesh:
    """Apply an explicit displacement field under the scheme's projection rules.

    Raises:
        MeshValidityError: If the displaced mesh breaks an invariant.
    """
    mask = _check_scheme(mesh, scheme)
    displacement = np.asarray(displacement, dtype=float).reshape(mesh.n_nodes, mesh.dim)
    result = _displaced(mesh, scheme, displacement, mask, stream, redraws=0)
    validate(result)
    return result


def perturb(
    mesh: Mesh,
    scheme: PerturbationScheme,
    stream: StreamKey,
    max_redraws: int | None = None,
) -> Mesh:
    """Draw one random mesh from the reference ``mesh``.

    Args:
        mesh: Reference mesh.
        scheme: Perturbation scheme matching ``mesh.dim``.
        stream: Key of the stream dedicated to this draw.
        max_redraws: Invalid 2D draws tolerated before giving up.

    Returns:
        The perturbed mesh, with the scheme and stream recorded in its provenance.

    Raises:
        DegenerateSchemeError: If no node may move.
        MeshValidityError: If every redraw produced an inverted element.
    """
    mask = _check_scheme(mesh, scheme)
    max_redraws = settings.max_redraws if max_redraws is None else max_redraws
    rng = stream.generator()
    for attempt in range(max_redraws + 1):
        raw = draw_displacements(mesh, scheme, rng)
        candidate = _displaced(mesh, scheme, raw, mask, stream, attempt)
        if is_valid(candidate):
            if attempt:
                logger.warning(f"Perturbed mesh needed {attempt} redraws | stream={stream.path}")
            return candidate
    raise MeshValidityError(
        f"No valid perturbed mesh after {max_redraws + 1} draws | stream={stream.path}"
    )


def fixed_observation_nodes(
    mesh: Mesh,
    locations: Sequence | np.ndarray,
    tol: float = 1e-9,
) -> frozenset[int]:
    """Node ids coinciding with the observation locations.

    Raises:
        ObservationOffGridError: If a location matches no node (or several).
    """
    points = np.asarray(locations, dtype=float).reshape(-1, mesh.dim)
    matched = set()
    for point in points:
        hits = np.flatnonzero(np.linalg.norm(mesh.nodes - point, axis=1) <= tol)
        if hits.size != 1:
            raise ObservationOffGridError(
                f"Observation {point.tolist()} matches {hits.size} nodes of the mesh h={mesh.h:g}"
            )
        matched.add(int(hits[0]))
    return frozenset(matched)
