"""Parametrized diffusion coefficient, forcing term and ground-truth parameters.

The log-diffusion field is a four-term sine expansion built from the
eigenpairs of ``-d^2/dx^2`` on (0, 1) with homogeneous Dirichlet conditions:

    kappa(x) = exp( sum_k xi_k / sqrt(lambda_k) * phi_k(x) )
    lambda_k = k^2 pi^2,  phi_k(x) = sqrt(2) sin(k pi x)

On the 2D strip every field depends on the horizontal coordinate only.
"""

from __future__ import annotations

from collections.abc import Callable, Sequence
from dataclasses import dataclass

import numpy as np

NUM_MODES = 4
STRIP_HEIGHT = 0.1


@dataclass(frozen=True)
class ParamVector:
    """Coefficients xi_1..xi_4 of the log-diffusion expansion."""

    xi: tuple[float, ...]

    def __post_init__(self):
        values = tuple(float(v) for v in self.xi)
        if len(values) != NUM_MODES:
            raise ValueError(f"ParamVector needs exactly {NUM_MODES} entries, got {len(values)}")
        if not all(np.isfinite(values)):
            raise ValueError(f"ParamVector entries must be finite: {values}")
        object.__setattr__(self, "xi", values)

    @classmethod
    def from_array(cls, values: Sequence[float] | np.ndarray) -> ParamVector:
        return cls(tuple(np.asarray(values, dtype=float).ravel()))

    @classmethod
    def zeros(cls) -> ParamVector:
        return cls((0.0,) * NUM_MODES)

    @property
    def array(self) -> np.ndarray:
        return np.array(self.xi)


def eigenvalue(k: int) -> float:
    """lambda_k = k^2 pi^2 for k >= 1."""
    if k < 1:
        raise ValueError(f"Eigenpair index starts at 1, got {k}")
    return (k * np.pi) ** 2


def eigenfunction(k: int, x: np.ndarray | float) -> np.ndarray:
    """phi_k(x) = sqrt(2) sin(k pi x)."""
    if k < 1:
        raise ValueError(f"Eigenpair index starts at 1, got {k}")
    return np.sqrt(2.0) * np.sin(k * np.pi * np.asarray(x, dtype=float))


@dataclass(frozen=True)
class ScalarField:
    """Deterministic scalar field given by a profile of the horizontal coordinate.

    Points are scalars / arrays of abscissae when ``dim == 1`` and arrays whose
    last axis holds ``(x, y)`` when ``dim == 2``.
    """

    profile: Callable[[np.ndarray], np.ndarray]
    name: str = ""

    def __call__(self, points, dim: int = 1) -> np.ndarray | float:
        x = _horizontal(points, dim)
        values = self.profile(x)
        return float(values) if np.ndim(values) == 0 else values


def _horizontal(points, dim: int) -> np.ndarray:
    arr = np.asarray(points, dtype=float)
    if dim == 2:
        if arr.shape[-1:] != (2,):
            raise ValueError(f"2D points need a trailing axis of length 2, got shape {arr.shape}")
        arr = arr[..., 0]
    elif dim != 1:
        raise ValueError(f"dim must be 1 or 2, got {dim}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("Field evaluation requires finite coordinates")
    return arr


def log_kappa(params: ParamVector, x: np.ndarray | float) -> np.ndarray:
    """Exponent of the diffusion field; linear in ``params``."""
    x = np.asarray(x, dtype=float)
    total = np.zeros_like(x)
    for k, xi_k in enumerate(params.xi, start=1):
        total = total + xi_k / np.sqrt(eigenvalue(k)) * eigenfunction(k, x)
    return total


def kappa_field(params: ParamVector) -> ScalarField:
    return ScalarField(lambda x: np.exp(log_kappa(params, x)), name="kappa")


def forcing_field() -> ScalarField:
    return ScalarField(lambda x: np.sin(2.0 * np.pi * x), name="forcing")


def kappa(params: ParamVector, x, dim: int = 1) -> np.ndarray | float:
    """Diffusion coefficient; strictly positive for finite input."""
    return kappa_field(params)(x, dim)


def forcing(x, dim: int = 1) -> np.ndarray | float:
    """f(x) = sin(2 pi x)."""
    return forcing_field()(x, dim)


def reference_params() -> ParamVector:
    """Ground truth used to generate the synthetic data."""
    return ParamVector((1.0, 1.0, 0.25, 0.25))
