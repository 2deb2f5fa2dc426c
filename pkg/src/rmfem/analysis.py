"""Discretization-error, energy and posterior diagnostics.

Metrics:
    - L2 displacement error ``||e(x)||`` against the fine reference solution.
    - Weighted nodal error ``||e||`` with dual-cell node weights.
    - Relative nodal error ``zeta = ||e|| / ||e(x)||`` and relative
      interpolation error ``eta = 1 - zeta``.
    - Total-energy distributions over random meshes.
    - Posterior mean / std / error summaries.
    - Chain diagnostics: batch-means standard errors and bimodality coefficients.
"""

from __future__ import annotations

import logging
from collections.abc import Iterable
from concurrent.futures import Executor
from dataclasses import asdict, dataclass

import numpy as np
import pandas as pd
from scipy import stats

from src.rmfem.elements import gauss_legendre
from src.rmfem.fem import FemSolution, assemble_and_solve, reference_solution
from src.rmfem.field import STRIP_HEIGHT, ParamVector
from src.rmfem.inverse import PosteriorSamples
from src.rmfem.mesh import Mesh, PerturbationScheme, perturb
from src.rmfem.streams import StreamKey

logger = logging.getLogger(__name__)

BIMODALITY_THRESHOLD = 5.0 / 9.0
SUMMARY_COLUMNS = ["method", "h", "param", "mean", "std", "error"]


@dataclass(frozen=True)
class ErrorReport:
    """Error norms of a coarse solution against the reference."""

    h: float
    l2_error: float
    nodal_error: float
    zeta: float
    eta: float


@dataclass(frozen=True, eq=False)
class EnergyDistribution:
    """Total energies of random-mesh solves next to the FEM and reference values."""

    h: float
    samples: np.ndarray
    unperturbed: float
    reference: float

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            {"h": self.h, "sample_id": np.arange(self.samples.size), "energy": self.samples}
        )

    def summary(self) -> dict:
        return {
            "h": self.h,
            "mean": float(self.samples.mean()),
            "median": float(np.median(self.samples)),
            "p95": float(np.percentile(self.samples, 95)),
            "max": float(self.samples.max()),
            "unperturbed": self.unperturbed,
            "reference": self.reference,
        }


@dataclass(frozen=True)
class SummaryRow:
    """Posterior moments of one parameter."""

    param: str
    mean: float
    std: float
    error: float


# ============================================================
# Interpolation error
# ============================================================


def dual_cell_weights(mesh: Mesh) -> np.ndarray:
    """Half the combined length of the elements adjacent to each 1D node."""
    sizes = mesh.element_sizes()
    weights = np.zeros(mesh.n_nodes)
    weights[:-1] += 0.5 * sizes
    weights[1:] += 0.5 * sizes
    return weights


def l2_error(solution: FemSolution, reference: FemSolution, quad_points: int = 8) -> float:
    """``||u_ref - u||_L2`` integrated piecewise over the union of both node sets."""
    xs, us = solution.mesh.x, solution.nodal_values
    xr, ur = reference.mesh.x, reference.nodal_values
    breaks = np.union1d(xs, xr)
    left, length = breaks[:-1], np.diff(breaks)
    points, weights = gauss_legendre(quad_points)
    xq = left[:, None] + 0.5 * (points[None, :] + 1.0) * length[:, None]
    diff = np.interp(xq, xr, ur) - np.interp(xq, xs, us)
    return float(np.sqrt(np.sum((diff**2 @ weights) * 0.5 * length)))


def error_report(
    solution: FemSolution, reference: FemSolution, quad_points: int = 8
) -> ErrorReport:
    """Split the L2 error of ``solution`` into nodal and interpolation shares.

    Raises:
        ValueError: If the solutions use different parameters or are not 1D.
    """
    if solution.params != reference.params:
        raise ValueError(f"Parameter mismatch: {solution.params.xi} vs {reference.params.xi}")
    if solution.mesh.dim != 1 or reference.mesh.dim != 1:
        raise ValueError("error_report compares 1D solutions only")

    l2 = l2_error(solution, reference, quad_points)
    exact_nodal = np.interp(solution.mesh.x, reference.mesh.x, reference.nodal_values)
    residual = exact_nodal - solution.nodal_values
    nodal = float(np.sqrt(np.sum(dual_cell_weights(solution.mesh) * residual**2)))
    zeta = nodal / l2 if l2 > 0.0 else 0.0
    return ErrorReport(h=solution.mesh.h, l2_error=l2, nodal_error=nodal, zeta=zeta, eta=1.0 - zeta)


def convergence_slope(h: Iterable[float], errors: Iterable[float]) -> float:
    """Least-squares slope of log(error) against log(h)."""
    return float(np.polyfit(np.log(list(h)), np.log(list(errors)), 1)[0])


# ============================================================
# Energy
# ============================================================


def reference_energy(params: ParamVector, dim: int = 1, n: int | None = None) -> float:
    """Fine-mesh energy; on the strip it is scaled by the strip height."""
    energy = reference_solution(params, n).energy
    return energy * STRIP_HEIGHT if dim == 2 else energy


def energy_distribution(
    reference_mesh: Mesh,
    scheme: PerturbationScheme,
    params: ParamVector,
    n_samples: int,
    stream: StreamKey,
    executor: Executor | None = None,
) -> EnergyDistribution:
    """Total energies of ``n_samples`` random-mesh solves at ``params``."""
    if n_samples < 1:
        raise ValueError(f"n_samples must be positive, got {n_samples}")

    def one(k: int) -> float:
        return assemble_and_solve(perturb(reference_mesh, scheme, stream.child(k)), params).energy

    indices = range(n_samples)
    energies = np.array(list(executor.map(one, indices)) if executor else [one(k) for k in indices])
    result = EnergyDistribution(
        h=reference_mesh.h,
        samples=energies,
        unperturbed=assemble_and_solve(reference_mesh, params).energy,
        reference=reference_energy(params, reference_mesh.dim),
    )
    logger.info(
        f"Energy distribution | h={result.h:g} | n={n_samples} | mean={energies.mean():.6e} | "
        f"fem={result.unperturbed:.6e} | ref={result.reference:.6e}"
    )
    return result


# ============================================================
# Posterior statistics
# ============================================================


def posterior_summary(samples: PosteriorSamples, truth: ParamVector) -> list[SummaryRow]:
    """Mean, unbiased std and absolute error of the mean for every parameter."""
    if samples.draws.shape[0] == 0:
        raise ValueError("Cannot summarize an empty set of draws")
    if samples.draws.shape[1] != len(truth.xi):
        raise ValueError(f"Draws have {samples.draws.shape[1]} columns, truth has {len(truth.xi)}")
    mean, std = samples.mean(), samples.std()
    return [
        SummaryRow(param=f"xi{k + 1}", mean=float(m), std=float(s), error=float(abs(t - m)))
        for k, (m, s, t) in enumerate(zip(mean, std, truth.xi, strict=True))
    ]


def summary_frame(runs: Iterable[tuple[str, float, list[SummaryRow]]]) -> pd.DataFrame:
    """Table layout: one row per (method, h, param)."""
    records = [
        {"method": method, "h": h, **asdict(row)}
        for method, h, rows in runs
        for row in rows
    ]
    return pd.DataFrame.from_records(records, columns=SUMMARY_COLUMNS)


def bimodality_coefficient(x: np.ndarray) -> float:
    """Sample bimodality coefficient; values above 5/9 suggest more than one mode."""
    x = np.asarray(x, dtype=float).ravel()
    n = x.size
    if n < 4:
        raise ValueError(f"Need at least 4 values, got {n}")
    skew = stats.skew(x, bias=False)
    excess = stats.kurtosis(x, fisher=True, bias=False)
    return float((skew**2 + 1.0) / (excess + 3.0 * (n - 1) ** 2 / ((n - 2) * (n - 3))))


def batch_means_stderr(x: np.ndarray, n_batches: int = 50) -> np.ndarray | float:
    """Monte Carlo standard error of the mean of a correlated chain by batch means."""
    x = np.asarray(x, dtype=float)
    size = x.shape[0] // n_batches
    if size < 2:
        raise ValueError(f"{x.shape[0]} draws are too few for {n_batches} batches")
    batches = x[: size * n_batches].reshape(n_batches, size, *x.shape[1:]).mean(axis=1)
    return batches.std(axis=0, ddof=1) / np.sqrt(n_batches)


def chain_diagnostics(samples: PosteriorSamples, n_batches: int = 50) -> dict:
    """Per-parameter batch-means standard error and bimodality coefficient of the draws.

    Short chains use fewer batches; fewer than 4 draws yield an empty dict.
    """
    draws = samples.draws
    n = draws.shape[0]
    if n < 4:
        return {}
    params = [f"xi{k + 1}" for k in range(draws.shape[1])]
    stderr = np.atleast_1d(batch_means_stderr(draws, min(n_batches, n // 2)))
    bimodality = [bimodality_coefficient(draws[:, k]) for k in range(draws.shape[1])]
    multimodal = [p for p, b in zip(params, bimodality, strict=True) if b > BIMODALITY_THRESHOLD]
    if multimodal:
        logger.info(f"Bimodal marginals | params={multimodal} | chains={samples.chains}")
    return {
        "mcse": dict(zip(params, stderr.tolist(), strict=True)),
        "bimodality": dict(zip(params, bimodality, strict=True)),
    }
