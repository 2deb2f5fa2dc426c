"""Bayesian inverse problem for the diffusion parameters.

Observation model ``y = O[u] + beta`` with ``beta ~ N(0, sigma_e^2 I)`` and
a standard normal prior on ``xi``. Three likelihoods are available:

    - deterministic FEM on the reference mesh,
    - Monte Carlo within Metropolis (MCwM): the mesh-marginal likelihood is
      replaced by the mean of ``M`` per-mesh likelihoods drawn afresh at
      every evaluation,
    - Metropolis within Monte Carlo (MwMC): ``M`` independent chains, one
      per perturbed mesh, pooled afterwards.

Everything is computed in log space; with sigma_e = 1e-5 natural-scale
densities overflow.
"""

from __future__ import annotations

import logging
import time
from collections.abc import Callable
from concurrent.futures import Executor
from dataclasses import dataclass, field
from enum import Enum
from typing import Protocol

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator
from scipy.special import logsumexp

from src.config import settings
from src.rmfem import streams
from src.rmfem.errors import ChainError
from src.rmfem.fem import assemble_and_solve, evaluate, reference_solution
from src.rmfem.field import NUM_MODES, STRIP_HEIGHT, ParamVector, reference_params
from src.rmfem.mesh import Mesh, PerturbationScheme, perturb
from src.rmfem.streams import StreamKey

logger = logging.getLogger(__name__)

NUM_OBSERVATIONS = 4
_LOG_SQRT_2PI = 0.5 * np.log(2.0 * np.pi)


# ============================================================
# Data types
# ============================================================


class LikelihoodVariant(str, Enum):
    DETERMINISTIC_FEM = "deterministic_fem"
    MCWM = "mcwm"
    MWMC = "mwmc"


def observation_locations(dim: int = 1) -> np.ndarray:
    """Four equally spaced points i/5 (on the mid-line y = 1/20 in 2D)."""
    x = np.arange(1, NUM_OBSERVATIONS + 1) / 5.0
    if dim == 1:
        return x
    if dim == 2:
        return np.column_stack([x, np.full_like(x, STRIP_HEIGHT / 2.0)])
    raise ValueError(f"dim must be 1 or 2, got {dim}")


@dataclass(frozen=True, eq=False)
class ObservationSet:
    """Noisy point observations of the reference solution."""

    locations: np.ndarray
    values: np.ndarray
    sigma_e: float
    generation_seed: int
    dim: int = 1

    def __post_init__(self):
        locations = np.array(self.locations, dtype=float)
        values = np.array(self.values, dtype=float).ravel()
        horizontal = locations if self.dim == 1 else locations[:, 0]
        if len(horizontal) != len(values):
            raise ValueError(f"{len(horizontal)} locations but {len(values)} values")
        if not np.all(np.diff(horizontal) > 0):
            raise ValueError("Observation locations must be sorted by horizontal coordinate")
        if not np.all(np.isfinite(values)):
            raise ValueError("Observation values must be finite")
        if self.sigma_e < 0:
            raise ValueError(f"sigma_e must be non-negative, got {self.sigma_e}")
        locations.setflags(write=False)
        values.setflags(write=False)
        object.__setattr__(self, "locations", locations)
        object.__setattr__(self, "values", values)

    def for_dim(self, dim: int) -> ObservationSet:
        """Same values and noise seed attached to the locations of another domain."""
        return ObservationSet(
            observation_locations(dim), self.values, self.sigma_e, self.generation_seed, dim
        )


@dataclass(frozen=True)
class LikelihoodSpec:
    """Which likelihood a chain uses and with how many mesh samples."""

    variant: LikelihoodVariant = LikelihoodVariant.DETERMINISTIC_FEM
    M: int = field(default_factory=lambda: settings.mesh_samples)
    scheme: PerturbationScheme | None = None
    carry_estimate: bool = False

    def __post_init__(self):
        object.__setattr__(self, "variant", LikelihoodVariant(self.variant))
        if self.M < 1:
            raise ValueError(f"M must be at least 1, got {self.M}")
        if self.variant is not LikelihoodVariant.DETERMINISTIC_FEM and self.scheme is None:
            raise ValueError(f"The {self.variant.value} likelihood needs a perturbation scheme")

    def to_dict(self) -> dict:
        return {
            "variant": self.variant.value,
            "M": self.M,
            "scheme": self.scheme.to_dict() if self.scheme else None,
            "carry_estimate": self.carry_estimate,
        }


class ChainConfig(BaseModel):
    """Random walk Metropolis settings."""

    model_config = ConfigDict(frozen=True)

    burn_in: int = Field(default_factory=lambda: settings.burn_in, gt=0)
    samples: int = Field(default_factory=lambda: settings.samples, gt=0)
    initial_state: tuple[float, ...] = Field(default=(0.0,) * NUM_MODES, min_length=1)
    target_acceptance: float = Field(
        default_factory=lambda: settings.target_acceptance, gt=0.0, lt=1.0
    )
    adapt_interval: int = Field(default_factory=lambda: settings.adapt_interval, gt=0)
    initial_scale: float = Field(default=1.0, gt=0.0)
    seed: int = Field(default=0, ge=0)

    @field_validator("initial_state")
    @classmethod
    def _finite_state(cls, value: tuple[float, ...]) -> tuple[float, ...]:
        if not all(np.isfinite(value)):
            raise ValueError("initial_state entries must be finite")
        return value

    def scaled(self, factor: float) -> ChainConfig:
        """Copy with burn-in, sample counts and adaptation window multiplied by ``factor``.

        A scaled chain keeps the same number of adaptation windows.
        """
        if factor <= 0:
            raise ValueError(f"Scale factor must be positive, got {factor}")
        return self.model_copy(
            update={
                "burn_in": max(1, round(self.burn_in * factor)),
                "samples": max(2, round(self.samples * factor)),
                "adapt_interval": max(1, round(self.adapt_interval * factor)),
            }
        )


@dataclass(frozen=True, eq=False)
class PosteriorSamples:
    """Post-burn-in draws with chain metadata."""

    draws: np.ndarray
    acceptance_ratio: float
    proposal_scale_final: float
    config: ChainConfig
    likelihood: LikelihoodSpec
    chains: int = 1

    def mean(self) -> np.ndarray:
        return self.draws.mean(axis=0)

    def std(self) -> np.ndarray:
        ddof = 1 if self.draws.shape[0] > 1 else 0
        return self.draws.std(axis=0, ddof=ddof)

    def metadata(self) -> dict:
        return {
            "chain_seed": self.config.seed,
            "config": self.config.model_dump(mode="json"),
            "likelihood": self.likelihood.to_dict(),
            "acceptance_ratio": self.acceptance_ratio,
            "proposal_scale_final": self.proposal_scale_final,
            "chains": self.chains,
        }


# ============================================================
# Observations, prior, likelihoods
# ============================================================


def synthesize_observations(
    domain: str | int = "1d",
    seed: int = 0,
    sigma_e: float | None = None,
    n_reference: int | None = None,
) -> ObservationSet:
    """Evaluate the fine-mesh reference solution at the observation points and add noise.

    The 2D set reuses the 1D values unchanged (the fields do not depend on y).
    """
    dim = {"1d": 1, "2d": 2, 1: 1, 2: 2}.get(domain)
    if dim is None:
        raise ValueError(f"Unknown domain {domain!r}; expected '1d' or '2d'")
    sigma_e = settings.sigma_e if sigma_e is None else sigma_e
    reference = reference_solution(reference_params(), n_reference)
    clean = evaluate(reference, observation_locations(1))
    rng = StreamKey(seed, (streams.OBSERVATIONS,)).generator()
    noise = rng.normal(0.0, sigma_e, size=clean.size)
    obs = ObservationSet(observation_locations(1), clean + noise, sigma_e, seed, dim=1)
    logger.info(f"Synthesized observations | seed={seed} | sigma_e={sigma_e:g} | y={obs.values}")
    return obs if dim == 1 else obs.for_dim(2)


def log_prior(params: ParamVector | np.ndarray) -> float:
    """Standard normal log-density."""
    xi = params.array if isinstance(params, ParamVector) else np.asarray(params, dtype=float)
    return float(-0.5 * xi @ xi - xi.size * _LOG_SQRT_2PI)


def gaussian_log_likelihood(predicted: np.ndarray, obs: ObservationSet) -> float:
    """Log-density of ``obs.values`` under N(predicted, sigma_e^2 I)."""
    if obs.sigma_e <= 0:
        raise ValueError("The Gaussian likelihood needs sigma_e > 0")
    residual = (obs.values - np.asarray(predicted, dtype=float)) / obs.sigma_e
    return float(-0.5 * residual @ residual - residual.size * (np.log(obs.sigma_e) + _LOG_SQRT_2PI))


def mesh_log_likelihood(params: ParamVector, obs: ObservationSet, mesh: Mesh) -> float:
    """Gaussian log-likelihood of the FEM prediction on a given (possibly perturbed) mesh."""
    if obs.dim != mesh.dim:
        raise ValueError(f"{obs.dim}D observations cannot be used on a {mesh.dim}D mesh")
    solution = assemble_and_solve(mesh, params)
    return gaussian_log_likelihood(evaluate(solution, obs.locations), obs)


def log_likelihood_fem(params: ParamVector, obs: ObservationSet, mesh: Mesh) -> float:
    """Deterministic FEM likelihood on the unperturbed mesh."""
    if not mesh.is_reference:
        raise ValueError("log_likelihood_fem expects the reference (unperturbed) mesh")
    return mesh_log_likelihood(params, obs, mesh)


def log_likelihood_mcwm(
    params: ParamVector,
    obs: ObservationSet,
    reference_mesh: Mesh,
    scheme: PerturbationScheme,
    M: int,
    stream: StreamKey,
    executor: Executor | None = None,
) -> float:
    """log of the mean of ``M`` per-mesh likelihoods over fresh random meshes.

    Mesh ``j`` is drawn from ``stream.child(j)``, so the value does not depend
    on how the solves are spread over workers.
    """
    if M < 1:
        raise ValueError(f"M must be at least 1, got {M}")

    def one(j: int) -> float:
        return mesh_log_likelihood(params, obs, perturb(reference_mesh, scheme, stream.child(j)))

    terms = list(executor.map(one, range(M))) if executor else [one(j) for j in range(M)]
    return float(logsumexp(terms) - np.log(M))


# ============================================================
# Log targets
# ============================================================


class LogTarget(Protocol):
    """Log posterior evaluated at ``xi``; stochastic targets draw from ``stream``."""

    def __call__(self, xi: np.ndarray, stream: StreamKey) -> float: ...


@dataclass
class FemPosterior:
    """Prior plus deterministic FEM likelihood on a fixed mesh."""

    obs: ObservationSet
    mesh: Mesh
    embed: Callable[[np.ndarray], ParamVector] = ParamVector.from_array
    refresh_current: bool = field(default=False, init=False)

    def __call__(self, xi: np.ndarray, stream: StreamKey) -> float:
        return log_prior(xi) + mesh_log_likelihood(self.embed(xi), self.obs, self.mesh)


@dataclass
class McwmPosterior:
    """Prior plus the MCwM likelihood estimate.

    With ``carry_estimate`` the chain keeps the accepted estimate (exact
    pseudo-marginal chain); otherwise the current state is re-estimated at
    every iteration.
    """

    obs: ObservationSet
    reference_mesh: Mesh
    scheme: PerturbationScheme
    M: int
    carry_estimate: bool = False
    executor: Executor | None = None
    embed: Callable[[np.ndarray], ParamVector] = ParamVector.from_array

    @property
    def refresh_current(self) -> bool:
        return not self.carry_estimate

    def __call__(self, xi: np.ndarray, stream: StreamKey) -> float:
        params = self.embed(xi)
        loglik = log_likelihood_mcwm(
            params, self.obs, self.reference_mesh, self.scheme, self.M, stream, self.executor
        )
        return log_prior(xi) + loglik


# ============================================================
# Random walk Metropolis
# ============================================================


def metropolis_accept(log_ratio: float, u: float) -> bool:
    """Accept with probability min(1, exp(log_ratio)) given a uniform draw ``u``."""
    if np.isnan(log_ratio):
        return False
    if log_ratio >= 0.0:
        return True
    return bool(u < np.exp(log_ratio))


def _run_chain(
    log_post: LogTarget,
    config: ChainConfig,
    root: StreamKey,
    likelihood: LikelihoodSpec,
) -> PosteriorSamples:
    start_time = time.time()
    rng = root.child(streams.PROPOSALS).generator()
    lik_stream = root.child(streams.LIKELIHOOD)
    refresh = bool(getattr(log_post, "refresh_current", False))

    xi = np.array(config.initial_state, dtype=float)
    dim = xi.size
    current = log_post(xi, lik_stream.child(0, 2))
    if not np.isfinite(current):
        raise ChainError(f"Log posterior not finite at initial state {xi.tolist()}: {current}")

    scale = config.initial_scale
    total = config.burn_in + config.samples
    draws = np.empty((config.samples, dim))
    window_accepts = 0
    kept_accepts = 0

    for t in range(total):
        if refresh and t > 0:
            refreshed = log_post(xi, lik_stream.child(t, 1))
            if np.isfinite(refreshed):
                current = refreshed
        proposal = xi + scale * rng.standard_normal(dim)
        candidate = log_post(proposal, lik_stream.child(t, 0))
        accepted = metropolis_accept(candidate - current, rng.random())
        if accepted:
            xi, current = proposal, candidate

        if t < config.burn_in:
            window_accepts += accepted
            if (t + 1) % config.adapt_interval == 0:
                rate = window_accepts / config.adapt_interval
                scale *= np.exp(rate - config.target_acceptance)
                window_accepts = 0
                logger.debug(
                    f"Adapted proposal | step={t + 1} | window_rate={rate:.3f} | scale={scale:.3e}"
                )
        else:
            kept_accepts += accepted
            draws[t - config.burn_in] = xi

    acceptance = kept_accepts / config.samples
    if not 0.0 < acceptance < 1.0:
        logger.warning(
            f"Degenerate acceptance ratio {acceptance:.3f} | seed={root.seed} path={root.path}"
        )
    logger.info(
        f"Chain complete | variant={likelihood.variant.value} | accept={acceptance:.3f} | "
        f"scale={scale:.3e} | draws={config.samples} | elapsed={time.time() - start_time:.1f}s"
    )
    return PosteriorSamples(
        draws=draws,
        acceptance_ratio=acceptance,
        proposal_scale_final=float(scale),
        config=config,
        likelihood=likelihood,
    )


def run_rwm(
    log_post: LogTarget,
    config: ChainConfig,
    likelihood: LikelihoodSpec | None = None,
) -> PosteriorSamples:
    """Adaptive random walk Metropolis with isotropic Gaussian proposals.

    The proposal scale starts at ``config.initial_scale`` (prior covariance)
    and is multiplied by ``exp(rate - target)`` after every adaptation
    window of the burn-in; it is frozen afterwards.

    Args:
        log_post: Callable ``(xi, stream) -> float``. If it exposes
            ``refresh_current = True`` the current state is re-evaluated every
            iteration (MCwM); otherwise the accepted value is carried.
        config: Chain settings.
        likelihood: Recorded in the result metadata.

    Returns:
        PosteriorSamples holding ``config.samples`` post-burn-in draws.

    Raises:
        ChainError: If the log posterior is not finite at the initial state.
    """
    return _run_chain(log_post, config, StreamKey(config.seed), likelihood or LikelihoodSpec())


def run_mwmc(
    obs: ObservationSet,
    reference_mesh: Mesh,
    scheme: PerturbationScheme,
    M: int,
    config: ChainConfig,
    executor: Executor | None = None,
) -> PosteriorSamples:
    """Metropolis within Monte Carlo: one FEM chain per random mesh, pooled."""
    spec = LikelihoodSpec(LikelihoodVariant.MWMC, M, scheme)
    root = StreamKey(config.seed)

    def chain(j: int) -> PosteriorSamples:
        mesh = perturb(reference_mesh, scheme, root.child(streams.MESHES, j))
        return _run_chain(FemPosterior(obs, mesh), config, root.child(streams.CHAINS, j), spec)

    runs = list(executor.map(chain, range(M))) if executor else [chain(j) for j in range(M)]
    return PosteriorSamples(
        draws=np.vstack([r.draws for r in runs]),
        acceptance_ratio=float(np.mean([r.acceptance_ratio for r in runs])),
        proposal_scale_final=float(np.mean([r.proposal_scale_final for r in runs])),
        config=config,
        likelihood=spec,
        chains=M,
    )


def run_posterior(
    obs: ObservationSet,
    reference_mesh: Mesh,
    likelihood: LikelihoodSpec,
    config: ChainConfig,
    executor: Executor | None = None,
) -> PosteriorSamples:
    """Dispatch to the sampler matching ``likelihood.variant``."""
    if likelihood.variant is LikelihoodVariant.DETERMINISTIC_FEM:
        return run_rwm(FemPosterior(obs, reference_mesh), config, likelihood)
    if likelihood.variant is LikelihoodVariant.MCWM:
        target = McwmPosterior(
            obs,
            reference_mesh,
            likelihood.scheme,
            likelihood.M,
            carry_estimate=likelihood.carry_estimate,
            executor=executor,
        )
        return run_rwm(target, config, likelihood)
    return run_mwmc(obs, reference_mesh, likelihood.scheme, likelihood.M, config, executor)


def posterior_mean_field(
    samples: PosteriorSamples,
    mesh: Mesh,
    max_solves: int = 200,
    embed: Callable[[np.ndarray], ParamVector] = ParamVector.from_array,
) -> np.ndarray:
    """Posterior-predictive mean of the nodal FEM solution on ``mesh``.

    Uses at most ``max_solves`` evenly thinned draws.
    """
    if max_solves < 1:
        raise ValueError(f"max_solves must be positive, got {max_solves}")
    n = samples.draws.shape[0]
    rows = np.unique(np.linspace(0, n - 1, min(n, max_solves)).astype(int))
    total = np.zeros(mesh.n_nodes)
    for row in rows:
        total += assemble_and_solve(mesh, embed(samples.draws[row])).nodal_values
    return total / rows.size
