"""Experiment commands.

Each command takes a validated ExperimentConfig, runs its numerics and
writes CSV artifacts (with JSON sidecars) under ``config.out_dir``. Runs
over h (and over the table columns) are spread over a thread pool; every
run derives its seed from the master seed and its own indices, so outputs
do not depend on the worker count.
"""

import logging
import time
from collections.abc import Callable
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import TypeVar

import numpy as np
import pandas as pd

from src.cli.experiment import Domain, ExperimentConfig, Marginalization, Method
from src.rmfem import streams
from src.rmfem.analysis import (
    EnergyDistribution,
    chain_diagnostics,
    energy_distribution,
    error_report,
    posterior_summary,
    summary_frame,
)
from src.rmfem.artifacts import provenance, write_samples, write_table
from src.rmfem.fem import assemble_and_solve, reference_solution
from src.rmfem.field import reference_params
from src.rmfem.inverse import (
    FemPosterior,
    LikelihoodSpec,
    LikelihoodVariant,
    ObservationSet,
    PosteriorSamples,
    posterior_mean_field,
    run_posterior,
    run_rwm,
    synthesize_observations,
)
from src.rmfem.mesh import (
    Mesh,
    PerturbationScheme,
    fixed_observation_nodes,
    perturb,
    strip_mesh_2d,
    uniform_mesh_1d,
)
from src.rmfem.streams import StreamKey

logger = logging.getLogger(__name__)

T = TypeVar("T")
R = TypeVar("R")

METHOD_INDEX = {Method.FEM: 0, Method.RMFEM: 1, Method.RMFEM_FIXED_OBS: 2}

TABLE_COLUMNS = (
    (Method.FEM, Domain.ONE_D),
    (Method.RMFEM, Domain.ONE_D),
    (Method.RMFEM_FIXED_OBS, Domain.ONE_D),
    (Method.RMFEM, Domain.TWO_D),
)


@dataclass(frozen=True)
class RunSpec:
    """One posterior run: a method on a domain with ``n`` elements per unit length."""

    method: Method
    domain: Domain
    n: int

    @property
    def label(self) -> str:
        return f"{self.method.value}_{self.domain.value}"

    @property
    def h(self) -> float:
        return 1.0 / self.n


# ============================================================
# Helpers
# ============================================================


def reference_mesh(domain: Domain, n: int) -> Mesh:
    return uniform_mesh_1d(n) if domain is Domain.ONE_D else strip_mesh_2d(n)


def scheme_for(method: Method, mesh: Mesh, obs: ObservationSet) -> PerturbationScheme:
    """Default scheme for ``mesh``; the fixed-observation method pins the observed nodes."""
    fixed = ()
    if method is Method.RMFEM_FIXED_OBS:
        fixed = fixed_observation_nodes(mesh, obs.locations)
    return PerturbationScheme.for_mesh(mesh, fixed_nodes=fixed)


def likelihood_for(
    config: ExperimentConfig, method: Method, mesh: Mesh, obs: ObservationSet
) -> LikelihoodSpec:
    if method is Method.FEM:
        return LikelihoodSpec(LikelihoodVariant.DETERMINISTIC_FEM, config.M)
    variant = LikelihoodVariant.MCWM
    if config.marginalization is Marginalization.MWMC:
        variant = LikelihoodVariant.MWMC
    return LikelihoodSpec(variant, config.M, scheme_for(method, mesh, obs))


def run_seed(config: ExperimentConfig, run: RunSpec) -> int:
    """Chain seed of one run, a function of the master seed and the run's indices only."""
    domain_index = 0 if run.domain is Domain.ONE_D else 1
    key = StreamKey(config.seed, (streams.RUNS, domain_index, METHOD_INDEX[run.method], run.n))
    return key.derive_seed()


def observations(config: ExperimentConfig, domain: Domain = Domain.ONE_D) -> ObservationSet:
    obs = synthesize_observations("1d", config.seed, config.sigma_e)
    return obs if domain is Domain.ONE_D else obs.for_dim(2)


def parallel_map(config: ExperimentConfig, fn: Callable[[T], R], items: list[T]) -> list[R]:
    """Map in input order over a pool of ``config.threads`` workers."""
    if config.threads == 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=config.threads) as pool:
        return list(pool.map(fn, items))


def sidecar(config: ExperimentConfig, **extra) -> dict:
    return provenance(
        config.hashable_dict(), config.seed, experiment=config.experiment.value, **extra
    )


def _out(config: ExperimentConfig, name: str) -> Path:
    return Path(config.out_dir) / name


def _curve(name: str, x: np.ndarray, u: np.ndarray) -> pd.DataFrame:
    return pd.DataFrame({"curve": name, "x": x, "u": u})


def execute_run(config: ExperimentConfig, run: RunSpec, obs: ObservationSet) -> PosteriorSamples:
    """Sample the posterior for one (method, domain, h) run."""
    mesh = reference_mesh(run.domain, run.n)
    likelihood = likelihood_for(config, run.method, mesh, obs)
    chain = config.effective_chain.model_copy(update={"seed": run_seed(config, run)})
    logger.info(f"Posterior run | {run.label} | h=1/{run.n} | variant={likelihood.variant.value}")
    return run_posterior(obs, mesh, likelihood, chain)


def _write_runs(
    config: ExperimentConfig,
    prefix: str,
    runs: list[RunSpec],
    results: list[PosteriorSamples],
) -> tuple[list[Path], pd.DataFrame]:
    written: list[Path] = []
    rows = []
    truth = reference_params()
    for run, samples in zip(runs, results, strict=True):
        path = _out(config, f"{prefix}_{run.label}_n{run.n}_draws.csv")
        meta = sidecar(config, h=run.h, diagnostics=chain_diagnostics(samples))
        written += write_samples(samples, path, meta)
        rows.append((run.label, run.h, posterior_summary(samples, truth)))
    return written, summary_frame(rows)


# ============================================================
# Commands
# ============================================================


def cmd_forward_demo(config: ExperimentConfig) -> list[Path]:
    """Reference, FEM and random-mesh solutions at the true parameters, plus the observations."""
    params = reference_params()
    obs = observations(config)
    reference = reference_solution(params)
    written = write_table(
        pd.DataFrame({"x": obs.locations, "y": obs.values}),
        _out(config, "forward_observations.csv"),
        sidecar(config),
    )

    def curves(n: int) -> pd.DataFrame:
        mesh = uniform_mesh_1d(n)
        scheme = scheme_for(config.method, mesh, obs)
        root = StreamKey(config.seed, (streams.MESHES, n))
        frames = [
            _curve("reference", reference.mesh.x, reference.nodal_values),
            _curve("fem", mesh.x, assemble_and_solve(mesh, params).nodal_values),
        ]
        for k in range(config.forward_samples):
            sample = assemble_and_solve(perturb(mesh, scheme, root.child(k)), params)
            frames.append(_curve(f"rmfem_{k:03d}", sample.mesh.x, sample.nodal_values))
        return pd.concat(frames, ignore_index=True)

    elements = list(config.elements)
    for n, frame in zip(elements, parallel_map(config, curves, elements), strict=True):
        path = _out(config, f"forward_n{n}_curves.csv")
        written += write_table(frame, path, sidecar(config, h=1.0 / n))
    return written


def cmd_posterior(config: ExperimentConfig) -> list[Path]:
    """Posterior draws and a summary for one method over every h."""
    obs = observations(config, config.domain)
    runs = [RunSpec(config.method, config.domain, n) for n in config.elements]
    results = parallel_map(config, lambda run: execute_run(config, run, obs), runs)

    written, summary = _write_runs(config, "posterior", runs, results)
    path = _out(config, f"posterior_{runs[0].label}_summary.csv")
    written += write_table(summary, path, sidecar(config))
    return written


def cmd_interpolation(config: ExperimentConfig) -> list[Path]:
    """Error report per h plus FEM and posterior-mean curves on a reference and a random mesh."""
    params = reference_params()
    obs = observations(config)
    reference = reference_solution(params)
    chain = config.effective_chain

    def one(n: int) -> tuple[dict, pd.DataFrame]:
        mesh = uniform_mesh_1d(n)
        fem = assemble_and_solve(mesh, params)
        report = error_report(fem, reference)
        stream = StreamKey(config.seed, (streams.MESHES, n))
        perturbed = perturb(mesh, scheme_for(config.method, mesh, obs), stream)
        seed = run_seed(config, RunSpec(Method.FEM, Domain.ONE_D, n))

        frames = []
        for tag, target in (("reference_mesh", mesh), ("perturbed_mesh", perturbed)):
            solution = fem if target is mesh else assemble_and_solve(target, params)
            samples = run_rwm(FemPosterior(obs, target), chain.model_copy(update={"seed": seed}))
            mean_field = posterior_mean_field(samples, target)
            frames.append(_curve(f"fem_{tag}", target.x, solution.nodal_values))
            frames.append(_curve(f"posterior_mean_{tag}", target.x, mean_field))
        return asdict(report), pd.concat(frames, ignore_index=True)

    elements = list(config.elements)
    results = parallel_map(config, one, elements)
    written: list[Path] = []
    for n, (_, frame) in zip(elements, results, strict=True):
        path = _out(config, f"interpolation_n{n}_curves.csv")
        written += write_table(frame, path, sidecar(config, h=1.0 / n))
    errors = pd.DataFrame.from_records([row for row, _ in results])
    written += write_table(errors, _out(config, "interpolation_errors.csv"), sidecar(config))
    return written


def cmd_energy(config: ExperimentConfig) -> list[Path]:
    """Total-energy distributions over random meshes, one file per h plus a summary."""
    params = reference_params()
    obs = observations(config, config.domain)
    domain = config.domain

    def one(n: int) -> EnergyDistribution:
        mesh = reference_mesh(domain, n)
        scheme = scheme_for(config.method, mesh, obs)
        stream = StreamKey(config.seed, (streams.MESHES, domain.dim, n))
        return energy_distribution(mesh, scheme, params, config.energy_samples, stream)

    elements = list(config.elements)
    results = parallel_map(config, one, elements)
    written: list[Path] = []
    for n, dist in zip(elements, results, strict=True):
        path = _out(config, f"energy_{domain.value}_n{n}.csv")
        written += write_table(dist.to_frame(), path, sidecar(config, h=dist.h))
    summary = pd.DataFrame.from_records([dist.summary() for dist in results])
    path = _out(config, f"energy_{domain.value}_summary.csv")
    written += write_table(summary, path, sidecar(config))
    return written


def cmd_table(config: ExperimentConfig) -> list[Path]:
    """Posterior mean, std and error of every parameter for the four method columns."""
    start_time = time.time()
    obs_by_domain = {domain: observations(config, domain) for domain in Domain}
    runs = [
        RunSpec(method, domain, n) for method, domain in TABLE_COLUMNS for n in config.elements
    ]
    results = parallel_map(
        config, lambda run: execute_run(config, run, obs_by_domain[run.domain]), runs
    )

    written, table = _write_runs(config, "table", runs, results)
    written += write_table(table, _out(config, "table.csv"), sidecar(config))
    logger.info(f"Table complete | runs={len(runs)} | elapsed={time.time() - start_time:.1f}s")
    return written


COMMANDS: dict[str, Callable[[ExperimentConfig], list[Path]]] = {
    "forward_demo": cmd_forward_demo,
    "posterior": cmd_posterior,
    "interpolation": cmd_interpolation,
    "energy": cmd_energy,
    "table": cmd_table,
}


def run_experiment(config: ExperimentConfig) -> list[Path]:
    """Dispatch ``config`` to its command and return the written paths."""
    return COMMANDS[config.experiment.value](config)
