"""Experiment configuration.

An experiment is described by one flat ``KEY=value`` file (read with
python-dotenv) whose keys are the ExperimentConfig fields; chain settings
are flattened (``burn_in=10000``). Command-line flags override file values,
which override the Settings defaults.
"""

from __future__ import annotations

from enum import Enum
from fractions import Fraction
from pathlib import Path
from typing import Any

from dotenv import dotenv_values
from pydantic import (
    BaseModel,
    ConfigDict,
    Field,
    ValidationError,
    field_validator,
    model_validator,
)

from src.config import settings
from src.rmfem.errors import ConfigError, ObservationOffGridError
from src.rmfem.inverse import ChainConfig, observation_locations
from src.rmfem.mesh import (
    PerturbationScheme,
    fixed_observation_nodes,
    movable_components,
    strip_mesh_2d,
    uniform_mesh_1d,
)

_H_TOL = 1e-9


class ExperimentKind(str, Enum):
    FORWARD_DEMO = "forward_demo"
    POSTERIOR = "posterior"
    INTERPOLATION = "interpolation"
    ENERGY = "energy"
    TABLE = "table"


class Domain(str, Enum):
    ONE_D = "1d"
    TWO_D = "2d"

    @property
    def dim(self) -> int:
        return 1 if self is Domain.ONE_D else 2


class Method(str, Enum):
    FEM = "fem"
    RMFEM = "rmfem"
    RMFEM_FIXED_OBS = "rmfem_fixed_obs"


class Marginalization(str, Enum):
    MCWM = "mcwm"
    MWMC = "mwmc"


def elements_for(h: float) -> int:
    """Element count ``1/h``; h must be the reciprocal of an integer."""
    n = round(1.0 / h)
    if n < 2 or abs(n * h - 1.0) > _H_TOL:
        raise ValueError(f"h={h} is not 1/n for an integer n >= 2")
    return n


def fixed_obs_problem(dim: int, n: int) -> str | None:
    """Why pinning the observation nodes fails on the reference mesh, or None."""
    mesh = uniform_mesh_1d(n) if dim == 1 else strip_mesh_2d(n)
    try:
        fixed = fixed_observation_nodes(mesh, observation_locations(dim))
    except ObservationOffGridError:
        return "off-grid observation points"
    scheme = PerturbationScheme.for_mesh(mesh, fixed_nodes=fixed)
    if not movable_components(mesh, scheme).any():
        return "no movable node left"
    return None


class ExperimentConfig(BaseModel):
    """Everything needed to reproduce one experiment run."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    experiment: ExperimentKind
    domain: Domain = Domain.ONE_D
    method: Method = Method.FEM
    h_list: tuple[float, ...] = (1 / 10, 1 / 20, 1 / 40)
    M: int = Field(default_factory=lambda: settings.mesh_samples, ge=1)
    marginalization: Marginalization = Marginalization.MCWM
    chain: ChainConfig = Field(default_factory=ChainConfig)
    seed: int = Field(default=0, ge=0)
    sigma_e: float = Field(default_factory=lambda: settings.sigma_e, gt=0.0)
    energy_samples: int = Field(default_factory=lambda: settings.energy_samples, ge=1)
    forward_samples: int = Field(default_factory=lambda: settings.forward_samples, ge=0)
    scale: float = Field(default=1.0, gt=0.0)
    threads: int = Field(default_factory=lambda: settings.threads, ge=1)
    out_dir: Path = Field(default_factory=lambda: Path(settings.out_dir))

    @field_validator("h_list", mode="before")
    @classmethod
    def _parse_h_list(cls, value: Any) -> Any:
        if isinstance(value, str):
            value = [part for part in value.split(",") if part.strip()]
        if isinstance(value, (list, tuple)):
            return tuple(float(Fraction(v.strip())) if isinstance(v, str) else v for v in value)
        return value

    @field_validator("h_list")
    @classmethod
    def _check_h_list(cls, value: tuple[float, ...]) -> tuple[float, ...]:
        if not value:
            raise ValueError("h_list must not be empty")
        for h in value:
            elements_for(h)
        return value

    @model_validator(mode="after")
    def _check_combination(self) -> ExperimentConfig:
        if self.experiment in (ExperimentKind.FORWARD_DEMO, ExperimentKind.INTERPOLATION):
            if self.domain is not Domain.ONE_D:
                raise ValueError(f"{self.experiment.value} is defined on the 1D domain only")
        if self.domain is Domain.TWO_D or self.experiment is ExperimentKind.TABLE:
            for n in self.elements:
                if n % 10:
                    raise ValueError(f"2D strip meshes need 1/h to be a multiple of 10, got {n}")
        fixed_dims = []
        if self.experiment is ExperimentKind.TABLE:
            fixed_dims = [1]
        elif self.method is Method.RMFEM_FIXED_OBS:
            fixed_dims = [self.domain.dim]
        for dim in fixed_dims:
            for n in self.elements:
                problem = fixed_obs_problem(dim, n)
                if problem:
                    raise ValueError(f"rmfem_fixed_obs cannot run with n={n}: {problem}")
        return self

    @property
    def elements(self) -> tuple[int, ...]:
        return tuple(elements_for(h) for h in self.h_list)

    @property
    def effective_chain(self) -> ChainConfig:
        return self.chain if self.scale == 1.0 else self.chain.scaled(self.scale)

    def hashable_dict(self) -> dict:
        """Numerical content of the config (worker count and paths excluded)."""
        return self.model_dump(mode="json", exclude={"threads", "out_dir"})


def _parse_state(value: str) -> tuple[float, ...]:
    return tuple(float(v) for v in value.split(",") if v.strip())


def load_experiment(
    experiment: ExperimentKind | str,
    path: str | Path | None = None,
    overrides: dict[str, Any] | None = None,
) -> ExperimentConfig:
    """Build an ExperimentConfig from a flat key/value file plus overrides.

    Raises:
        FileNotFoundError: If ``path`` does not exist.
        ConfigError: If any value is invalid or the combination is unsupported.
    """
    values: dict[str, Any] = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"Config file not found: {path}")
        values.update({k: v for k, v in dotenv_values(path).items() if v is not None})
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    values["experiment"] = ExperimentKind(experiment)

    chain_keys = set(ChainConfig.model_fields) - {"seed"}
    chain = {k: values.pop(k) for k in list(values) if k in chain_keys}
    if isinstance(chain.get("initial_state"), str):
        chain["initial_state"] = _parse_state(chain["initial_state"])
    values.setdefault("chain", chain)
    try:
        return ExperimentConfig(**values)
    except ValidationError as e:
        raise ConfigError(str(e)) from e
