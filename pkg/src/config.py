"""Application configuration using Pydantic Settings."""

from pathlib import Path

from dotenv import load_dotenv
from pydantic import Field
from pydantic_settings import BaseSettings, SettingsConfigDict

# Explicitly load .env into os.environ BEFORE Pydantic reads them
_ENV_FILE = Path(__file__).resolve().parent.parent / ".env"
load_dotenv(_ENV_FILE, override=False)


class Settings(BaseSettings):
    """Centralized defaults loaded from environment variables (prefix ``RMFEM_``)."""

    # --- Forward model ---
    reference_elements: int = Field(
        default=1000, ge=2, description="Element count of the data-generating mesh"
    )
    quadrature_points: int = Field(
        default=4, ge=1, description="Gauss-Legendre points per element direction"
    )

    # --- Observations ---
    sigma_e: float = Field(default=1e-5, ge=0.0, description="Observation noise std")

    # --- RM-FEM ---
    perturbation_exponent: float = Field(default=1.0, ge=1.0, description="Exponent p in h^p")
    mesh_samples: int = Field(default=10, ge=1, description="Perturbed meshes per likelihood")
    max_redraws: int = Field(default=100, ge=0, description="Redraws of an invalid 2D mesh")

    # --- MCMC ---
    burn_in: int = Field(default=10000, gt=0, description="Burn-in iterations (discarded)")
    samples: int = Field(default=10000, gt=0, description="Retained iterations")
    target_acceptance: float = Field(default=0.3, gt=0.0, lt=1.0)
    adapt_interval: int = Field(default=200, gt=0, description="Scale update window")

    # --- Experiments ---
    energy_samples: int = Field(default=500, ge=1, description="Meshes per energy histogram")
    forward_samples: int = Field(default=100, ge=0, description="RM-FEM curves in forward demo")
    out_dir: str = Field(default="./results", description="Artifact output directory")
    threads: int = Field(default=1, ge=1, description="Worker threads for independent runs")
    log_level: str = Field(default="INFO", description="Root logging level")

    model_config = SettingsConfigDict(env_prefix="RMFEM_", extra="ignore")


# Singleton instance
settings = Settings()
