"""CSV artifacts with JSON provenance sidecars.

Every table is written as ``<name>.csv`` next to ``<name>.json`` holding the
config hash, seed and code version. Output bytes depend only on the data,
so reruns with the same seed are byte-identical.
"""

import hashlib
import json
import logging
from pathlib import Path

import pandas as pd

from src import __version__
from src.rmfem.inverse import PosteriorSamples

logger = logging.getLogger(__name__)

FLOAT_FORMAT = "%.12g"


def config_hash(config: dict) -> str:
    """sha256 of the canonical JSON encoding of ``config``."""
    canonical = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def provenance(config: dict, seed: int, **extra) -> dict:
    """Sidecar payload shared by every artifact of one run."""
    return {"config_hash": config_hash(config), "seed": seed, "code_version": __version__, **extra}


def write_table(frame: pd.DataFrame, path: str | Path, sidecar: dict) -> list[Path]:
    """Write ``frame`` as CSV plus its JSON sidecar.

    Returns:
        Paths of the CSV and the sidecar.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
    meta_path = path.with_suffix(".json")
    meta_path.write_text(json.dumps(sidecar, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    logger.info(f"Wrote {path.name} | rows={len(frame)}")
    return [path, meta_path]


def samples_frame(samples: PosteriorSamples) -> pd.DataFrame:
    columns = [f"xi{k + 1}" for k in range(samples.draws.shape[1])]
    return pd.DataFrame(samples.draws, columns=columns)


def write_samples(samples: PosteriorSamples, path: str | Path, sidecar: dict) -> list[Path]:
    """Draws as columns ``xi1..xid``; chain metadata goes into the sidecar."""
    return write_table(samples_frame(samples), path, {**sidecar, **samples.metadata()})
