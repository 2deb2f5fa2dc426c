"""Counter-based random streams.

Every random draw in the laboratory comes from a generator built out of a
``StreamKey``: a master seed plus an integer path. Two keys with the same
seed and path always yield the same stream, whatever thread asks for it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Top-level path components; keep values stable, they are part of the output.
OBSERVATIONS = 0
PROPOSALS = 1
LIKELIHOOD = 2
MESHES = 3
CHAINS = 4
RUNS = 5


@dataclass(frozen=True)
class StreamKey:
    """Seed plus counter path identifying one independent stream."""

    seed: int
    path: tuple[int, ...] = ()

    def __post_init__(self):
        if self.seed < 0:
            raise ValueError(f"Seed must be non-negative, got {self.seed}")
        if any(i < 0 for i in self.path):
            raise ValueError(f"Stream path entries must be non-negative: {self.path}")

    def child(self, *indices: int) -> StreamKey:
        """Key for a sub-stream, e.g. mesh ``j`` of iteration ``t``."""
        return StreamKey(self.seed, self.path + tuple(int(i) for i in indices))

    def generator(self) -> np.random.Generator:
        return np.random.default_rng(np.random.SeedSequence(self.seed, spawn_key=self.path))

    def derive_seed(self) -> int:
        """Collapse the key into a plain 63-bit seed (for nested configs)."""
        state = np.random.SeedSequence(self.seed, spawn_key=self.path).generate_state(2)
        return int((int(state[0]) << 32 | int(state[1])) & 0x7FFF_FFFF_FFFF_FFFF)

    def to_dict(self) -> dict:
        return {"seed": self.seed, "path": list(self.path)}
