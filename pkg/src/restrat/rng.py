"""Deterministic stream derivation for reproducible parallel runs.

Every random draw in the toolkit comes from a Philox (counter-based)
generator whose stream is derived from a root seed plus an integer path.
Distinct paths give independent streams, and the mapping is stable across
processes and thread schedules, so replication r of method m always sees the
same stream no matter how work is scheduled.

Lane constants keep the paths from colliding between subsystems.
"""

from __future__ import annotations

import numpy as np

LANE_POPULATION = 1
LANE_ASSIGNMENT = 2
LANE_REPLICATION = 3
LANE_LAW = 4


def rng_from(seed: int, *path: int) -> np.random.Generator:
    """Generator for the stream identified by (seed, path)."""
    seq = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(p) for p in path))
    return np.random.Generator(np.random.Philox(seq))
