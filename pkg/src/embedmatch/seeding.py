"""Deterministic seed splitting: one master seed, one stream per purpose.

Every source of randomness in the pipeline derives from a single master seed
through ``SeedSequence([master, purpose_id, *indices])``, so parallel workers
and re-runs see identical streams.  Purpose ids are frozen below; extend the
table, never renumber it.
"""

from __future__ import annotations

import numpy as np

PURPOSES = {
    "synthetic": 0,
    "split": 1,
    "weights": 2,
    "train": 3,
    "pairs": 4,
    "detector": 5,
}


def _sequence(master_seed: int, purpose: str, indices: tuple[int, ...]) -> np.random.SeedSequence:
    try:
        pid = PURPOSES[purpose]
    except KeyError:
        raise ValueError(f"unknown seed purpose {purpose!r}") from None
    return np.random.SeedSequence([int(master_seed), pid, *map(int, indices)])


def derive_seed(master_seed: int, purpose: str, *indices: int) -> int:
    """A u64 sub-seed for APIs that take a plain integer seed."""
    return int(_sequence(master_seed, purpose, indices).generate_state(1, np.uint64)[0])


def stream(master_seed: int, purpose: str, *indices: int) -> np.random.Generator:
    """A dedicated PCG64 generator for one purpose (and optional sub-index)."""
    return np.random.Generator(np.random.PCG64(_sequence(master_seed, purpose, indices)))
