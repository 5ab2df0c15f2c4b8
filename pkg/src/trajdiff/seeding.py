"""Deterministic RNG derivation.

Every source of randomness in the package flows from an integer master seed
through ``numpy.random.SeedSequence`` with a named spawn key.  The rule is

    rng = default_rng(SeedSequence(master_seed, spawn_key=(stream, *indices)))

where ``stream`` is one of the constants below and ``indices`` identify the
unit of work (instance index, record index, diffusion step, chain index...).
Because the key fixes the stream regardless of execution order, fanning work
out to a process pool can never change results.
"""

from __future__ import annotations

import numpy as np

# Substream identifiers.  Values are part of the on-disk reproducibility
# contract: changing them changes every derived dataset.
STREAM_PARAMS = 1  # problem-instance parameter sampling
STREAM_INIT_GUESS = 2  # solver initial guesses, per (instance, solve)
STREAM_WEIGHTS = 3  # model weight initialization
STREAM_TRAIN = 4  # training-loop draws (shuffling, k, eps, b, z)
STREAM_GT_RECORDS = 5  # record selection for the GT violation table
STREAM_GT_NOISE = 6  # corruption draws, per (record, step)
STREAM_CHAIN = 7  # reverse-sampling chains, per chain index
STREAM_UNIFORM = 8  # uniform-baseline decision vectors


def derived_rng(master_seed: int, *path: int) -> np.random.Generator:
    """Return the generator for substream ``path`` of ``master_seed``."""
    return np.random.default_rng(
        np.random.SeedSequence(master_seed, spawn_key=tuple(int(p) for p in path))
    )


def derived_seed_int(master_seed: int, *path: int) -> int:
    """Collapse a substream into a single reproducible 64-bit integer seed."""
    ss = np.random.SeedSequence(master_seed, spawn_key=tuple(int(p) for p in path))
    lo, hi = ss.generate_state(2, dtype=np.uint32)
    return int(lo) | (int(hi) << 32)
