"""Counter-based seeding so every stochastic unit (tree, replicate, fold) owns an
independent stream that does not depend on execution order."""
from __future__ import annotations

import numpy as np

# stream tags; never renumber, saved models and outputs depend on them
STREAM_OUTCOME_FOREST = 1
STREAM_PROPENSITY_FOREST = 2
STREAM_EFFECT_TREES = 3
STREAM_REGRESSION_FOREST = 4
STREAM_BOOTSTRAP = 5
STREAM_SIMULATOR = 6


def check_seed(seed: int) -> int:
    seed = int(seed)
    if seed < 0 or seed >= 2**64:
        raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
    return seed


def unit_sequence(seed: int, stream: int, counter: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([check_seed(seed), stream, counter])


def unit_generator(seed: int, stream: int, counter: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(unit_sequence(seed, stream, counter)))


def unit_key(seed: int, stream: int, counter: int) -> np.uint64:
    """64-bit key for the in-kernel splitmix generator."""
    # spawn keeps the key stream separate from the Generator drawn for the same unit
    child = unit_sequence(seed, stream, counter).spawn(1)[0]
    return child.generate_state(1, dtype=np.uint64)[0]
