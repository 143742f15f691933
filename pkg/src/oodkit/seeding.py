"""Deterministic sub-seed derivation.

All stochastic stages (init, dropout, shuffling, MC passes, corruption
draws) derive their own seed from a base seed plus a tag tuple, so
changing one stage's stream never perturbs the others.
"""

from __future__ import annotations

import numpy as np

# Fixed tags for the independent random streams used across the package.
STREAM_INIT = 0
STREAM_DROPOUT = 1
STREAM_SHUFFLE = 2
STREAM_OOD_SHUFFLE = 3
STREAM_MC = 4
STREAM_CORRUPT = 5
STREAM_DATA = 6
STREAM_VAL_MC = 7


def derive_seed(base: int, *tags: int) -> int:
    """Collapse (base, *tags) into a single stable integer seed."""
    ss = np.random.SeedSequence((int(base), *[int(t) for t in tags]))
    return int(ss.generate_state(1, np.uint64)[0])


def derive_rng(base: int, *tags: int) -> np.random.Generator:
    return np.random.default_rng(derive_seed(base, *tags))
