"""Seedable counter-based random streams.

All randomness in the package comes from Philox4x64-10 bit generators keyed by
``numpy.random.SeedSequence([seed, *stream])``. Distinct ``stream`` tuples give
independent streams, so per-sample generation does not depend on the order or
number of workers.
"""

from __future__ import annotations

import numpy as np


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    seq = np.random.SeedSequence([int(seed), *(int(s) for s in stream)])
    return np.random.Generator(np.random.Philox(seq))


# stream tags; keep stable, they are part of the reproducibility contract
INIT = 1
DROPOUT = 2
SHUFFLE = 3
DATA = 4
