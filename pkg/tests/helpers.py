"""Small builders shared by the test modules."""

import numpy as np

from group_attention.model import ModelConfig
from group_attention.synth import GroupSample

# One PASS/FAIL line per acceptance criterion, printed in the terminal summary.
ACCEPTANCE_LINES: list[str] = []


def random_samples(n, g_in=6, f_in=5, max_faces=6, seed=0):
    rng = np.random.default_rng(seed)
    return [
        GroupSample(f"s{i}", rng.normal(size=g_in), rng.normal(size=(int(rng.integers(1, max_faces + 1)), f_in)), int(rng.integers(3)))
        for i in range(n)
    ]


def small_config(mechanism, **kw):
    dims = dict(global_input_dim=6, face_input_dim=5, global_dim=4, face_dim=4, scorer_hidden=3)
    dims.update(kw)
    return ModelConfig(mechanism=mechanism, **dims)
