"""Central finite differences and the end-to-end gradient check.

The checker copies a model to float64, evaluates a fixed-mask training loss
through the same graph that training uses, and compares the tape gradients to
per-coordinate central differences.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .model import GroupEmotionModel, ModelConfig, collate
from .pooling import Mechanism
from .rng import DROPOUT, make_rng
from .synth import GroupSample
from .tensor import backward

DEFAULT_STEPS = (1e-3, 1e-4)
TOLERANCE = 1e-4


def finite_difference_gradient(f: Callable[[np.ndarray], float], x, h: float = 1e-3) -> np.ndarray:
    """``(f(x + h e_i) - f(x - h e_i)) / 2h`` for every coordinate, in float64."""
    if not h > 0:
        raise ValueError(f"step must be positive, got {h}")
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat, g = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = float(f(x))
        flat[i] = old - h
        fm = float(f(x))
        flat[i] = old
        g[i] = (fp - fm) / (2 * h)
    return grad


def relative_error(a, b, floor: float = 1e-8) -> np.ndarray:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def check_gradient(
    f: Callable[[np.ndarray], float], x: np.ndarray, analytic: np.ndarray, steps=DEFAULT_STEPS, tol=TOLERANCE
) -> np.ndarray:
    """Element-wise relative error, retrying failing coordinates with the next step size."""
    err = relative_error(analytic, finite_difference_gradient(f, x, steps[0]))
    for h in steps[1:]:
        bad = err >= tol
        if not bad.any():
            break
        retry = relative_error(analytic, finite_difference_gradient(f, x, h))
        err = np.where(bad, np.minimum(err, retry), err)
    return err


@dataclass
class GradCheckResult:
    mechanism: str
    trial: int
    worst: dict[str, float]

    @property
    def max_error(self) -> float:
        return max(self.worst.values()) if self.worst else 0.0

    @property
    def worst_param(self) -> str:
        return max(self.worst, key=self.worst.get)


def random_problem(mechanism: Mechanism, seed: int, trial: int):
    """A small random model configuration plus a batch with 1..6 faces per sample."""
    rng = make_rng(seed, 0xC4EC, list(Mechanism).index(mechanism), trial)
    g_in, f_in = int(rng.integers(2, 6)), int(rng.integers(2, 6))
    f_dim = int(rng.integers(2, 6))
    g_dim = f_dim if mechanism is Mechanism.A else int(rng.integers(2, 6))
    hidden = lambda: tuple(int(w) for w in rng.integers(2, 6, size=int(rng.integers(0, 2))))  # noqa: E731
    config = ModelConfig(
        mechanism=mechanism,
        global_input_dim=g_in,
        face_input_dim=f_in,
        global_dim=g_dim,
        face_dim=f_dim,
        global_hidden=hidden(),
        face_hidden=hidden(),
        dropout=0.25,
        scorer_hidden=int(rng.integers(2, 6)),
    )
    model = GroupEmotionModel(config, seed=int(rng.integers(2**31))).copy(np.float64)
    for name, p in model.params.items():
        # move batch-norm affine and biases off their symmetric initial values
        if name.endswith(("gamma", "beta", "bias")):
            p.data += rng.normal(0, 0.5, size=p.shape)
    n_samples = int(rng.integers(2, 5))
    samples = [
        GroupSample(
            f"g{i}",
            rng.normal(size=g_in),
            rng.normal(size=(int(rng.integers(1, 7)), f_in)),
            int(rng.integers(3)),
        )
        for i in range(n_samples)
    ]
    return model, collate(samples, np.float64)


def check_model_gradients(
    model: GroupEmotionModel, batch, dropout_seed: int = 0, steps=DEFAULT_STEPS, tol=TOLERANCE
) -> dict[str, float]:
    """Worst element-wise relative error per parameter for the train-mode batch loss."""

    def loss_value() -> float:
        loss, _ = model.batch_loss(batch, training=True, rng=make_rng(dropout_seed, DROPOUT))
        return loss.item()

    model.zero_grad()
    loss, _ = model.batch_loss(batch, training=True, rng=make_rng(dropout_seed, DROPOUT))
    backward(loss)
    worst = {}
    for name, p in model.params.items():
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
        original = p.data

        def f(x, p=p):
            p.data = x
            return loss_value()

        err = check_gradient(f, original.copy(), analytic, steps, tol)
        p.data = original
        worst[name] = float(err.max())
    return worst


def run_suite(seed: int = 0, trials: int = 20, mechanisms=None, progress: Optional[Callable] = None):
    results = []
    for mech in mechanisms or list(Mechanism):
        for t in range(trials):
            model, batch = random_problem(mech, seed, t)
            res = GradCheckResult(mech.value, t, check_model_gradients(model, batch, dropout_seed=seed + t))
            results.append(res)
            if progress is not None:
                progress(res)
    return results
