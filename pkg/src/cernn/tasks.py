"""Generators and analytic baselines for the two benchmark tasks.

Copy-task symbols are 0-based indices: ``0..6`` are the data symbols
a1..a7, ``FILLER`` (7) is a8 and ``TRIGGER`` (8) is a9.
"""
from dataclasses import dataclass, field
import json

import numpy as np

N_DATA_SYMBOLS = 7
FILLER = 7
TRIGGER = 8
N_SYMBOLS = 9


@dataclass
class TaskSample:
    inputs: np.ndarray
    targets: np.ndarray
    symbols: np.ndarray = None


@dataclass
class RegressionTaskSpec:
    """y = W_m x + n with W_m fixed per instance, entries ~ N(0, 1/dim)."""

    dim: int
    noise_std: float = 0.1
    seed: int = 0
    W_m: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.dim < 1:
            raise ValueError("dim must be positive")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")
        if self.W_m is None:
            rng = np.random.default_rng(self.seed)
            self.W_m = rng.normal(0.0, 1.0 / np.sqrt(self.dim), size=(self.dim, self.dim))

    def sample(self, rng, batch_size):
        return gen_regression_batch(self, batch_size, rng)


@dataclass
class CopyTaskSpec:
    target_len: int = 10
    filler_len: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.target_len < 0 or self.filler_len < 0:
            raise ValueError("copy task lengths must be >= 0")

    @property
    def seq_len(self):
        return 2 * self.target_len + self.filler_len + 1

    @property
    def trigger_pos(self):
        return self.target_len + self.filler_len

    def sample(self, rng, batch_size):
        return gen_copy_batch(self, batch_size, rng)


def gen_regression_batch(spec, batch_size, rng):
    """Fresh draws x ~ N(0, I), n ~ N(0, noise_std^2 I); rows are samples."""
    x = rng.standard_normal((batch_size, spec.dim))
    noise = spec.noise_std * rng.standard_normal((batch_size, spec.dim))
    return TaskSample(x, x @ spec.W_m.T + noise)


def copy_symbols(spec, batch_size, rng):
    """Input and target symbol sequences, time-major ``(seq_len, batch)``."""
    L, Tl = spec.seq_len, spec.target_len
    data = rng.integers(0, N_DATA_SYMBOLS, size=(Tl, batch_size))
    inputs = np.full((L, batch_size), FILLER, dtype=np.int64)
    inputs[:Tl] = data
    inputs[spec.trigger_pos] = TRIGGER
    targets = np.full((L, batch_size), FILLER, dtype=np.int64)
    targets[L - Tl:] = data
    return inputs, targets


def gen_copy_batch(spec, batch_size, rng):
    """One-hot inputs ``(seq_len, batch, 9)`` and integer targets."""
    inputs, targets = copy_symbols(spec, batch_size, rng)
    return TaskSample(np.eye(N_SYMBOLS)[inputs], targets, inputs)


def memoryless_baseline_ce(spec):
    """Mean per-step CE of predicting filler everywhere and uniform data symbols
    over the final block."""
    return spec.target_len * np.log(N_DATA_SYMBOLS) / spec.seq_len


def regression_mse_floor(spec, reduction="mean"):
    """Irreducible MSE of the exact model; ``reduction`` matches the loss head."""
    if reduction == "mean":
        return spec.noise_std ** 2
    if reduction == "sum":
        return spec.noise_std ** 2 * spec.dim
    raise ValueError("reduction must be 'mean' or 'sum'")


def golden_record(spec, batch_size=1):
    """JSON-lines record of the sequences drawn from ``spec.seed``."""
    rng = np.random.default_rng(spec.seed)
    inputs, targets = copy_symbols(spec, batch_size, rng)
    return json.dumps(
        {
            "seed": spec.seed,
            "spec": {"target_len": spec.target_len, "filler_len": spec.filler_len},
            "inputs": inputs.T.tolist(),
            "targets": targets.T.tolist(),
        },
        sort_keys=True,
    )
