"""Shared builders for the test modules."""

import numpy as np

from evaction.events import EventStream
from evaction.model import ModelConfig, ModelParams

ACCEPTANCE_LINES: list[str] = []

SMALL = ModelConfig(input_hw=(16, 16), embed_dim=16, heads=4, queue_len=12, num_classes=3,
                    backbone_spec=((4, 2), (8, 1), (8, 2)), ff_dim=32)


def random_stream(rng, n, width=32, height=24, t_max=100_000, label=None, subject=None):
    t = np.sort(rng.integers(0, t_max, n))
    return EventStream(width, height, rng.integers(0, width, n), rng.integers(0, height, n), t,
                       rng.choice([-1, 1], n), label=label, subject=subject)


def perturbed(params: ModelParams, seed: int, scale: float = 0.1) -> ModelParams:
    """Float64 copy with every tensor nudged away from symmetric init values."""
    out = params.astype(np.float64)
    rng = np.random.default_rng(seed)
    for t in out.tensors().values():
        t.data = t.data + rng.normal(0, scale, t.shape)
    return out
