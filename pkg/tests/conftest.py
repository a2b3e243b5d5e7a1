"""Shared test configuration.

Torch is pinned to one thread: the suite runs many tiny models where thread
startup costs more than it saves, and single-threaded kernels keep
floating-point reductions deterministic across machines.
"""

import numpy as np
import pytest
import torch

torch.set_num_threads(1)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


def unit_rows(rng: np.random.Generator, n: int, d: int) -> torch.Tensor:
    """Random float64 matrix with unit-norm rows."""
    x = rng.standard_normal((n, d))
    x /= np.linalg.norm(x, axis=1, keepdims=True)
    return torch.from_numpy(x)
