"""Pytest configuration for meanode tests.

Networks here are tiny (D=4, a handful of layers and units) so that finite
difference checks and full training runs take milliseconds.
"""

from collections.abc import Callable
from typing import Any

import numpy as np
import pytest

from meanode.blocks import Block, make_block
from meanode.config import TrainConfig
from meanode.resnet import Dataset, make_dataset

FD_EPS = 1e-6


def central_difference(
    f: Callable[[np.ndarray], float], x: np.ndarray, eps: float = FD_EPS
) -> np.ndarray:
    """Numerical gradient of a scalar function by central differences."""
    grad = np.zeros_like(x)
    for index in np.ndindex(x.shape):
        step = np.zeros_like(x)
        step[index] = eps
        grad[index] = (f(x + step) - f(x - step)) / (2 * eps)
    return grad


def tiny_config(**changes: Any) -> TrainConfig:
    data: dict[str, Any] = {
        "D": 4,
        "L": 3,
        "M": 2,
        "alpha": 1.0,
        "K": 3,
        "n": 3,
        "eta": 0.5,
        "sigma_u": 1.0,
        "sigma_v": 1.0,
        "seed": 7,
        "data_seed": 11,
    }
    data.update(changes)
    return TrainConfig.model_validate(data)


# (block, activation, tokens, d_k) of every kind with analytic gradients
BLOCK_CASES = [
    ("mlp", "tanh", 1, 2),
    ("mlp", "relu", 1, 2),
    ("matrix_pre", "tanh", 1, 2),
    ("matrix_post", "tanh", 1, 2),
    ("attention", "tanh", 2, 2),
]
TANGENT_CASES = [case for case in BLOCK_CASES if case[0] != "attention"]


@pytest.fixture
def config() -> TrainConfig:
    """A small mlp/tanh configuration."""
    return tiny_config()


@pytest.fixture
def dataset(config: TrainConfig) -> Dataset:
    return make_dataset(config)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def mlp() -> Block:
    return make_block("mlp", "tanh")
