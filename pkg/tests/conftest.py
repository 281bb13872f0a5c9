import numpy as np
import pytest

from tokenprune import ModelConfig, TokenSequence, init_model


@pytest.fixture(scope="session")
def small_config():
    return ModelConfig(num_layers=4, hidden_dim=64, num_heads=4, ffn_dim=128)


@pytest.fixture(scope="session")
def small_weights(small_config):
    return init_model(small_config, seed=7)


def random_sequence(rng, grid_h, grid_w, n_text, dim):
    return TokenSequence(grid_h, grid_w, rng.standard_normal((grid_h * grid_w, dim)),
                         rng.standard_normal((n_text, dim)))


@pytest.fixture
def small_sequence():
    return random_sequence(np.random.default_rng(3), 6, 6, 4, 64)
