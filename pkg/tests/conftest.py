import numpy as np
import pytest

from tlab.blocks import ModelConfig
from tlab.trainer import SyntheticTask


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config():
    return ModelConfig(variant="postln", n_enc=2, n_dec=2, d_model=8, n_heads=2, d_ff=16,
                       src_vocab=10, tgt_vocab=10, max_len=16, dropout=0.0)


@pytest.fixture
def tiny_batch():
    return SyntheticTask(vocab=10, min_len=5, max_len=5, batch_size=3, seed=3).batch(1)
