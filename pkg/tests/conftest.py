import numpy as np
import pytest

from lutgen.synthetic import synthetic_images, synthetic_luts
from lutgen.tokenizer import TokenizerConfig, train_tokenizer

# a tokenizer small enough to train in a couple of seconds; used wherever a
# test needs a working checkpoint but not reconstruction quality
TINY_TOKENIZER = TokenizerConfig(
    widths=(4, 8, 8),
    latent_dim=8,
    codebook_size=16,
    batch_size=4,
    epochs=2,
    lr=2e-3,
    ema_decay=0.9,
    dead_steps=5,
)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_luts():
    return synthetic_luts(8, seed=11)


@pytest.fixture(scope="session")
def small_images():
    return synthetic_images(6, seed=12, height=24, width=24)


@pytest.fixture(scope="session")
def tiny_training(small_luts):
    return train_tokenizer(small_luts, TINY_TOKENIZER)


@pytest.fixture(scope="session")
def tiny_tokenizer(tiny_training):
    return tiny_training[0]
