import numpy as np
import pytest

from revlm.blocks import ModelConfig
from revlm.model import init_model
from revlm.numerics import Rng
from revlm.step import steps


def small_config(block_kind='midpoint', **kwargs):
    options = dict(vocab_size=11, context_length=8, width=8, heads=2, layers=4,
                   block_kind=block_kind, dtype='float64', init_std=0.2)
    options.update(kwargs)
    return ModelConfig(**options)


def small_model(block_kind='midpoint', seed=0, **kwargs):
    return init_model(small_config(block_kind, **kwargs), seed)


def token_batch(config, batch_size=2, length=None, seed=0):
    length = length or config.context_length
    ids = Rng(seed, (99,)).integers(0, config.vocab_size, (batch_size, length + 1))
    return ids[:, :-1], ids[:, 1:]


@pytest.fixture
def make_config():
    return small_config


@pytest.fixture
def make_model():
    return small_model


@pytest.fixture
def make_batch():
    return token_batch


@pytest.fixture
def rng():
    return Rng(1234)


@pytest.fixture
def midpoint_model():
    return small_model('midpoint')


@pytest.fixture
def baseline_model():
    return small_model('baseline')


@pytest.fixture(params=['midpoint', 'midpoint_a', 'leapfrog', 'hamiltonian', 'retrofit'])
def reversible_model(request):
    return small_model(request.param)


@pytest.fixture
def corpus_file(tmpdir):
    p = tmpdir.join("corpus.txt")
    text = "the quick brown fox jumps over the lazy dog. " * 40
    p.write(text)
    return p


@pytest.fixture(autouse=True)
def no_leftover_steps():
    yield
    assert steps.get_current() is None


@pytest.fixture
def random_state():
    return np.random.default_rng(7)


MARKOV_LETTERS = "abcdefghijklmnop"


def markov_text(length, seed=0, p_major=0.5):
    """Characters from a chain where each letter has two successors.

    The major successor follows with probability ``p_major``, which bounds the
    achievable next-character loss from below.
    """
    n = len(MARKOV_LETTERS)
    draws = Rng(seed, (11,)).uniform(0.0, 1.0, length)
    state = 0
    chars = []
    for u in draws:
        chars.append(MARKOV_LETTERS[state])
        state = (state + 1) % n if u < p_major else (5 * state + 3) % n
    return ''.join(chars)


@pytest.fixture
def make_markov_text():
    return markov_text
