import numpy as np
import pytest

from vivo.batching import Region
from vivo.config import BatchConfig
from vivo.encoder import EncoderConfig, init_params
from vivo.tokenizer import Vocabulary

TOY_WORDS = ["dog", "cat", "accord", "##ion", "a", "photo", "of", "and", "bird", "tree", "car", "cup",
             "lamp", "kite", "drum", "boat", "d", "o", "g", "##o", "##g"]


@pytest.fixture
def vocab():
    return Vocabulary.from_words(TOY_WORDS)


@pytest.fixture
def small_cfg():
    return BatchConfig(d_app=4)


def random_regions(rng, k, d_app=4):
    out = []
    for _ in range(k):
        x1, y1 = rng.uniform(0, 0.5, size=2)
        x2, y2 = x1 + rng.uniform(0.1, 0.5), y1 + rng.uniform(0.1, 0.5)
        out.append(Region(tuple(rng.normal(size=d_app)), (x1, y1, x2, y2, x2 - x1, y2 - y1)))
    return out


@pytest.fixture
def regions():
    return random_regions(np.random.default_rng(7), 3)


def tiny_params(vocab, seed=0, hidden=8, layers=2, heads=2, tie=False, d_region=10, std=0.3):
    cfg = EncoderConfig(layers=layers, hidden=hidden, heads=heads, ff_dim=2 * hidden, vocab_size=vocab.size,
                        max_positions=48, d_region=d_region, tie_head=tie)
    return init_params(cfg, seed, std=std)
