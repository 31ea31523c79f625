import pytest

from novocap.features import CategoryRecord
from novocap.model import ModelConfig, init_model
from novocap.numerics import SeededRng
from novocap.vocab import build_vocabulary


def tiny_categories(d_v=4, seed=11):
    rng = SeededRng(seed)
    return [
        CategoryRecord("zebra", "zebra", "zebras", rng.normal(d_v), 3, "known"),
        CategoryRecord("hot dog", "hot dog", "hot dogs", rng.normal(d_v), 3, "known"),
    ]


def tiny_model(seed=0, d_v=4, d1=5, hidden=6, jitter=0.0):
    """V=9 model: 3 specials, 2 words, 2 categories (singular + plural)."""
    cats = tiny_categories(d_v=d_v)
    vocab = build_vocabulary(["red box", "red box red"], cats, min_count=1)
    model = init_model(vocab, cats, ModelConfig(d_v=d_v, d1=d1, d2=hidden), seed=seed)
    if jitter:
        rng = SeededRng(seed + 500)
        from novocap.model import trainable_blocks

        for arr in trainable_blocks(model).values():
            arr += jitter * rng.normal(arr.shape)
    return model


@pytest.fixture
def model9():
    return tiny_model(seed=3, jitter=0.5)
