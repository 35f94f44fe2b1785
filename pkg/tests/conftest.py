from collections.abc import Iterator

import numpy as np
import pytest

from turnformer.blocks import ModelDims
from turnformer.dataset import Batch, ConversationStreams
from turnformer.modality import Modality
from turnformer.tensor import precision

TINY_DIMS = ModelDims(d_model=8, n_heads=2, d_ff=16, n_layers=1, dropout=0.0)
TINY_RAW_DIMS = {Modality.TEXT: 3, Modality.AUDIO: 2, Modality.VIDEO: 4}


@pytest.fixture()
def float64() -> Iterator[None]:
    with precision('float64'):
        yield


@pytest.fixture()
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


def make_batch(
    rng: np.random.Generator,
    batch_size: int = 3,
    length: int = 4,
    raw_dims: 'dict[Modality, int] | None' = None,
    n_classes: int = 4,
) -> Batch:
    raw_dims = raw_dims or TINY_RAW_DIMS
    return Batch(
        features={
            m: rng.standard_normal((batch_size, length, d)) for m, d in raw_dims.items()
        },
        prior=rng.integers(0, n_classes, size=batch_size),
        target=rng.integers(0, n_classes, size=batch_size),
    )


@pytest.fixture()
def batch(rng: np.random.Generator) -> Batch:
    return make_batch(rng)


def make_conversation(
    conv_id: str = 'c0',
    duration_s: int = 20,
    windows_per_second: int = 4,
    labels: 'np.ndarray | None' = None,
    seed: int = 0,
) -> ConversationStreams:
    gen = np.random.default_rng(seed)
    num_windows = duration_s * windows_per_second
    if labels is None:
        labels = np.repeat(gen.integers(0, 4, size=duration_s), windows_per_second)
    return ConversationStreams(
        id=conv_id,
        features={
            m: gen.standard_normal((num_windows, d)).astype(np.float32)
            for m, d in TINY_RAW_DIMS.items()
        },
        labels=np.asarray(labels, dtype=np.int64),
        windows_per_second=windows_per_second,
    )
