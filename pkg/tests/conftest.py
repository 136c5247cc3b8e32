import numpy as np
import pytest
import torch

from bigen import data, toyworld, viscodec
from bigen.model import ModelConfig, UnifiedModel

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def tiny_dataset():
    return toyworld.generate_dataset(3, {"train": 24, "val": 8})


@pytest.fixture(scope="session")
def tiny_vocab(tiny_dataset):
    feats = np.concatenate([viscodec.extract_grid_features(e.image).features
                            for e in tiny_dataset.split("train")], axis=0)
    return viscodec.build_vocabulary(feats, k=16, seed=0)


@pytest.fixture(scope="session")
def tiny_split(tiny_dataset, tiny_vocab):
    return data.split_tensors(tiny_dataset.split("train"), tiny_dataset.vocab, tiny_vocab)


@pytest.fixture()
def tiny_model(tiny_dataset, tiny_vocab):
    torch.manual_seed(0)
    cfg = ModelConfig(text_vocab=len(tiny_dataset.vocab), image_vocab=tiny_vocab.size,
                      d_model=32, layers=2, heads=2, ff=64)
    return UnifiedModel(cfg).double()
