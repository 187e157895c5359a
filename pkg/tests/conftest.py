import pytest
import torch

from filterprune.data_pipeline import load_dataset


@pytest.fixture(scope="session")
def blobs16():
    return load_dataset({"source": "synthetic", "classes": 4, "n": 512, "val_n": 256,
                         "seed": 7, "size": 16})


@pytest.fixture(autouse=True)
def _threads():
    torch.set_num_threads(1)
    yield
