import numpy as np
import pytest
import torch

from remotenet.config import default_config


@pytest.fixture(scope="session")
def tiny_cfg():
    return default_config("tiny")


@pytest.fixture()
def rng():
    return np.random.default_rng(0)


@pytest.fixture()
def torch_gen():
    return torch.Generator().manual_seed(0)
