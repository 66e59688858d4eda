import numpy as np
import pytest

from dmlrob.rng import Rng


@pytest.fixture
def rng():
    return Rng(1234)


def random_model(rng, sizes=(5, 16, 4), normalize=True):
    from dmlrob.model import init_model

    return init_model(list(sizes), normalize, rng)


def random_batch(rng, n=6, dim=5, n_classes=3):
    x = rng.uniform(0.05, 0.95, size=(n, dim))
    labels = np.arange(n) % n_classes
    return x, labels
