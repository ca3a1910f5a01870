import numpy as np
import pytest

from voxattr.models import SyntheticModel, SyntheticModelSpec, random_volume
from voxattr.rng import RngSpec
from voxattr.volume import argmax_masks


@pytest.fixture(scope="session")
def smooth_model():
    return SyntheticModel(SyntheticModelSpec(dims=(5, 5, 5), num_classes=3, seed=7))


@pytest.fixture(scope="session")
def linear_model():
    return SyntheticModel(SyntheticModelSpec(dims=(5, 5, 5), num_classes=3, seed=7,
                                             nonlinearity="identity"))


@pytest.fixture(scope="session")
def volume_555():
    return random_volume((5, 5, 5), RngSpec(42))


@pytest.fixture(scope="session")
def predicted(smooth_model, volume_555):
    logits = smooth_model.forward(volume_555)
    return logits, argmax_masks(logits)


def nonempty_class(masks):
    for c, mask in enumerate(masks):
        if not mask.is_empty():
            return c, mask
    raise AssertionError("no predicted class in fixture")


@pytest.fixture(scope="session")
def rng0():
    return RngSpec(0)


@pytest.fixture(autouse=True)
def _no_global_numpy_seed_leak():
    state = np.random.get_state()
    yield
    np.random.set_state(state)
