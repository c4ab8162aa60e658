import numpy as np
import pytest

from stablekoopman.data import fixed_point_system, lhs_sample, make_diff_dataset
from stablekoopman.training import train_map

FIXED_POINT_LAYERS = "2-8-16-16-8-2-8-16-16-8-2"


@pytest.fixture(scope="session")
def fixed_point_map():
    """Differential-form MAP model of the planar attractor, shared by the
    slow tests: 1600 LHS states on [-0.5, 0.5]^2."""
    X = lhs_sample([(-0.5, 0.5), (-0.5, 0.5)], 1600, 0)
    ds = make_diff_dataset(fixed_point_system(), X)
    model, history = train_map({"layers": FIXED_POINT_LAYERS, "epochs": 1000, "learning_rate": 1e-3,
                                "batch_size": 128}, ds)
    assert np.all(np.isfinite(history))
    return model
