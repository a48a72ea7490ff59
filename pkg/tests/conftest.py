import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("ci", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("ci")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def synthetic_teacher():
    """teacher(3,16) trained 10 epochs on the 4-class synthetic set; shared by slow tests."""
    from factortransfer.data import synth_dataset
    from factortransfer.training import TrainConfig, train_teacher

    data = (synth_dataset(100, 4, 16, seed=21), synth_dataset(50, 4, 16, seed=22, split="test"))
    ckpt, metrics = train_teacher(data, (3, 16), TrainConfig(epochs=10, batch_size=32, lr=0.05, augment_pad=2,
                                                             seed=7))
    return ckpt, metrics, data
