import numpy as np
import pytest

from config import PipelineConfig
from models import FeatureStream, GlanceSet


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run the synthetic acceptance experiments")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_cfg():
    return PipelineConfig(hidden_dim=6, memory_slots=3, local_window=3, topk_ratio=0.25, rng_seed=3)


@pytest.fixture
def toy_pair(rng):
    """One abnormal stream with a bright block around its glance, one normal stream."""
    abnormal = rng.normal(size=(12, 4))
    abnormal[5:8] += 3.0
    normal = rng.normal(size=(10, 4))
    return (
        FeatureStream(video_id="a0", features=abnormal, anomaly_class="Explosion"),
        FeatureStream(video_id="n0", features=normal),
        GlanceSet(video_id="a0", anomaly_class="Explosion", glances=(6,)),
    )
