import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def small_targets():
    from splatcodec.scene import SynthSpec, synth_targets
    return synth_targets(SynthSpec(n=400, seed=2))


@pytest.fixture(scope="session")
def trained_models(small_targets):
    """One briefly trained model per variant."""
    from splatcodec.model import VARIANTS, SceneModel
    from splatcodec.trainer import TrainConfig, train
    out = {}
    for v in VARIANTS:
        m = SceneModel.from_targets(small_targets, v, seed=1)
        train(m, small_targets, TrainConfig(iters=15, variant=v))
        out[v] = m
    return out


def rel_err(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(np.max(np.abs(a - b) / np.maximum(1e-12, np.abs(a) + np.abs(b))))
