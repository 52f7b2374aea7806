import numpy as np
import pytest

from smap import autodiff as ad


@pytest.fixture
def f64():
    """Run a test at verification precision with forward NaN/Inf checks on."""
    with ad.precision(np.float64):
        ad.set_debug_checks(True)
        yield
        ad.set_debug_checks(False)


@pytest.fixture
def tiny_cfg():
    """A config small enough for smoke training in seconds."""
    from smap.config import ExperimentConfig

    cfg = ExperimentConfig()
    cfg.ppo.total_timesteps = 2048
    cfg.ppo.rollout_len = 64
    cfg.ppo.n_envs = 4
    cfg.ppo.minibatch_size = 128
    cfg.ppo.eval_every = 4
    cfg.n_train_levels = 4
    cfg.n_test_levels = 4
    return cfg
