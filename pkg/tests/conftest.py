import os
import sys
from pathlib import Path

import numpy as np
import pytest

# Ensure repo root is on sys.path so tests can import the package directly
root = Path(__file__).resolve().parent.parent
if str(root) not in sys.path:
    sys.path.insert(0, str(root))

from loopmdm.model import LoopConfig, ModelConfig, init_params  # noqa: E402


def pytest_configure(config):
    """Pin RUN_THREADS so results never depend on the caller's shell.

    Tests that exercise the pool set it again through monkeypatch.
    """
    os.environ["RUN_THREADS"] = "1"


def _randomize(params, rng, std=0.3):
    # replaces every weight, adaLN included, with non-trivial values
    for _, p in params.named_parameters():
        p.data = rng.normal(0.0, std, size=p.shape).astype(p.data.dtype)
    return params


@pytest.fixture
def tiny_model_cfg():
    return ModelConfig(vocab_size=4, seq_len=6, d_model=8, n_heads=2, mlp_ratio=2, time_freq_dim=8)


@pytest.fixture
def tiny_loop_cfg():
    return LoopConfig(n_layers_total=3, loop_start=1, n_m=1, s_max=3)


@pytest.fixture
def tiny_params(tiny_model_cfg, tiny_loop_cfg):
    return init_params(tiny_model_cfg, tiny_loop_cfg, np.random.default_rng(0))


@pytest.fixture
def randomize():
    return _randomize


@pytest.fixture
def live_params(tiny_params):
    return _randomize(tiny_params, np.random.default_rng(1))
