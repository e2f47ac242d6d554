import json

import pytest

from loopmdm.config import load_config
from loopmdm.evaluation import Model
from loopmdm.runs import load_weights, train_run
from loopmdm.tasks import build_datasets


class TrainedRun:
    """A preset trained once, with its held-out split and EMA weights."""

    def __init__(self, cfg, summary):
        self.cfg = cfg
        self.summary = summary
        state = load_weights(summary.checkpoint, "ema")
        self.model = Model(state.params, state.model_cfg, state.loop_cfg)
        _, self.evals = build_datasets(cfg.task, cfg.seed)


@pytest.fixture(scope="module")
def train_preset(tmp_path_factory):
    """Train `preset` with flat overrides layered on top, as `train --config` would."""
    def run(preset, overrides=None):
        run_dir = tmp_path_factory.mktemp(preset)
        path = run_dir / "overrides.json"
        path.write_text(json.dumps(overrides or {}), encoding="utf-8")
        cfg = load_config(str(path), preset=preset)
        return TrainedRun(cfg, train_run(cfg, run_dir=run_dir, progress=False))

    return run
