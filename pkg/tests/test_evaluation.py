import numpy as np
import pytest

from loopmdm.evaluation import (
    Model,
    adaptive_sweep,
    clique_accuracy,
    evaluate_loops,
    heldout_nelbo,
    sudoku_solve_rate,
    task_metrics,
)
from loopmdm.model import LoopConfig, ModelConfig, init_params
from loopmdm.sampler import AdaptiveLoopPolicy, SamplerConfig
from loopmdm.tasks import TaskConfig, build_datasets, task_vocab_size
from loopmdm.tasks.corpus import CorpusConfig

LOOP = LoopConfig(n_layers_total=3, loop_start=1, n_m=1, s_max=3)


def _model(seq_len, randomize=None):
    cfg = ModelConfig(vocab_size=4, seq_len=seq_len, d_model=8, n_heads=2, mlp_ratio=2, time_freq_dim=8)
    params = init_params(cfg, LOOP, np.random.default_rng(0))
    if randomize is not None:
        randomize(params, np.random.default_rng(1))
    return Model(params, cfg, LOOP)


@pytest.fixture
def sudoku_setup(randomize):
    task = TaskConfig(name="sudoku", n_train=2, n_eval=6)
    _, evals = build_datasets(task, seed=0)
    return _model(16, randomize), task, evals


@pytest.fixture
def clique_setup(randomize):
    task = TaskConfig(name="clique", clique_n=4, clique_k=3, n_train=2, n_eval=8)
    _, evals = build_datasets(task, seed=0)
    return _model(81, randomize), task, evals


def test_heldout_nelbo_is_seeded(sudoku_setup, monkeypatch):
    model, _, evals = sudoku_setup
    a = heldout_nelbo(model, evals, loops=2, seed=3)
    assert np.isfinite(a) and a > 0
    assert heldout_nelbo(model, evals, loops=2, seed=3) == a
    monkeypatch.setenv("RUN_THREADS", "3")
    assert heldout_nelbo(model, evals, loops=2, seed=3) == a


def test_sudoku_solve_rate(sudoku_setup):
    model, task, evals = sudoku_setup
    metrics = sudoku_solve_rate(model, task, evals, loops=2, seed=0)
    assert set(metrics) == {"solve_rate", "chance", "mean_loops"}
    assert 0.0 <= metrics["solve_rate"] <= 1.0
    assert 0.0 < metrics["chance"] < 1.0
    assert metrics["mean_loops"] == 2.0
    assert sudoku_solve_rate(model, task, evals, loops=2, seed=0) == metrics


def test_clique_accuracy_fixed_and_adaptive(clique_setup):
    model, _, evals = clique_setup
    fixed = clique_accuracy(model, evals, loops=2)
    assert 0.0 <= fixed["accuracy"] <= 1.0
    assert fixed["mean_loops"] == 2.0
    full = clique_accuracy(model, evals, AdaptiveLoopPolicy(0.0, 3))
    assert full["mean_loops"] == 3.0
    early = clique_accuracy(model, evals, AdaptiveLoopPolicy(float("inf"), 3))
    assert early["mean_loops"] == 1.0


def test_evaluate_loops_rows(sudoku_setup):
    model, task, evals = sudoku_setup
    sampler = SamplerConfig(policy="fixed_left_to_right", n_steps=16)
    rows = evaluate_loops(model, task, evals, [1, 3], sampler)
    assert [r["loops"] for r in rows] == [1, 3]
    assert all({"nelbo", "solve_rate", "chance", "mean_loops"} <= set(r) for r in rows)
    bare = evaluate_loops(model, task, evals, [2], sampler, with_nelbo=False)
    assert "nelbo" not in bare[0]


def test_adaptive_sweep_rows(clique_setup):
    model, task, evals = clique_setup
    rows = adaptive_sweep(model, task, evals, [float("inf"), 0.0], 3, SamplerConfig())
    assert [r["epsilon"] for r in rows] == [float("inf"), 0.0]
    assert [r["budget"] for r in rows] == [3, 3]
    assert [r["mean_loops"] for r in rows] == [1.0, 3.0]


def test_lm_metrics_need_a_scorer():
    task = TaskConfig(name="lm", n_train=4, n_eval=4, corpus=CorpusConfig(seq_len=8))
    _, evals = build_datasets(task, seed=0)
    cfg = ModelConfig(vocab_size=task_vocab_size(task), seq_len=8, d_model=8, n_heads=2, mlp_ratio=2,
                      time_freq_dim=8)
    assert task_metrics(Model(None, cfg, LOOP), task, evals, 1, SamplerConfig()) == {}
