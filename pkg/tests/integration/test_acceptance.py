"""End-to-end runs on the scaled presets.

Each module trains for several CPU minutes; run with `pytest -m slow`.
"""
import numpy as np
import pytest

from loopmdm.evaluation import adaptive_sweep, clique_accuracy, heldout_nelbo, sudoku_solve_rate
from loopmdm.fs import read_jsonl
from loopmdm.runs import METRICS_FILE
from loopmdm.sampler import AdaptiveLoopPolicy, SamplerConfig

pytestmark = pytest.mark.slow

EPSILONS = [0.0, 0.05, 0.1, 0.15, 0.2]
WINDOW = 100


@pytest.fixture(scope="module")
def sudoku(train_preset):
    return train_preset("sudoku4")


@pytest.fixture(scope="module")
def clique(train_preset):
    return train_preset("clique5", {"task.supervise_workspace": True})


@pytest.fixture(scope="module")
def grammar(train_preset):
    return train_preset("lm_grammar")


@pytest.mark.parametrize("run", ["sudoku", "clique", "grammar"])
def test_training_loss_drops(run, request):
    trained = request.getfixturevalue(run)
    losses = np.array([m["loss"] for m in read_jsonl(trained.summary.run_dir / METRICS_FILE)])
    assert len(losses) >= 2 * WINDOW
    smoothed = np.convolve(losses, np.ones(WINDOW) / WINDOW, mode="valid")
    assert smoothed[-1] <= 0.8 * smoothed[0]


def test_sudoku_solve_rate_grows_with_loops(sudoku):
    rates = {
        S: sudoku_solve_rate(sudoku.model, sudoku.cfg.task, sudoku.evals, S, seed=0)["solve_rate"]
        for S in (1, 2, 3, 6)
    }
    assert rates[6] - rates[1] >= 0.15
    ordered = [rates[S] for S in (1, 2, 3, 6)]
    assert all(b >= a - 0.02 for a, b in zip(ordered, ordered[1:]))


def test_adaptive_loops_on_sudoku(sudoku):
    sampler = SamplerConfig(policy="fixed_left_to_right", n_steps=sudoku.evals.seq_len)
    rows = adaptive_sweep(sudoku.model, sudoku.cfg.task, sudoku.evals, EPSILONS, 6, sampler)
    loops = [row["mean_loops"] for row in rows]
    assert loops[0] == 6.0
    assert all(b <= a for a, b in zip(loops, loops[1:]))

    at = {row["epsilon"]: row for row in rows}
    fixed = sudoku_solve_rate(sudoku.model, sudoku.cfg.task, sudoku.evals, 6, seed=0)
    assert at[0.1]["mean_loops"] < 6.0
    assert abs(at[0.1]["solve_rate"] - fixed["solve_rate"]) <= 0.03

    never = sudoku_solve_rate(sudoku.model, sudoku.cfg.task, sudoku.evals, AdaptiveLoopPolicy(float("inf"), 6), seed=0)
    assert never["mean_loops"] == 1.0


def test_clique_workspace_beats_padding_free(clique, train_preset):
    padding_free = train_preset("clique5", {"task.workspace": False})
    assert clique.model.params.num_parameters() == padding_free.model.params.num_parameters()

    budget = clique.cfg.loop.s_max
    acc_ws = clique_accuracy(clique.model, clique.evals, budget)["accuracy"]
    acc_pf = clique_accuracy(padding_free.model, padding_free.evals, budget)["accuracy"]
    assert (acc_ws >= 0.95 and acc_pf <= 0.75) or acc_ws - acc_pf >= 0.15


def test_grammar_lm_gains_from_depth(grammar):
    s_max = grammar.cfg.loop.s_max
    deep = heldout_nelbo(grammar.model, grammar.evals, s_max, seed=0)
    shallow = heldout_nelbo(grammar.model, grammar.evals, 1, seed=0)
    assert deep <= shallow
