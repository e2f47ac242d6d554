from fractions import Fraction

import numpy as np
import pytest

from loopmdm.flops import (
    FlopsReport,
    layer_parameter_count,
    matched_steps,
    per_step_flops,
    total_parameter_count,
    with_matched_steps,
)
from loopmdm.model import LoopConfig, ModelConfig, init_params

MODEL = ModelConfig(vocab_size=16, seq_len=32, d_model=32, n_heads=4, time_freq_dim=16)


@pytest.mark.parametrize("s_max", [1, 4, 8, 12])
@pytest.mark.parametrize("n_m", [1, 2, 3])
def test_loop_term_is_exact(s_max, n_m):
    cfg = LoopConfig(n_layers_total=n_m + 2, loop_start=1, n_m=n_m, s_max=s_max)
    report = per_step_flops(cfg, MODEL, seq_len=32, batch_size=8)
    assert report.expected_loops == Fraction(s_max + 1, 2)
    assert report.f_loop - report.f_base == (report.expected_loops - 1) * n_m * report.f_layer
    assert report.loop_overhead == report.f_loop - report.f_base


def test_six_nd_convention():
    cfg = LoopConfig(n_layers_total=2, loop_start=0, n_m=1, s_max=1)
    report = per_step_flops(cfg, MODEL, seq_len=32, batch_size=4)
    tokens = 32 * 4
    assert report.tokens_per_step == tokens
    assert report.f_layer == 6 * layer_parameter_count(MODEL) * tokens
    assert report.f_base == 6 * total_parameter_count(MODEL, cfg) * tokens
    assert report.f_loop == report.f_base


def test_layer_count_matches_initialized_layer():
    cfg = LoopConfig(n_layers_total=1, loop_start=0, n_m=1)
    params = init_params(MODEL, cfg, np.random.default_rng(0))
    per_layer = sum(p.size for name, p in params.named_parameters() if name.startswith("layers.0."))
    assert per_layer == layer_parameter_count(MODEL)


def test_embeddings_can_be_excluded():
    cfg = LoopConfig(n_layers_total=3, loop_start=1, n_m=1)
    report = per_step_flops(cfg, MODEL, seq_len=32, batch_size=1, include_embeddings=False)
    assert report.n_total == 3 * report.n_layer
    assert not report.include_embeddings


def test_matched_steps_identical_configs():
    cfg = LoopConfig(n_layers_total=2, loop_start=0, n_m=1, s_max=6)
    report = per_step_flops(cfg, MODEL, seq_len=32, batch_size=8)
    assert matched_steps(report, 1000, report.f_loop) == 1000


def test_matched_steps_shrinks_looped_budget():
    base = per_step_flops(LoopConfig(n_layers_total=2, n_m=1, loop_sampler="fixed"), MODEL, 32, 8)
    looped = per_step_flops(LoopConfig(n_layers_total=2, n_m=1, s_max=6), MODEL, 32, 8)
    steps = matched_steps(looped, 3000, base.f_loop)
    assert steps < 3000
    assert steps * looped.f_loop <= 3000 * base.f_loop < (steps + 1) * looped.f_loop
    # default baseline cost is the report's own f_base
    assert matched_steps(looped, 3000) == steps


def test_realized_step_flops():
    cfg = LoopConfig(n_layers_total=3, loop_start=1, n_m=1, s_max=4)
    report = per_step_flops(cfg, MODEL, 32, 2)
    assert report.realized_step_flops(1) == report.f_base
    assert report.realized_step_flops(3) == report.f_base + 2 * report.f_layer


def test_report_dict_keeps_fractions_exact():
    report = with_matched_steps(per_step_flops(LoopConfig(s_max=4), MODEL, 32, 3), 100)
    d = report.to_dict()
    assert d["expected_loops"] == "5/2"
    assert FlopsReport.from_dict(d) == report
