from fractions import Fraction

import numpy as np
import pytest

from loopmdm.errors import ConfigError, DomainError
from loopmdm.flops import total_parameter_count
from loopmdm.model import (
    LoopConfig,
    ModelConfig,
    ModelParams,
    RetentionFlags,
    effective_depth,
    expected_loop_count,
    forward,
    init_params,
    plain_forward,
    sample_loop_count,
)


def _tokens(cfg, rng, batch=2):
    x = rng.integers(0, cfg.vocab_size, size=(batch, cfg.seq_len))
    x[:, ::2] = cfg.mask_id
    return x


def test_forward_shapes(tiny_model_cfg, tiny_loop_cfg, live_params):
    x = _tokens(tiny_model_cfg, np.random.default_rng(0), batch=3)
    record = forward(live_params, tiny_model_cfg, tiny_loop_cfg, x, np.array([0.2, 0.5, 1.0]), 2)
    assert record.logits.shape == (3, tiny_model_cfg.seq_len, tiny_model_cfg.vocab_size)
    assert record.loops == 2
    single = forward(live_params, tiny_model_cfg, tiny_loop_cfg, x[0], 0.5, 2)
    assert single.logits.shape == (1, tiny_model_cfg.seq_len, tiny_model_cfg.vocab_size)


def test_forward_input_checks(tiny_model_cfg, tiny_loop_cfg, live_params):
    x = np.zeros(tiny_model_cfg.seq_len, dtype=np.int64)
    with pytest.raises(ConfigError):
        forward(live_params, tiny_model_cfg, tiny_loop_cfg, x, 0.5, 0)
    with pytest.raises(DomainError):
        forward(live_params, tiny_model_cfg, tiny_loop_cfg, x + tiny_model_cfg.mask_id + 1, 0.5, 1)
    with pytest.raises(DomainError):
        forward(live_params, tiny_model_cfg, tiny_loop_cfg, x, 1.5, 1)


def test_zero_init_gates_make_depth_irrelevant(tiny_model_cfg, tiny_loop_cfg, tiny_params):
    x = _tokens(tiny_model_cfg, np.random.default_rng(1))
    one = forward(tiny_params, tiny_model_cfg, tiny_loop_cfg, x, 0.5, 1).logits.data
    many = forward(tiny_params, tiny_model_cfg, tiny_loop_cfg, x, 0.5, 3).logits.data
    assert np.array_equal(one, many)


def test_loop_count_changes_output(tiny_model_cfg, tiny_loop_cfg, live_params):
    x = _tokens(tiny_model_cfg, np.random.default_rng(2))
    one = forward(live_params, tiny_model_cfg, tiny_loop_cfg, x, 0.5, 1).logits.data
    two = forward(live_params, tiny_model_cfg, tiny_loop_cfg, x, 0.5, 2).logits.data
    assert not np.allclose(one, two)


def test_single_loop_equals_plain_stack(tiny_model_cfg, tiny_loop_cfg, live_params):
    x = _tokens(tiny_model_cfg, np.random.default_rng(3))
    looped = forward(live_params, tiny_model_cfg, tiny_loop_cfg, x, 0.3, 1).logits.data
    plain = plain_forward(live_params, tiny_model_cfg, x, 0.3).logits.data
    assert np.array_equal(looped, plain)


def test_loops_equal_unrolled_stack_with_copied_layers(tiny_model_cfg, tiny_loop_cfg, live_params):
    # head=[0], mid=[1] x3, tail=[2]  ==  plain stack [0, 1, 1, 1, 2]
    arrays = live_params.arrays()
    order = [0, 1, 1, 1, 2]
    unrolled = {k: v for k, v in arrays.items() if not k.startswith("layers.")}
    for new, old in enumerate(order):
        prefix = f"layers.{old}."
        unrolled.update({f"layers.{new}.{k[len(prefix):]}": v for k, v in arrays.items() if k.startswith(prefix)})
    stacked = ModelParams.from_arrays(unrolled, len(order), requires_grad=False)

    x = _tokens(tiny_model_cfg, np.random.default_rng(4))
    looped = forward(live_params, tiny_model_cfg, tiny_loop_cfg, x, 0.7, 3).logits.data
    plain = plain_forward(stacked, tiny_model_cfg, x, 0.7).logits.data
    assert np.allclose(looped, plain, atol=1e-12)


def test_retention_of_hidden_states_and_attention(tiny_model_cfg, tiny_loop_cfg, live_params):
    x = _tokens(tiny_model_cfg, np.random.default_rng(5))
    record = forward(live_params, tiny_model_cfg, tiny_loop_cfg, x, 0.5, 3,
                     retain=RetentionFlags(hidden=True, attention=True))
    assert len(record.hidden) == 4
    assert set(record.attention) == {(0, 0), (1, 1), (1, 2), (1, 3), (2, 0)}
    att = record.attention[(1, 2)]
    assert att.shape == (2, tiny_model_cfg.n_heads, tiny_model_cfg.seq_len, tiny_model_cfg.seq_len)
    assert np.allclose(att.sum(axis=-1), 1.0)


def test_every_loop_reads_the_shared_block(tiny_model_cfg, tiny_loop_cfg, live_params):
    x = _tokens(tiny_model_cfg, np.random.default_rng(9))
    keep = RetentionFlags(hidden=True)
    before = forward(live_params, tiny_model_cfg, tiny_loop_cfg, x, 0.5, 3, retain=keep).hidden
    mid = live_params.layers[tiny_loop_cfg.loop_start]
    mid.w1.data = mid.w1.data + 1e-3 * np.random.default_rng(10).normal(size=mid.w1.shape)
    after = forward(live_params, tiny_model_cfg, tiny_loop_cfg, x, 0.5, 3, retain=keep).hidden
    assert np.array_equal(before[0], after[0])
    for k in (1, 2, 3):
        assert not np.allclose(before[k], after[k], rtol=0.0, atol=1e-9)


def test_inference_beyond_training_loop_count(tiny_model_cfg, live_params):
    loop_cfg = LoopConfig(n_layers_total=3, loop_start=1, n_m=1, s_max=12)
    x = _tokens(tiny_model_cfg, np.random.default_rng(6))
    record = forward(live_params, tiny_model_cfg, loop_cfg, x, 0.5, 24)
    assert np.all(np.isfinite(record.logits.data))


def test_parameter_count_ignores_s_max(tiny_model_cfg):
    counts = set()
    for s_max in (1, 6, 12):
        cfg = LoopConfig(n_layers_total=3, loop_start=1, n_m=1, s_max=s_max)
        params = init_params(tiny_model_cfg, cfg, np.random.default_rng(0))
        assert params.num_parameters() == total_parameter_count(tiny_model_cfg, cfg)
        counts.add(params.num_parameters())
    assert len(counts) == 1


def test_init_is_zero_for_modulation(tiny_params):
    for name, p in tiny_params.named_parameters():
        if "ada" in name or name.endswith("b1") or name.endswith("b2") or name == "out_b":
            assert not p.data.any(), name


def test_output_head_has_no_mask_column(tiny_model_cfg, tiny_params):
    assert tiny_params.tok_emb.shape == (tiny_model_cfg.vocab_size + 1, tiny_model_cfg.d_model)
    assert tiny_params.out_w.shape == (tiny_model_cfg.d_model, tiny_model_cfg.vocab_size)


def test_effective_depth():
    cfg = LoopConfig(n_layers_total=12, loop_start=1, n_m=2, s_max=12)
    assert (cfg.n_h, cfg.n_m, cfg.n_o) == (1, 2, 9)
    assert effective_depth(cfg, 12) == 34
    with pytest.raises(ConfigError):
        effective_depth(cfg, 0)


def test_loop_config_validation():
    with pytest.raises(ConfigError):
        LoopConfig(n_layers_total=2, loop_start=1, n_m=2).validate()
    with pytest.raises(ConfigError):
        LoopConfig(n_m=0).validate()
    with pytest.raises(ConfigError):
        LoopConfig(loop_sampler="geometric").validate()


def test_model_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(d_model=10, n_heads=4).validate()
    with pytest.raises(ConfigError):
        ModelConfig(d_model=12, n_heads=4).validate()  # odd head width
    with pytest.raises(ConfigError):
        ModelConfig(precision="float16").validate()


def test_sample_loop_count_ranges():
    rng = np.random.default_rng(7)
    uniform = LoopConfig(s_max=4)
    draws = {sample_loop_count(uniform, rng) for _ in range(400)}
    assert draws == {1, 2, 3, 4}
    assert sample_loop_count(LoopConfig(loop_sampler="fixed", fixed_loops=5), rng) == 5
    lognormal = LoopConfig(s_max=6, loop_sampler="lognormal_poisson")
    values = [sample_loop_count(lognormal, rng) for _ in range(2000)]
    assert min(values) >= 1 and max(values) <= 24
    assert abs(np.mean(values) - 3.5) < 0.5


def test_expected_loop_count():
    assert expected_loop_count(LoopConfig(s_max=6)) == Fraction(7, 2)
    assert expected_loop_count(LoopConfig(loop_sampler="fixed", fixed_loops=3)) == 3
    assert expected_loop_count(LoopConfig(s_max=1, loop_sampler="lognormal_poisson")) == 1


def test_mask_noise_only_touches_masked_positions(tiny_model_cfg, live_params):
    loop_cfg = LoopConfig(n_layers_total=3, loop_start=1, n_m=1, mask_noise_std=0.5)
    clean = np.zeros((1, tiny_model_cfg.seq_len), dtype=np.int64)
    a = forward(live_params, tiny_model_cfg, loop_cfg, clean, 0.5, 1, rng=np.random.default_rng(0), training=True)
    b = forward(live_params, tiny_model_cfg, loop_cfg, clean, 0.5, 1)
    assert np.array_equal(a.logits.data, b.logits.data)

    masked = clean.copy()
    masked[0, 0] = tiny_model_cfg.mask_id
    a = forward(live_params, tiny_model_cfg, loop_cfg, masked, 0.5, 1, rng=np.random.default_rng(0), training=True)
    b = forward(live_params, tiny_model_cfg, loop_cfg, masked, 0.5, 1)
    assert not np.allclose(a.logits.data, b.logits.data)
