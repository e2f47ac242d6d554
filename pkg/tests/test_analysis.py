import numpy as np
import pytest

from loopmdm import analysis
from loopmdm.diffusion import forward_mask
from loopmdm.errors import ConfigError, ContractError
from loopmdm.sampler import AdaptiveLoopPolicy, Trajectory, TrajectoryStep, UnmaskPolicy, generate_batch


def _tokens(n, length, seed=0):
    return np.random.default_rng(seed).integers(0, 4, size=(n, length))


def test_mask_to_mask_mass_by_hand():
    att = np.zeros((2, 1, 3, 3))
    att[0, 0] = [[0.5, 0.5, 0.0], [0.2, 0.3, 0.5], [1.0, 0.0, 0.0]]
    att[1, 0] = np.eye(3)
    masked = np.array([[True, False, True], [False, False, False]])
    mass, keep = analysis.mask_to_mask_mass(att, masked)
    assert keep.tolist() == [True, False]
    # query 0 puts 0.5 on key 0, query 2 puts 1.0 on key 0
    assert mass.tolist() == pytest.approx([0.75])


def test_uniform_attention_gives_masked_fraction(tiny_model_cfg, tiny_loop_cfg, live_params):
    for layer in live_params.layers:
        layer.wq.data[:] = 0.0
        layer.wk.data[:] = 0.0
    tokens = _tokens(10, tiny_model_cfg.seq_len)
    stats = analysis.mask_attention_profile(
        live_params, tiny_model_cfg, tiny_loop_cfg, tokens, 0.5, [1, 2], np.random.default_rng(5)
    )
    x_t = forward_mask(tokens, 0.5, np.random.default_rng(5), mask_id=tiny_model_cfg.mask_id)
    per_seq = (x_t == tiny_model_cfg.mask_id).sum(axis=1)
    expected = float((per_seq[per_seq > 0] / tiny_model_cfg.seq_len).mean())
    assert [(s.loops, s.loop) for s in stats] == [(1, 1), (2, 1), (2, 2)]
    for s in stats:
        assert s.layer == 1
        assert s.count == int((per_seq > 0).sum())
        assert s.mass == pytest.approx(expected)


def test_timestep_profile_with_only_s1_has_no_gain(tiny_model_cfg, tiny_loop_cfg, live_params):
    profile = analysis.timestep_gain_profile(
        live_params, tiny_model_cfg, tiny_loop_cfg, _tokens(8, 6), [1], np.random.default_rng(0), n_bins=4
    )
    assert profile.nll.shape == (4, 1)
    assert np.all(profile.gains == 0.0)
    assert len(profile.rows()) == 4
    assert profile.counts[-1] > 0


def test_timestep_profile_rows_and_reproducibility(tiny_model_cfg, tiny_loop_cfg, live_params):
    def run():
        return analysis.timestep_gain_profile(
            live_params, tiny_model_cfg, tiny_loop_cfg, _tokens(8, 6), [1, 3], np.random.default_rng(2), n_bins=5
        )

    a, b = run(), run()
    assert np.array_equal(a.nll, b.nll, equal_nan=True)
    rows = a.rows()
    assert len(rows) == 10
    assert {r["S"] for r in rows} == {1, 3}
    assert rows[0]["t_low"] == 0.0 and rows[-1]["t_high"] == 1.0


def test_gains_need_s1(tiny_model_cfg, tiny_loop_cfg, live_params):
    with pytest.raises(ConfigError):
        analysis.timestep_gain_profile(
            live_params, tiny_model_cfg, tiny_loop_cfg, _tokens(2, 6), [2, 3], np.random.default_rng(0)
        )
    profile = analysis.TimestepProfile(np.linspace(0, 1, 3), [2], np.zeros((2, 1)), np.ones(2, dtype=int))
    with pytest.raises(ContractError):
        profile.gains


def test_mask_count_profile(tiny_model_cfg, tiny_loop_cfg, live_params):
    profile = analysis.mask_count_gain_profile(
        live_params, tiny_model_cfg, tiny_loop_cfg, _tokens(30, 6), [1, 2], np.random.default_rng(0)
    )
    assert np.all(profile.mask_counts >= 1)
    assert np.all(np.diff(profile.mask_counts) > 0)
    assert profile.sequences.sum() <= 30
    assert np.all(profile.gains[:, 0] == 0.0)
    assert len(profile.rows()) == 2 * len(profile.mask_counts)


def test_time_bin_edges():
    assert analysis.time_bin(0.0, 4) == 0
    assert analysis.time_bin(0.25, 4) == 0
    assert analysis.time_bin(0.26, 4) == 1
    assert analysis.time_bin(1.0, 4) == 3


def _step(t, loops):
    return TrajectoryStep(0, t, 0.0, np.zeros(2), [], [], loops, np.zeros(2))


def test_loop_allocation_profile():
    trajs = [Trajectory(np.zeros(2), [_step(1.0, 4), _step(0.5, 2)]), Trajectory(np.zeros(2), [_step(0.9, 6)])]
    profile = analysis.loop_allocation_profile(trajs, n_bins=2)
    assert profile.counts.tolist() == [1, 2]
    assert profile.mean_loops.tolist() == [2.0, 5.0]
    empty = analysis.loop_allocation_profile([], n_bins=3)
    assert np.isnan(empty.mean_loops).all()


def test_loop_allocation_never_grows_with_epsilon(tiny_model_cfg, tiny_loop_cfg, live_params):
    # constant logits make every trajectory's tokens independent of the loop count
    live_params.out_w.data[:] = 0.0
    prompts = _tokens(4, tiny_model_cfg.seq_len, seed=3)
    prompts[:, ::2] = tiny_model_cfg.mask_id
    prompts[0] = tiny_model_cfg.mask_id
    profiles = []
    for eps in (0.0, 0.01, 0.05, 0.2, float("inf")):
        trajs = generate_batch(live_params, tiny_model_cfg, tiny_loop_cfg, UnmaskPolicy("fixed_left_to_right"),
                               tiny_model_cfg.seq_len, AdaptiveLoopPolicy(eps, 5), tiny_model_cfg.seq_len,
                               np.random.default_rng(0), prompt=prompts)
        profiles.append(analysis.loop_allocation_profile(trajs, n_bins=3))
    for lower, higher in zip(profiles, profiles[1:]):
        assert lower.counts.tolist() == higher.counts.tolist()
        seen = lower.counts > 0
        assert np.all(higher.mean_loops[seen] <= lower.mean_loops[seen])
    assert np.all(profiles[0].mean_loops[profiles[0].counts > 0] == 5.0)
    assert np.all(profiles[-1].mean_loops[profiles[-1].counts > 0] == 1.0)


def test_generative_perplexity_of_a_uniform_scorer(tiny_model_cfg, tiny_loop_cfg, tiny_params):
    tiny_params.out_w.data[:] = 0.0
    scorer = analysis.Scorer.of(tiny_params, tiny_model_cfg, tiny_loop_cfg)
    assert scorer.loops == tiny_loop_cfg.s_max
    ppl = analysis.generative_perplexity(_tokens(3, 6), scorer, vocab_size=4)
    assert ppl == pytest.approx(4.0)


def test_generative_perplexity_checks_inputs(tiny_model_cfg, tiny_loop_cfg, tiny_params):
    scorer = analysis.Scorer.of(tiny_params, tiny_model_cfg, tiny_loop_cfg, loops=1)
    with pytest.raises(ConfigError):
        analysis.generative_perplexity(_tokens(2, 6), scorer, vocab_size=5)
    with pytest.raises(ConfigError):
        analysis.generative_perplexity(np.full((1, 6), 4), scorer)
    with pytest.raises(ContractError):
        analysis.generative_perplexity(np.zeros((0, 6), dtype=int), scorer)


def test_unigram_perplexity():
    assert analysis.unigram_perplexity(np.arange(8) % 4, 4) == pytest.approx(4.0)
    assert analysis.unigram_perplexity(np.zeros(5, dtype=int), 4) == pytest.approx(1.0)


def test_token_nll_of_uniform_logits():
    nll = analysis.token_nll(np.zeros((2, 3, 4)), np.zeros((2, 3), dtype=int))
    assert np.allclose(nll, np.log(4.0))
