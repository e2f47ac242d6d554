"""Diagnostics over frozen checkpoints.

- mask_attention_profile: attention mass from masked queries to masked keys,
  per mid-block layer and loop iteration
- timestep_gain_profile: per-masked-position NLL at several loop counts,
  binned by diffusion time, and its gain over S=1
- mask_count_gain_profile: the same gains grouped by how many positions
  are masked in the sequence
- loop_allocation_profile: mean loops spent by adaptive generation per time bin
- generative_perplexity: leave-one-out perplexity under a scorer model

Every function takes an explicit rng or seed; masking patterns are drawn
before any parallel work, so outputs do not depend on RUN_THREADS.
"""
from __future__ import annotations
from dataclasses import dataclass
import logging
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .diffusion import forward_mask
from .errors import ConfigError, ContractError
from .model import LoopConfig, ModelConfig, ModelParams, RetentionFlags, forward
from .sampler import Trajectory
from .workers import parallel_map

N_BINS = 20
CHUNK = 64


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def token_nll(logits: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """-log p(target) per position; logits [..., V], targets [...]."""
    logp = log_softmax(np.asarray(logits, dtype=np.float64))
    return -np.take_along_axis(logp, np.asarray(targets)[..., None], axis=-1)[..., 0]


def _chunks(n: int, size: int = CHUNK) -> List[np.ndarray]:
    return [np.arange(i, min(i + size, n)) for i in range(0, n, size)]


def _mask_rows(
    tokens: np.ndarray, t, rng: np.random.Generator, mask_id: int, maskable: Optional[np.ndarray]
) -> np.ndarray:
    return forward_mask(tokens, t, rng, mask_id=mask_id, maskable=maskable)


# -- mask-to-mask attention -------------------------------------------------

@dataclass(frozen=True)
class AttentionStats:
    loops: int
    layer: int
    loop: int
    mass: float
    count: int

    def to_dict(self) -> Dict[str, Any]:
        return {"S": self.loops, "layer": self.layer, "loop": self.loop, "mass": self.mass, "count": self.count}


def mask_to_mask_mass(attention: np.ndarray, masked: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Per-sequence mean over heads and masked queries of the mass on masked keys.

    attention [B, H, L, L] (rows sum to 1), masked [B, L]. Returns (mass for
    the sequences that have a masked position, boolean keep mask over B).
    """
    masked = np.asarray(masked, dtype=bool)
    keep = masked.any(axis=1)
    on_masked_keys = (attention * masked[:, None, None, :]).sum(axis=-1)  # [B, H, L]
    per_query = on_masked_keys.mean(axis=1)  # [B, L]
    counts = masked.sum(axis=1)
    mass = (per_query * masked).sum(axis=1)[keep] / counts[keep]
    return mass, keep


def mask_attention_profile(
    params: ModelParams,
    model_cfg: ModelConfig,
    loop_cfg: LoopConfig,
    tokens: np.ndarray,
    t: float,
    S_list: Sequence[int],
    rng: np.random.Generator,
    maskable: Optional[np.ndarray] = None,
) -> List[AttentionStats]:
    """Mask-to-mask attention for every S, mid-block layer and loop index.

    One masking pattern at time `t` is shared by every S. Sequences with no
    masked position are skipped and counted in the log.
    """
    tokens = np.atleast_2d(np.asarray(tokens, dtype=np.int64))
    x_t = _mask_rows(tokens, t, rng, model_cfg.mask_id, maskable)
    masked = x_t == model_cfg.mask_id
    skipped = int((~masked.any(axis=1)).sum())
    if skipped:
        logging.warning("analysis: %d of %d sequence(s) have no masked position at t=%.3f; skipped",
                        skipped, len(tokens), t)
    retain = RetentionFlags(attention=True)
    out: List[AttentionStats] = []
    for S in S_list:
        def run(idx: np.ndarray) -> Dict[Tuple[int, int], np.ndarray]:
            record = forward(params, model_cfg, loop_cfg, x_t[idx], t, S, retain=retain)
            return {key: mask_to_mask_mass(att, masked[idx])[0] for key, att in record.attention.items()}

        per_chunk = parallel_map(run, _chunks(len(tokens)))
        for layer in loop_cfg.mid_layers:
            for k in range(1, S + 1):
                values = np.concatenate([chunk[(layer, k)] for chunk in per_chunk]) if per_chunk else np.zeros(0)
                if values.size:
                    out.append(AttentionStats(int(S), layer, k, float(values.mean()), int(values.size)))
    return out


# -- NLL gain by timestep -----------------------------------------------------

@dataclass
class TimestepProfile:
    """Per-bin mean NLL at each S; bins are (edges[b], edges[b + 1]]."""

    edges: np.ndarray
    s_list: List[int]
    nll: np.ndarray  # [n_bins, len(s_list)]
    counts: np.ndarray  # masked positions per bin

    @property
    def gains(self) -> np.ndarray:
        if 1 not in self.s_list:
            raise ContractError("gains need S=1 in the profile")
        base = self.nll[:, [self.s_list.index(1)]]
        gains = base - self.nll
        gains[self.counts == 0] = 0.0
        return gains

    def rows(self) -> List[Dict[str, Any]]:
        gains = self.gains
        return [
            {
                "t_low": float(self.edges[b]), "t_high": float(self.edges[b + 1]), "S": S,
                "nll": float(self.nll[b, j]), "gain": float(gains[b, j]), "count": int(self.counts[b]),
            }
            for b in range(len(self.counts))
            for j, S in enumerate(self.s_list)
        ]


def _masked_nll_sums(
    params: ModelParams,
    model_cfg: ModelConfig,
    loop_cfg: LoopConfig,
    x0: np.ndarray,
    x_t: np.ndarray,
    t: np.ndarray,
    S_list: Sequence[int],
) -> np.ndarray:
    """Per-sequence sum of NLL over masked positions, [B, len(S_list)]."""
    masked = x_t == model_cfg.mask_id

    def run(idx: np.ndarray) -> np.ndarray:
        cols = []
        for S in S_list:
            logits = forward(params, model_cfg, loop_cfg, x_t[idx], t[idx], S).logits.data
            cols.append((token_nll(logits, x0[idx]) * masked[idx]).sum(axis=1))
        return np.stack(cols, axis=1)

    parts = parallel_map(run, _chunks(len(x0)))
    return np.concatenate(parts) if parts else np.zeros((0, len(S_list)))


def _check_s_list(S_list: Sequence[int]) -> List[int]:
    s_list = [int(s) for s in S_list]
    if 1 not in s_list:
        raise ConfigError("S_list", "must contain 1")
    return s_list


def timestep_gain_profile(
    params: ModelParams,
    model_cfg: ModelConfig,
    loop_cfg: LoopConfig,
    tokens: np.ndarray,
    S_list: Sequence[int],
    rng: np.random.Generator,
    n_bins: int = N_BINS,
    maskable: Optional[np.ndarray] = None,
) -> TimestepProfile:
    """Every sequence is masked once per bin at the bin's midpoint."""
    s_list = _check_s_list(S_list)
    tokens = np.atleast_2d(np.asarray(tokens, dtype=np.int64))
    edges = np.linspace(0.0, 1.0, n_bins + 1)
    nll = np.full((n_bins, len(s_list)), np.nan)
    counts = np.zeros(n_bins, dtype=np.int64)
    for b in range(n_bins):
        t = np.full(len(tokens), 0.5 * (edges[b] + edges[b + 1]))
        x_t = _mask_rows(tokens, t, rng, model_cfg.mask_id, maskable)
        counts[b] = int((x_t == model_cfg.mask_id).sum())
        if counts[b]:
            sums = _masked_nll_sums(params, model_cfg, loop_cfg, tokens, x_t, t, s_list)
            nll[b] = sums.sum(axis=0) / counts[b]
    return TimestepProfile(edges, s_list, nll, counts)


@dataclass
class MaskCountProfile:
    """Mean per-position NLL grouped by the number of masked positions."""

    mask_counts: np.ndarray
    s_list: List[int]
    nll: np.ndarray  # [n_levels, len(s_list)]
    sequences: np.ndarray

    @property
    def gains(self) -> np.ndarray:
        base = self.nll[:, [self.s_list.index(1)]]
        return base - self.nll

    def rows(self) -> List[Dict[str, Any]]:
        gains = self.gains
        return [
            {"masked": int(m), "S": S, "nll": float(self.nll[i, j]), "gain": float(gains[i, j]),
             "sequences": int(self.sequences[i])}
            for i, m in enumerate(self.mask_counts)
            for j, S in enumerate(self.s_list)
        ]


def mask_count_gain_profile(
    params: ModelParams,
    model_cfg: ModelConfig,
    loop_cfg: LoopConfig,
    tokens: np.ndarray,
    S_list: Sequence[int],
    rng: np.random.Generator,
    maskable: Optional[np.ndarray] = None,
) -> MaskCountProfile:
    """t ~ U(0, 1] per sequence; levels with no sequence are omitted."""
    s_list = _check_s_list(S_list)
    tokens = np.atleast_2d(np.asarray(tokens, dtype=np.int64))
    t = 1.0 - rng.random(len(tokens))
    x_t = _mask_rows(tokens, t, rng, model_cfg.mask_id, maskable)
    per_seq = (x_t == model_cfg.mask_id).sum(axis=1)
    sums = _masked_nll_sums(params, model_cfg, loop_cfg, tokens, x_t, t, s_list)
    levels = np.unique(per_seq[per_seq > 0])
    nll = np.zeros((len(levels), len(s_list)))
    seqs = np.zeros(len(levels), dtype=np.int64)
    for i, m in enumerate(levels):
        pick = per_seq == m
        seqs[i] = int(pick.sum())
        nll[i] = sums[pick].sum(axis=0) / (m * seqs[i])
    return MaskCountProfile(levels, s_list, nll, seqs)


# -- adaptive loop allocation ---------------------------------------------------

@dataclass
class LoopAllocationProfile:
    edges: np.ndarray
    mean_loops: np.ndarray  # NaN where a bin saw no step
    counts: np.ndarray

    def rows(self) -> List[Dict[str, Any]]:
        return [
            {"t_low": float(self.edges[b]), "t_high": float(self.edges[b + 1]),
             "mean_loops": float(self.mean_loops[b]), "count": int(self.counts[b])}
            for b in range(len(self.counts))
        ]


def time_bin(t: float, n_bins: int) -> int:
    """Index of the bin (b / n, (b + 1) / n] holding t; t = 0 joins the first bin."""
    return min(max(int(np.ceil(t * n_bins)) - 1, 0), n_bins - 1)


def loop_allocation_profile(trajectories: Sequence[Trajectory], n_bins: int = N_BINS) -> LoopAllocationProfile:
    totals = np.zeros(n_bins)
    counts = np.zeros(n_bins, dtype=np.int64)
    for traj in trajectories:
        for step in traj.steps:
            b = time_bin(step.t, n_bins)
            totals[b] += step.loops_used
            counts[b] += 1
    with np.errstate(invalid="ignore", divide="ignore"):
        mean = np.where(counts > 0, totals / np.maximum(counts, 1), np.nan)
    return LoopAllocationProfile(np.linspace(0.0, 1.0, n_bins + 1), mean, counts)


# -- generative perplexity ------------------------------------------------------

@dataclass(frozen=True)
class Scorer:
    params: ModelParams
    model_cfg: ModelConfig
    loop_cfg: LoopConfig
    loops: int

    @classmethod
    def of(cls, params: ModelParams, model_cfg: ModelConfig, loop_cfg: LoopConfig,
           loops: Optional[int] = None) -> "Scorer":
        return cls(params, model_cfg, loop_cfg, int(loops or loop_cfg.s_max))


def _leave_one_out_nll(scorer: Scorer, seq: np.ndarray) -> float:
    length = seq.shape[0]
    batch = np.repeat(seq[None, :], length, axis=0)
    batch[np.arange(length), np.arange(length)] = scorer.model_cfg.mask_id
    # one masked position out of L
    logits = forward(scorer.params, scorer.model_cfg, scorer.loop_cfg, batch, 1.0 / length, scorer.loops).logits.data
    return float(token_nll(logits[np.arange(length), np.arange(length)], seq).sum())


def generative_perplexity(sequences: np.ndarray, scorer: Scorer, vocab_size: Optional[int] = None) -> float:
    """exp(mean per-token NLL), each position masked in turn with all others visible."""
    seqs = np.atleast_2d(np.asarray(sequences, dtype=np.int64))
    V = scorer.model_cfg.vocab_size
    if vocab_size is not None and vocab_size != V:
        raise ConfigError("scorer", f"scorer vocabulary {V} does not match generator vocabulary {vocab_size}")
    if seqs.size == 0:
        raise ContractError("generative_perplexity needs at least one sequence")
    if seqs.min() < 0 or seqs.max() >= V:
        raise ConfigError("scorer", f"sequences hold tokens outside the scorer vocabulary [0, {V})")
    totals = parallel_map(lambda row: _leave_one_out_nll(scorer, row), list(seqs))
    return float(np.exp(np.sum(totals) / seqs.size))


def unigram_perplexity(tokens: np.ndarray, vocab_size: int) -> float:
    """Perplexity of the empirical unigram distribution of `tokens`."""
    counts = np.bincount(np.asarray(tokens, dtype=np.int64).reshape(-1), minlength=vocab_size).astype(np.float64)
    p = counts[counts > 0] / counts.sum()
    return float(np.exp(-(p * np.log(p)).sum()))
