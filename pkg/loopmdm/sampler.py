"""Reverse-process generation.

Time runs from 1 to 0 on a uniform grid of n_steps. Each step runs the
denoiser (a fixed loop count, or adaptive loops) and commits tokens
according to the unmasking policy:

- ancestral_random: each masked position stays masked with probability
  (1 - alpha_s) / (1 - alpha_t), otherwise draws from its distribution
- topk_confidence(k): the k masked positions with the highest max-token
  probability commit their argmax
- fixed_left_to_right(n): the n leftmost masked positions commit their argmax

Adaptive looping stops the shared block once the relative change of the
hidden state, ||H^k - H^(k-1)||_F / ||H^k||_F, drops below epsilon; H^0 is
the head output. Decisions are made per sequence.
"""
from __future__ import annotations
from dataclasses import dataclass, field
import logging
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from . import fs
from . import tensor as T
from .diffusion import reverse_step
from .errors import ConfigError, ContractError
from .model import (
    ForwardRecord,
    LoopConfig,
    ModelConfig,
    ModelParams,
    validate_inputs,
    condition,
    embed_tokens,
    forward,
    output_logits,
    run_layers,
)
from .tensor import Tensor

POLICY_KINDS = ("ancestral_random", "topk_confidence", "fixed_left_to_right")
POLICY_ALIASES = {"random": "ancestral_random", "topk": "topk_confidence", "ltr": "fixed_left_to_right"}
NORM_SCOPES = ("all_positions", "masked_only")


@dataclass(frozen=True)
class UnmaskPolicy:
    kind: str = "ancestral_random"
    k: int = 1
    tokens_per_step: int = 1

    def __post_init__(self):
        if self.kind not in POLICY_KINDS:
            raise ConfigError("sampler.policy", f"unknown policy {self.kind!r}")
        if self.k < 1:
            raise ConfigError("sampler.k", "topk_confidence needs k >= 1")
        if self.tokens_per_step < 1:
            raise ConfigError("sampler.tokens_per_step", "must be >= 1")

    @classmethod
    def parse(cls, name: str, k: int = 1, tokens_per_step: int = 1) -> "UnmaskPolicy":
        return cls(POLICY_ALIASES.get(name, name), k, tokens_per_step)


@dataclass(frozen=True)
class AdaptiveLoopPolicy:
    epsilon: float = 0.1
    s_budget: int = 12
    norm_scope: str = "all_positions"

    def __post_init__(self):
        if not self.epsilon >= 0:
            raise ConfigError("sampler.adaptive_epsilon", "must be >= 0")
        if self.s_budget < 1:
            raise ConfigError("sampler.adaptive_budget", "must be >= 1")
        if self.norm_scope not in NORM_SCOPES:
            raise ConfigError("sampler.norm_scope", f"expected one of {NORM_SCOPES}")


@dataclass
class SamplerConfig:
    policy: str = "ancestral_random"
    k: int = 1
    tokens_per_step: int = 1
    n_steps: int = 16
    loops: int = 6
    adaptive: bool = False
    adaptive_epsilon: float = 0.1
    adaptive_budget: int = 12
    norm_scope: str = "all_positions"
    n_samples: int = 16
    seed: int = 0

    def unmask_policy(self) -> UnmaskPolicy:
        return UnmaskPolicy.parse(self.policy, self.k, self.tokens_per_step)

    def loop_policy(self) -> Union[int, AdaptiveLoopPolicy]:
        if self.adaptive:
            return AdaptiveLoopPolicy(self.adaptive_epsilon, self.adaptive_budget, self.norm_scope)
        return self.loops

    def validate(self) -> None:
        self.unmask_policy()
        if self.n_steps < 1:
            raise ConfigError("sampler.n_steps", "must be >= 1")
        if self.loops < 1:
            raise ConfigError("sampler.loops", "must be >= 1")
        if self.n_samples < 1:
            raise ConfigError("sampler.n_samples", "must be >= 1")
        AdaptiveLoopPolicy(self.adaptive_epsilon, self.adaptive_budget, self.norm_scope)


@dataclass
class TrajectoryStep:
    step: int
    t: float
    s: float
    tokens: np.ndarray
    committed_positions: List[int]
    committed_tokens: List[int]
    loops_used: int
    confidences: np.ndarray

    def to_dict(self) -> Dict[str, Any]:
        return {
            "step": self.step,
            "t": self.t,
            "s": self.s,
            "loops_used": self.loops_used,
            "committed_positions": self.committed_positions,
            "committed_tokens": self.committed_tokens,
        }


@dataclass
class Trajectory:
    prompt: np.ndarray
    steps: List[TrajectoryStep] = field(default_factory=list)

    @property
    def final(self) -> np.ndarray:
        return self.steps[-1].tokens if self.steps else self.prompt

    @property
    def loops_used(self) -> List[int]:
        return [s.loops_used for s in self.steps]

    def commit_order(self) -> List[int]:
        return [p for s in self.steps for p in s.committed_positions]


def _relative_change(new: np.ndarray, old: np.ndarray, scope: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    weight = scope[..., None]
    diff = np.sqrt((((new - old) ** 2) * weight).sum(axis=(1, 2)))
    norm = np.sqrt(((new ** 2) * weight).sum(axis=(1, 2)))
    degenerate = norm == 0.0
    ratio = np.where(degenerate, 0.0, diff / np.where(degenerate, 1.0, norm))
    return ratio, degenerate


def adaptive_forward(
    params: ModelParams,
    model_cfg: ModelConfig,
    loop_cfg: LoopConfig,
    x_t,
    t,
    ap: AdaptiveLoopPolicy,
) -> Tuple[ForwardRecord, np.ndarray]:
    """Forward pass that stops looping per sequence; returns (record, loops used per row)."""
    x, times = validate_inputs(model_cfg, x_t, t)
    cond = condition(params, model_cfg, times, x.shape[1])
    h = run_layers(params, model_cfg, cond, embed_tokens(params, x), loop_cfg.head_layers)
    state = h.data.copy()
    if ap.norm_scope == "masked_only":
        scope = x == model_cfg.mask_id
        # rows with nothing masked fall back to every position
        scope[~scope.any(axis=1)] = True
    else:
        scope = np.ones(x.shape, dtype=bool)

    used = np.zeros(x.shape[0], dtype=np.int64)
    collapsed = np.zeros(x.shape[0], dtype=bool)
    active = np.arange(x.shape[0])
    for k in range(1, ap.s_budget + 1):
        sub = cond.rows(active)
        prev = state[active]
        new = run_layers(params, model_cfg, sub, Tensor(prev), loop_cfg.mid_layers, k).data
        ratio, degenerate = _relative_change(new, prev, scope[active])
        collapsed[active[degenerate]] = True
        state[active] = new
        stop = (ratio < ap.epsilon) | (k == ap.s_budget)
        stopped = active[stop]
        used[stopped] = k
        if collapsed[stopped].any():
            logging.warning("sampler: hidden state collapsed to zero for %d sequence(s) stopping at loop %d",
                            int(collapsed[stopped].sum()), k)
        active = active[~stop]
        if not active.size:
            break
    h = run_layers(params, model_cfg, cond, Tensor(state), loop_cfg.tail_layers)
    logits = output_logits(params, cond, h)
    return ForwardRecord(logits, [], {}, int(used.max(initial=1))), used


def _time_grid(n_steps: int) -> List[Tuple[float, float]]:
    grid = [1.0 - j / n_steps for j in range(n_steps)] + [0.0]
    return [(grid[j], grid[j + 1]) for j in range(n_steps)]


def generate_batch(
    params: ModelParams,
    model_cfg: ModelConfig,
    loop_cfg: LoopConfig,
    policy: UnmaskPolicy,
    n_steps: int,
    loops: Union[int, AdaptiveLoopPolicy],
    length: int,
    rng: np.random.Generator,
    prompt: Optional[np.ndarray] = None,
    batch_size: int = 1,
) -> List[Trajectory]:
    """Generate one trajectory per row.

    `prompt` is [B, L] with the mask id at free positions; prompt tokens
    are never re-predicted. Without a prompt, `batch_size` fully masked
    rows are generated. A row with nothing left masked is not denoised
    again and records no further steps.
    """
    if n_steps < 1:
        raise ConfigError("sampler.n_steps", "must be >= 1")
    mask_id = model_cfg.mask_id
    if prompt is None:
        x = np.full((batch_size, length), mask_id, dtype=np.int64)
    else:
        x = np.atleast_2d(np.asarray(prompt, dtype=np.int64)).copy()
        if x.shape[1] != length:
            raise ContractError(f"prompt length {x.shape[1]} != requested length {length}")
    trajectories = [Trajectory(row.copy()) for row in x]

    for j, (t, s) in enumerate(_time_grid(n_steps)):
        rows = np.flatnonzero(np.any(x == mask_id, axis=1))
        if not rows.size:
            break
        sub = x[rows]
        if isinstance(loops, AdaptiveLoopPolicy):
            record, used = adaptive_forward(params, model_cfg, loop_cfg, sub, t, loops)
        else:
            record = forward(params, model_cfg, loop_cfg, sub, t, int(loops))
            used = np.full(rows.size, int(loops))
        probs = T.softmax(record.logits, axis=-1).data
        final = j == n_steps - 1
        sub_next = reverse_step(sub, probs, s, t, rng, policy, mask_id=mask_id, final=final)
        confidence = probs.max(axis=-1)
        for i, b in enumerate(rows):
            newly = np.flatnonzero((sub[i] == mask_id) & (sub_next[i] != mask_id))
            trajectories[b].steps.append(TrajectoryStep(
                step=j, t=t, s=s, tokens=sub_next[i].copy(),
                committed_positions=[int(p) for p in newly],
                committed_tokens=[int(sub_next[i, p]) for p in newly],
                loops_used=int(used[i]),
                confidences=confidence[i].copy(),
            ))
        x[rows] = sub_next
    return trajectories


def generate(
    params: ModelParams,
    model_cfg: ModelConfig,
    loop_cfg: LoopConfig,
    policy: UnmaskPolicy,
    n_steps: int,
    loops: Union[int, AdaptiveLoopPolicy],
    length: int,
    rng: np.random.Generator,
    prompt: Optional[np.ndarray] = None,
) -> Trajectory:
    row = None if prompt is None else np.asarray(prompt)[None, :]
    return generate_batch(params, model_cfg, loop_cfg, policy, n_steps, loops, length, rng, row)[0]


def mean_loops(trajectories: Iterable[Trajectory]) -> float:
    counts = [n for traj in trajectories for n in traj.loops_used]
    if not counts:
        raise ContractError("mean_loops needs at least one recorded step")
    return float(np.mean(counts))


def trajectory_records(trajectories: Sequence[Trajectory]) -> List[Dict[str, Any]]:
    return [
        dict(step.to_dict(), sequence=index)
        for index, traj in enumerate(trajectories)
        for step in traj.steps
    ]


def write_trajectories(path: Path, trajectories: Sequence[Trajectory]) -> None:
    path = Path(path)
    text = "".join(fs.jsonl_line(rec) + "\n" for rec in trajectory_records(trajectories))
    fs.atomic_write_text(path, text)


def read_trajectory_records(path: Path) -> List[Dict[str, Any]]:
    return fs.read_jsonl(path)
