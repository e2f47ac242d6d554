"""NELBO training with stochastic loop counts.

Each optimizer step draws one loop count S, one timestep per sequence,
forward-masks the batch and minimizes

    mean_b  sum_i  1[x_t^i = mask] * w(t_b) * -log p_S(x_0^i)  / L

with w(t) = 1/t. AdamW (decoupled weight decay on matrices), global-norm
clipping, linear warmup then constant learning rate, EMA of the weights.

API:
- TrainConfig, AdamState, TrainState
- init_train_state(model_cfg, loop_cfg, train_cfg)
- nelbo_loss(params, model_cfg, loop_cfg, batch, rng, loops=None, t=None, training=True)
- masked_nelbo(...)  the loss for an already-masked batch
- learning_rate_at(cfg, step), adamw_update(...), ema_update(...)
- train_step(state, batch) -> (state, metrics)
"""
from __future__ import annotations
from dataclasses import dataclass, field
import logging
import math
from typing import Any, Dict, Optional, Tuple

import numpy as np

from . import tensor as T
from .diffusion import LINEAR, TrainBatch, forward_mask, nelbo_weight
from .errors import ConfigError, ContractError, NonFiniteLossError
from .flops import per_step_flops
from .model import (
    LoopConfig,
    ModelConfig,
    ModelParams,
    forward,
    init_params,
    sample_loop_count,
)
from .tensor import Tensor

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass
class TrainConfig:
    batch_size: int = 64
    total_steps: int = 3000
    learning_rate: float = 3e-4
    warmup_steps: int = 100
    weight_decay: float = 0.0
    ema_decay: float = 0.9999
    seed: int = 0
    grad_clip: float = 1.0
    t_min: float = 1e-3
    checkpoint_every: int = 1000
    flops_match_baseline: Optional[LoopConfig] = None

    def validate(self) -> None:
        if self.batch_size < 1:
            raise ConfigError("train.batch_size", "must be >= 1")
        if self.warmup_steps < 0:
            raise ConfigError("train.warmup_steps", "must be >= 0")
        if self.total_steps < self.warmup_steps:
            raise ConfigError("train.total_steps", f"must be >= warmup_steps ({self.warmup_steps})")
        if not self.learning_rate > 0:
            raise ConfigError("train.learning_rate", "must be > 0")
        if self.weight_decay < 0:
            raise ConfigError("train.weight_decay", "must be >= 0")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ConfigError("train.ema_decay", "must lie in [0, 1)")
        if not self.grad_clip > 0:
            raise ConfigError("train.grad_clip", "must be > 0")
        if not 0.0 < self.t_min < 1.0:
            raise ConfigError("train.t_min", "must lie in (0, 1)")
        if self.checkpoint_every < 0:
            raise ConfigError("train.checkpoint_every", "must be >= 0 (0 disables)")
        if self.flops_match_baseline is not None:
            self.flops_match_baseline.validate()


@dataclass
class AdamState:
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    @classmethod
    def zeros_like(cls, params: ModelParams) -> "AdamState":
        return cls(
            {n: np.zeros_like(p.data) for n, p in params.named_parameters()},
            {n: np.zeros_like(p.data) for n, p in params.named_parameters()},
        )


@dataclass
class TrainState:
    model_cfg: ModelConfig
    loop_cfg: LoopConfig
    train_cfg: TrainConfig
    params: ModelParams
    ema: ModelParams
    opt: AdamState
    rng: np.random.Generator
    step: int = 0
    flops: int = 0


def init_train_state(model_cfg: ModelConfig, loop_cfg: LoopConfig, train_cfg: TrainConfig) -> TrainState:
    model_cfg.validate()
    loop_cfg.validate()
    train_cfg.validate()
    rng = np.random.default_rng(train_cfg.seed)
    params = init_params(model_cfg, loop_cfg, rng)
    return TrainState(
        model_cfg, loop_cfg, train_cfg, params, params.copy(), AdamState.zeros_like(params), rng
    )


def _as_batch(batch) -> TrainBatch:
    return batch if isinstance(batch, TrainBatch) else TrainBatch.from_tokens(batch)


def masked_nelbo(
    params: ModelParams,
    model_cfg: ModelConfig,
    loop_cfg: LoopConfig,
    x0: np.ndarray,
    x_t: np.ndarray,
    t: np.ndarray,
    S: int,
    supervise: Optional[np.ndarray] = None,
    rng: Optional[np.random.Generator] = None,
    training: bool = False,
) -> Tensor:
    record = forward(params, model_cfg, loop_cfg, x_t, t, S, rng=rng, training=training)
    masked = x_t == model_cfg.mask_id
    if supervise is not None:
        masked = masked & supervise
    weights = np.asarray(nelbo_weight(LINEAR, np.asarray(t, dtype=np.float64)))[:, None]
    total = T.cross_entropy(record.logits, x0, masked, weights)
    return T.scale(total, 1.0 / x0.size)


def nelbo_loss(
    params: ModelParams,
    model_cfg: ModelConfig,
    loop_cfg: LoopConfig,
    batch,
    rng: np.random.Generator,
    loops: Optional[int] = None,
    t=None,
    training: bool = True,
    t_min: float = 1e-3,
) -> Tensor:
    """Monte-Carlo NELBO of one batch.

    Draws, in order: S (unless `loops` is given), t ~ U(t_min, 1] per
    sequence (unless `t` is given), the masking pattern, mask-embedding noise.
    """
    batch = _as_batch(batch)
    if len(batch) == 0 or batch.tokens.size == 0:
        raise ContractError("nelbo_loss needs a non-empty batch")
    x0 = batch.tokens
    if np.any(x0 == model_cfg.mask_id):
        raise ContractError("clean batch contains mask ids")
    S = sample_loop_count(loop_cfg, rng) if loops is None else int(loops)
    if t is None:
        t = _sample_times(rng, x0.shape[0], t_min)
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (x0.shape[0],)).copy()
    x_t = forward_mask(
        x0, t, rng, mask_id=model_cfg.mask_id, maskable=batch.maskable, force_mask=batch.force_mask
    )
    return masked_nelbo(params, model_cfg, loop_cfg, x0, x_t, t, S, batch.supervise, rng, training)


def _sample_times(rng: np.random.Generator, n: int, t_min: float) -> np.ndarray:
    # 1 - U[0, 1) lies in (0, 1]
    return t_min + (1.0 - t_min) * (1.0 - rng.random(n))


def learning_rate_at(cfg: TrainConfig, step: int) -> float:
    """Learning rate for the 1-based optimizer step `step`."""
    if cfg.warmup_steps and step < cfg.warmup_steps:
        return cfg.learning_rate * step / cfg.warmup_steps
    return cfg.learning_rate


def clip_by_global_norm(grads: Dict[str, np.ndarray], max_norm: float) -> float:
    norm = math.sqrt(float(np.sum([np.sum(g.astype(np.float64) ** 2) for g in grads.values()])))
    if norm > max_norm:
        factor = max_norm / (norm + 1e-6)
        for name in grads:
            grads[name] = grads[name] * factor
    return norm


def adamw_update(
    params: ModelParams,
    grads: Dict[str, np.ndarray],
    opt: AdamState,
    lr: float,
    weight_decay: float,
) -> None:
    opt.step += 1
    bias1 = 1.0 - ADAM_BETA1 ** opt.step
    bias2 = 1.0 - ADAM_BETA2 ** opt.step
    for name, p in params.named_parameters():
        g = grads[name]
        m = opt.m[name] = ADAM_BETA1 * opt.m[name] + (1.0 - ADAM_BETA1) * g
        v = opt.v[name] = ADAM_BETA2 * opt.v[name] + (1.0 - ADAM_BETA2) * g * g
        if weight_decay and p.ndim >= 2:
            p.data *= 1.0 - lr * weight_decay
        p.data -= (lr * (m / bias1) / (np.sqrt(v / bias2) + ADAM_EPS)).astype(p.data.dtype)


def ema_update(ema: ModelParams, params: ModelParams, decay: float) -> None:
    for (_, e), (_, p) in zip(ema.named_parameters(), params.named_parameters()):
        e.data = (decay * e.data + (1.0 - decay) * p.data).astype(p.data.dtype)


def train_step(state: TrainState, batch) -> Tuple[TrainState, Dict[str, Any]]:
    """One optimizer step; mutates and returns `state`."""
    batch = _as_batch(batch)
    cfg = state.train_cfg
    S = sample_loop_count(state.loop_cfg, state.rng)
    for _, p in state.params.named_parameters():
        p.zero_grad()
    times = _sample_times(state.rng, len(batch), cfg.t_min) if len(batch) else None
    with T.Tape():
        loss = nelbo_loss(
            state.params, state.model_cfg, state.loop_cfg, batch, state.rng, loops=S, t=times, training=True
        )
    value = float(loss.item())
    if not math.isfinite(value):
        snapshot = {
            "step": state.step + 1,
            "loops": S,
            "loss": repr(value),
            "t": [float(x) for x in times],
        }
        raise NonFiniteLossError(f"non-finite loss at step {state.step + 1}", snapshot)
    T.backward(loss)

    grads = {
        name: (p.grad if p.grad is not None else np.zeros_like(p.data))
        for name, p in state.params.named_parameters()
    }
    grad_norm = clip_by_global_norm(grads, cfg.grad_clip)
    lr = learning_rate_at(cfg, state.step + 1)
    adamw_update(state.params, grads, state.opt, lr, cfg.weight_decay)
    ema_update(state.ema, state.params, cfg.ema_decay)

    report = per_step_flops(state.loop_cfg, state.model_cfg, batch.tokens.shape[1], len(batch))
    state.flops += report.realized_step_flops(S)
    state.step += 1
    logging.debug("trainer: step=%d loss=%.6f S=%d lr=%.3g", state.step, value, S, lr)
    metrics = {
        "step": state.step,
        "loss": value,
        "lr": lr,
        "loops": S,
        "grad_norm": grad_norm,
        "flops": state.flops,
    }
    return state, metrics
