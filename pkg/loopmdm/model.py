"""Looped denoising transformer.

The layer stack is split into a head (layers [0, loop_start)), a mid-block
(layers [loop_start, loop_start + n_m)) that is applied S times with the
same weights, and a tail (the remaining layers plus the output head).
Every layer is a bidirectional pre-norm block with rotary attention, a GELU
MLP and adaLN modulation from the timestep embedding.

    H0 = head(embed(x_t));  Hk = mid(H(k-1)), k = 1..S;  logits = tail(HS)

The mid-block never sees the loop index, and the head output is not
re-injected into later loops.

API:
- ModelConfig, LoopConfig, RetentionFlags, ForwardRecord
- LayerParams, ModelParams, init_params(model_cfg, loop_cfg, rng)
- forward(params, model_cfg, loop_cfg, x_t, t, S, retain=None, rng=None, training=False)
- plain_forward(...)  reference non-looped stack
- sample_loop_count(cfg, rng), expected_loop_count(cfg), effective_depth(cfg, S)
- inject_mask_noise(params, model_cfg, loop_cfg, x_t, rng)
- condition / embed_tokens / run_layers / output_logits building blocks
"""
from __future__ import annotations
from dataclasses import dataclass, field
from fractions import Fraction
import math
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .errors import ConfigError, DomainError
from .tensor import Tensor

LOOP_SAMPLERS = ("uniform", "fixed", "lognormal_poisson")
_DTYPES = {"float64": np.float64, "float32": np.float32}


@dataclass
class ModelConfig:
    vocab_size: int = 16
    seq_len: int = 16
    d_model: int = 128
    n_heads: int = 8
    mlp_ratio: int = 4
    time_freq_dim: int = 64
    init_std: float = 0.02
    precision: str = "float64"

    @property
    def mask_id(self) -> int:
        return self.vocab_size

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    @property
    def dtype(self):
        return _DTYPES[self.precision]

    def validate(self) -> None:
        if self.vocab_size < 2:
            raise ConfigError("model.vocab_size", "need at least two tokens")
        if self.seq_len < 1:
            raise ConfigError("model.seq_len", "must be positive")
        if self.d_model < 2 or self.n_heads < 1 or self.d_model % self.n_heads:
            raise ConfigError("model.n_heads", f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.d_head % 2:
            raise ConfigError("model.d_head", f"head width {self.d_head} must be even for rotary encoding")
        if self.mlp_ratio < 1:
            raise ConfigError("model.mlp_ratio", "must be >= 1")
        if self.time_freq_dim < 2 or self.time_freq_dim % 2:
            raise ConfigError("model.time_freq_dim", "must be a positive even number")
        if self.init_std <= 0:
            raise ConfigError("model.init_std", "must be > 0")
        if self.precision not in _DTYPES:
            raise ConfigError("model.precision", f"expected one of {sorted(_DTYPES)}")


@dataclass
class LoopConfig:
    n_layers_total: int = 1
    loop_start: int = 0
    n_m: int = 1
    s_max: int = 6
    loop_sampler: str = "uniform"
    fixed_loops: int = 1
    lognormal_mu: Optional[float] = None
    lognormal_sigma: float = 0.5
    mask_noise_std: float = 0.0

    @property
    def n_h(self) -> int:
        return self.loop_start

    @property
    def n_o(self) -> int:
        return self.n_layers_total - self.loop_start - self.n_m

    @property
    def head_layers(self) -> range:
        return range(0, self.loop_start)

    @property
    def mid_layers(self) -> range:
        return range(self.loop_start, self.loop_start + self.n_m)

    @property
    def tail_layers(self) -> range:
        return range(self.loop_start + self.n_m, self.n_layers_total)

    def validate(self) -> None:
        if self.n_m < 1:
            raise ConfigError("loop.n_m", "at least one looped layer is required")
        if self.loop_start < 0:
            raise ConfigError("loop.loop_start", "must be >= 0")
        if self.loop_start + self.n_m > self.n_layers_total:
            raise ConfigError(
                "loop.loop_start",
                f"loop_start + n_m = {self.loop_start + self.n_m} exceeds n_layers_total = {self.n_layers_total}",
            )
        if self.s_max < 1:
            raise ConfigError("loop.s_max", "must be >= 1")
        if self.loop_sampler not in LOOP_SAMPLERS:
            raise ConfigError("loop.loop_sampler", f"expected one of {LOOP_SAMPLERS}")
        if self.fixed_loops < 1:
            raise ConfigError("loop.fixed_loops", "must be >= 1")
        if self.lognormal_sigma < 0:
            raise ConfigError("loop.lognormal_sigma", "must be >= 0")
        if self.mask_noise_std < 0:
            raise ConfigError("loop.mask_noise_std", "must be >= 0")


@dataclass
class RetentionFlags:
    hidden: bool = False
    attention: bool = False


@dataclass
class ForwardRecord:
    logits: Tensor
    hidden: List[np.ndarray] = field(default_factory=list)
    # (layer index, loop index) -> [B, heads, L, L]; loop index is 0 outside the mid-block
    attention: Dict[Tuple[int, int], np.ndarray] = field(default_factory=dict)
    loops: int = 1


_LAYER_FIELDS = ("ada_w", "ada_b", "wq", "wk", "wv", "wo", "w1", "b1", "w2", "b2")
_TOP_FIELDS = ("tok_emb", "time_w1", "time_b1", "time_w2", "time_b2",
               "final_ada_w", "final_ada_b", "out_w", "out_b")


@dataclass
class LayerParams:
    ada_w: Tensor
    ada_b: Tensor
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor


@dataclass
class ModelParams:
    """All learnable weights. Each layer, mid-block included, is stored once."""

    tok_emb: Tensor
    time_w1: Tensor
    time_b1: Tensor
    time_w2: Tensor
    time_b2: Tensor
    layers: List[LayerParams]
    final_ada_w: Tensor
    final_ada_b: Tensor
    out_w: Tensor
    out_b: Tensor

    def named_parameters(self) -> List[Tuple[str, Tensor]]:
        named = [(name, getattr(self, name)) for name in _TOP_FIELDS[:5]]
        for i, layer in enumerate(self.layers):
            named.extend((f"layers.{i}.{name}", getattr(layer, name)) for name in _LAYER_FIELDS)
        named.extend((name, getattr(self, name)) for name in _TOP_FIELDS[5:])
        return named

    def num_parameters(self) -> int:
        return int(np.sum([p.size for _, p in self.named_parameters()]))

    def arrays(self) -> Dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def copy(self, requires_grad: bool = False) -> "ModelParams":
        return ModelParams.from_arrays(
            {name: a.copy() for name, a in self.arrays().items()}, len(self.layers), requires_grad
        )

    @classmethod
    def from_arrays(cls, arrays: Dict[str, np.ndarray], n_layers: int, requires_grad: bool = True) -> "ModelParams":
        def make(name):
            return Tensor(arrays[name], requires_grad=requires_grad, name=name)

        layers = [
            LayerParams(**{f: make(f"layers.{i}.{f}") for f in _LAYER_FIELDS})
            for i in range(n_layers)
        ]
        return cls(layers=layers, **{f: make(f) for f in _TOP_FIELDS})


def _trunc_normal(rng: np.random.Generator, shape, std: float, dtype) -> np.ndarray:
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out.astype(dtype)


def init_params(model_cfg: ModelConfig, loop_cfg: LoopConfig, rng: np.random.Generator) -> ModelParams:
    """Truncated-normal weights (std init_std), zero biases, zero adaLN modulation."""
    model_cfg.validate()
    loop_cfg.validate()
    d, V, F = model_cfg.d_model, model_cfg.vocab_size, model_cfg.time_freq_dim
    hidden = model_cfg.mlp_ratio * d
    dt, std = model_cfg.dtype, model_cfg.init_std

    def normal(*shape):
        return _trunc_normal(rng, shape, std, dt)

    def zeros(*shape):
        return np.zeros(shape, dtype=dt)

    arrays = {
        "tok_emb": normal(V + 1, d),
        "time_w1": normal(F, d), "time_b1": zeros(d),
        "time_w2": normal(d, d), "time_b2": zeros(d),
    }
    for i in range(loop_cfg.n_layers_total):
        prefix = f"layers.{i}."
        arrays.update({
            prefix + "ada_w": zeros(d, 6 * d), prefix + "ada_b": zeros(6 * d),
            prefix + "wq": normal(d, d), prefix + "wk": normal(d, d),
            prefix + "wv": normal(d, d), prefix + "wo": normal(d, d),
            prefix + "w1": normal(d, hidden), prefix + "b1": zeros(hidden),
            prefix + "w2": normal(hidden, d), prefix + "b2": zeros(d),
        })
    arrays.update({
        "final_ada_w": zeros(d, 2 * d), "final_ada_b": zeros(2 * d),
        "out_w": normal(d, V), "out_b": zeros(V),
    })
    return ModelParams.from_arrays(arrays, loop_cfg.n_layers_total)


# -- loop counts -----------------------------------------------------------

def _lognormal_mu(cfg: LoopConfig) -> float:
    if cfg.lognormal_mu is not None:
        return cfg.lognormal_mu
    # matches the uniform sampler's mean (S_max + 1) / 2
    return math.log(max(cfg.s_max - 1, 1) / 2.0) - cfg.lognormal_sigma ** 2 / 2.0


def sample_loop_count(cfg: LoopConfig, rng: np.random.Generator) -> int:
    if cfg.loop_sampler == "uniform":
        return int(rng.integers(1, cfg.s_max + 1))
    if cfg.loop_sampler == "fixed":
        return int(cfg.fixed_loops)
    if cfg.s_max == 1 and cfg.lognormal_mu is None:
        return 1
    rate = math.exp(rng.normal(_lognormal_mu(cfg), cfg.lognormal_sigma))
    return int(min(max(1 + rng.poisson(rate), 1), 4 * cfg.s_max))


def expected_loop_count(cfg: LoopConfig) -> Fraction:
    """E[S] under the configured sampler, exact for uniform and fixed."""
    if cfg.loop_sampler == "uniform":
        return Fraction(cfg.s_max + 1, 2)
    if cfg.loop_sampler == "fixed":
        return Fraction(cfg.fixed_loops)
    if cfg.s_max == 1 and cfg.lognormal_mu is None:
        return Fraction(1)
    mean = 1.0 + math.exp(_lognormal_mu(cfg) + cfg.lognormal_sigma ** 2 / 2.0)
    # truncation to [1, 4 * S_max] is ignored here
    return Fraction(mean).limit_denominator(10 ** 6)


def effective_depth(cfg: LoopConfig, S: int) -> int:
    if S < 1:
        raise ConfigError("S", "loop count must be >= 1")
    return cfg.n_h + S * cfg.n_m + cfg.n_o


# -- building blocks -------------------------------------------------------

@dataclass
class Conditioning:
    """Timestep modulation computed once per forward and reused by every loop."""

    positions: np.ndarray
    layer_mods: List[Tuple[Tensor, ...]]
    final_mods: Tuple[Tensor, Tensor]

    def rows(self, idx: np.ndarray) -> "Conditioning":
        def pick(t: Tensor) -> Tensor:
            return Tensor(t.data[idx])

        return Conditioning(
            self.positions,
            [tuple(pick(m) for m in mods) for mods in self.layer_mods],
            (pick(self.final_mods[0]), pick(self.final_mods[1])),
        )


def timestep_features(t: np.ndarray, dim: int, dtype=np.float64) -> np.ndarray:
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    args = 1000.0 * np.asarray(t, dtype=np.float64)[:, None] * freqs[None, :]
    return np.concatenate([np.cos(args), np.sin(args)], axis=-1).astype(dtype)


def _split(x: Tensor, parts: int, width: int) -> Tuple[Tensor, ...]:
    return tuple(T.slice_last(x, i * width, (i + 1) * width) for i in range(parts))


def condition(params: ModelParams, model_cfg: ModelConfig, t: np.ndarray, length: int) -> Conditioning:
    d = model_cfg.d_model
    batch = t.shape[0]
    feats = Tensor(timestep_features(t, model_cfg.time_freq_dim, model_cfg.dtype))
    emb = T.silu(feats @ params.time_w1 + params.time_b1) @ params.time_w2 + params.time_b2
    cond = T.silu(emb)
    layer_mods = []
    for layer in params.layers:
        mod = T.reshape(cond @ layer.ada_w + layer.ada_b, (batch, 1, 6 * d))
        layer_mods.append(_split(mod, 6, d))
    final = T.reshape(cond @ params.final_ada_w + params.final_ada_b, (batch, 1, 2 * d))
    shift, scale = _split(final, 2, d)
    return Conditioning(np.arange(length), layer_mods, (shift, scale))


def _attention(layer: LayerParams, h: Tensor, positions: np.ndarray, n_heads: int) -> Tuple[Tensor, np.ndarray]:
    batch, length, d = h.shape
    dh = d // n_heads

    def heads(w: Tensor, rotate: bool) -> Tensor:
        x = T.reshape(h @ w, (batch, length, n_heads, dh))
        if rotate:
            x = T.rotary_apply(x, positions)
        return T.transpose(x, (0, 2, 1, 3))

    q, k, v = heads(layer.wq, True), heads(layer.wk, True), heads(layer.wv, False)
    scores = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    probs = T.softmax(scores, axis=-1)
    ctx = T.transpose(T.matmul(probs, v), (0, 2, 1, 3))
    return T.reshape(ctx, (batch, length, d)) @ layer.wo, probs.data


def apply_layer(
    layer: LayerParams, mods: Tuple[Tensor, ...], h: Tensor, positions: np.ndarray, n_heads: int
) -> Tuple[Tensor, np.ndarray]:
    shift1, scale1, gate1, shift2, scale2, gate2 = mods
    attn, probs = _attention(layer, T.layer_norm_adaptive(h, scale1, shift1), positions, n_heads)
    h = h + gate1 * attn
    inner = T.layer_norm_adaptive(h, scale2, shift2)
    mlp = T.gelu(inner @ layer.w1 + layer.b1) @ layer.w2 + layer.b2
    return h + gate2 * mlp, probs


def run_layers(
    params: ModelParams,
    model_cfg: ModelConfig,
    cond: Conditioning,
    h: Tensor,
    indices: Sequence[int],
    loop_index: int = 0,
    attention: Optional[Dict[Tuple[int, int], np.ndarray]] = None,
) -> Tensor:
    for i in indices:
        h, probs = apply_layer(params.layers[i], cond.layer_mods[i], h, cond.positions, model_cfg.n_heads)
        if attention is not None:
            attention[(i, loop_index)] = probs
    return h


def output_logits(params: ModelParams, cond: Conditioning, h: Tensor) -> Tensor:
    shift, scale = cond.final_mods
    return T.layer_norm_adaptive(h, scale, shift) @ params.out_w + params.out_b


def validate_inputs(model_cfg: ModelConfig, x_t, t) -> Tuple[np.ndarray, np.ndarray]:
    x = np.atleast_2d(np.asarray(x_t, dtype=np.int64))
    if x.size and (x.min() < 0 or x.max() > model_cfg.mask_id):
        raise DomainError(f"tokens must lie in [0, {model_cfg.mask_id}]")
    times = np.broadcast_to(np.asarray(t, dtype=np.float64), (x.shape[0],)).copy()
    if np.any(times < 0.0) or np.any(times > 1.0):
        raise DomainError("t must lie in [0, 1]")
    return x, times


def embed_tokens(params: ModelParams, x: np.ndarray) -> Tensor:
    return T.embedding(params.tok_emb, x)


def inject_mask_noise(
    params: ModelParams,
    model_cfg: ModelConfig,
    loop_cfg: LoopConfig,
    x_t,
    rng: Optional[np.random.Generator] = None,
) -> Tensor:
    """Embed x_t; with an rng (training) add N(0, mask_noise_std^2) at masked positions only."""
    x = np.atleast_2d(np.asarray(x_t, dtype=np.int64))
    emb = embed_tokens(params, x)
    if rng is None or loop_cfg.mask_noise_std <= 0.0:
        return emb
    masked = x == model_cfg.mask_id
    noise = np.zeros(emb.shape, dtype=emb.data.dtype)
    noise[masked] = rng.normal(0.0, loop_cfg.mask_noise_std, size=(int(masked.sum()), emb.shape[-1]))
    return emb + noise


def forward(
    params: ModelParams,
    model_cfg: ModelConfig,
    loop_cfg: LoopConfig,
    x_t,
    t,
    S: int,
    retain: Optional[RetentionFlags] = None,
    rng: Optional[np.random.Generator] = None,
    training: bool = False,
) -> ForwardRecord:
    """Head once, shared mid-block S times, tail once.

    `x_t` is [L] or [B, L]; `t` a scalar or one value per row. S may exceed
    the training S_max.
    """
    if S < 1:
        raise ConfigError("S", f"loop count must be >= 1, got {S}")
    retain = retain or RetentionFlags()
    x, times = validate_inputs(model_cfg, x_t, t)
    cond = condition(params, model_cfg, times, x.shape[1])
    attention = {} if retain.attention else None
    hidden: List[np.ndarray] = []

    h = inject_mask_noise(params, model_cfg, loop_cfg, x, rng if training else None)
    h = run_layers(params, model_cfg, cond, h, loop_cfg.head_layers, 0, attention)
    if retain.hidden:
        hidden.append(h.data)
    for k in range(1, S + 1):
        h = run_layers(params, model_cfg, cond, h, loop_cfg.mid_layers, k, attention)
        if retain.hidden:
            hidden.append(h.data)
    h = run_layers(params, model_cfg, cond, h, loop_cfg.tail_layers, 0, attention)
    return ForwardRecord(output_logits(params, cond, h), hidden, attention or {}, S)


def plain_forward(
    params: ModelParams,
    model_cfg: ModelConfig,
    x_t,
    t,
    retain: Optional[RetentionFlags] = None,
) -> ForwardRecord:
    """Every stored layer applied once, in order."""
    retain = retain or RetentionFlags()
    x, times = validate_inputs(model_cfg, x_t, t)
    cond = condition(params, model_cfg, times, x.shape[1])
    attention = {} if retain.attention else None
    h = embed_tokens(params, x)
    h = run_layers(params, model_cfg, cond, h, range(len(params.layers)), 0, attention)
    return ForwardRecord(output_logits(params, cond, h), [], attention or {}, 1)
