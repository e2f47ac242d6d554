"""Masking forward process and reverse transitions of a masked diffusion model.

Tokens live in {0..V-1}; the mask id is V. The schedule is linear,
alpha(t) = 1 - t, so a token survives to time t with probability 1 - t.

API:
- NoiseSchedule, LINEAR
- alpha_at(sched, t), nelbo_weight(sched, t), remain_masked_prob(sched, s, t)
- forward_mask(x0, t, rng, mask_id=..., maskable=None, force_mask=None)
- reverse_step(x_t, probs, s, t, rng, policy, mask_id=..., final=False)
- TrainBatch: clean tokens plus per-position masking roles
"""
from __future__ import annotations
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from .errors import ContractError, DomainError

RealLike = Union[float, np.ndarray]


@dataclass(frozen=True)
class NoiseSchedule:
    kind: str = "linear"

    def alpha(self, t: RealLike) -> RealLike:
        return 1.0 - t

    def alpha_prime(self, t: RealLike) -> RealLike:
        return -np.ones_like(t, dtype=np.float64) if isinstance(t, np.ndarray) else -1.0


LINEAR = NoiseSchedule()


def _check_unit(name: str, t: RealLike) -> None:
    arr = np.asarray(t, dtype=np.float64)
    if np.any(arr < 0.0) or np.any(arr > 1.0) or np.any(np.isnan(arr)):
        raise DomainError(f"{name} must lie in [0, 1], got {t}")


def alpha_at(sched: NoiseSchedule, t: RealLike) -> RealLike:
    _check_unit("t", t)
    return sched.alpha(t)


def nelbo_weight(sched: NoiseSchedule, t: RealLike) -> RealLike:
    """|alpha'(t)| / (1 - alpha(t)); 1/t for the linear schedule."""
    _check_unit("t", t)
    if np.any(np.asarray(t) <= 0.0):
        raise DomainError("nelbo weight diverges at t = 0")
    return np.abs(sched.alpha_prime(t)) / (1.0 - sched.alpha(t))


def remain_masked_prob(sched: NoiseSchedule, s: float, t: float) -> float:
    """Probability that a position masked at t is still masked at s < t."""
    _check_unit("s", s)
    _check_unit("t", t)
    if not s < t:
        raise DomainError(f"need s < t, got s={s}, t={t}")
    alpha_t = sched.alpha(t)
    if alpha_t >= 1.0:
        raise DomainError(f"alpha({t}) = 1 leaves nothing masked")
    return (1.0 - sched.alpha(s)) / (1.0 - alpha_t)


@dataclass
class TrainBatch:
    """Clean sequences with masking roles.

    maskable: positions the forward process may corrupt.
    force_mask: positions that are always masked (and normally unsupervised).
    supervise: positions that contribute to the loss when masked.
    """

    tokens: np.ndarray
    maskable: np.ndarray
    force_mask: np.ndarray
    supervise: np.ndarray

    @classmethod
    def from_tokens(cls, tokens) -> "TrainBatch":
        tokens = np.atleast_2d(np.asarray(tokens, dtype=np.int64))
        every = np.ones(tokens.shape, dtype=bool)
        return cls(tokens, every, np.zeros(tokens.shape, dtype=bool), every.copy())

    def __len__(self) -> int:
        return int(self.tokens.shape[0])


def forward_mask(
    x0,
    t: RealLike,
    rng: np.random.Generator,
    *,
    mask_id: int,
    maskable: Optional[np.ndarray] = None,
    force_mask: Optional[np.ndarray] = None,
    sched: NoiseSchedule = LINEAR,
) -> np.ndarray:
    """Corrupt each maskable position independently with probability 1 - alpha(t).

    `t` is a scalar or one value per row of `x0`.
    """
    x0 = np.asarray(x0)
    if np.any(x0 == mask_id):
        raise ContractError("forward_mask input already contains mask ids")
    alpha = np.asarray(alpha_at(sched, t), dtype=np.float64)
    if alpha.ndim == 1 and x0.ndim == 2:
        alpha = alpha[:, None]
    drawn = rng.random(x0.shape)
    masked = drawn >= alpha
    if maskable is not None:
        masked &= maskable
    if force_mask is not None:
        masked |= force_mask
    return np.where(masked, mask_id, x0)


def _check_rows(probs: np.ndarray, eligible: np.ndarray) -> None:
    rows = probs[eligible]
    if rows.size and np.any(np.abs(rows.sum(axis=-1) - 1.0) > 1e-6):
        raise ContractError("reverse_step probabilities at masked positions must sum to 1")


def _sample_categorical(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    cdf = np.cumsum(probs, axis=-1)
    draws = rng.random(probs.shape[:-1])
    # first index whose cdf exceeds the draw never has zero probability
    picked = (cdf <= draws[..., None]).sum(axis=-1)
    return np.minimum(picked, probs.shape[-1] - 1)


def _ranked_commit(eligible: np.ndarray, score: np.ndarray, budget: int, final: bool) -> np.ndarray:
    """Pick up to `budget` eligible positions per row, best score first, lowest index on ties."""
    chosen = np.zeros_like(eligible)
    for row in range(eligible.shape[0]):
        idx = np.flatnonzero(eligible[row])
        if not idx.size:
            continue
        if not final:
            order = np.argsort(-score[row, idx], kind="stable")
            idx = idx[order[:budget]]
        chosen[row, idx] = True
    return chosen


def reverse_step(
    x_t,
    probs: np.ndarray,
    s: float,
    t: float,
    rng: np.random.Generator,
    policy=None,
    *,
    mask_id: int,
    final: bool = False,
    sched: NoiseSchedule = LINEAR,
) -> np.ndarray:
    """One reverse transition from time t to time s.

    `policy` is any object with `kind` (and `k` / `tokens_per_step`);
    None means ancestral_random. Unmasked positions are copied; committed
    positions never return to the mask id. With `final` every remaining
    mask is committed.
    """
    x_t = np.asarray(x_t)
    single = x_t.ndim == 1
    xt = np.atleast_2d(x_t)
    probs = probs[None] if single else probs
    eligible = xt == mask_id
    _check_rows(probs, eligible)
    kind = getattr(policy, "kind", "ancestral_random")
    out = xt.copy()

    if kind == "ancestral_random":
        stay = 0.0 if (final or s <= 0.0) else remain_masked_prob(sched, s, t)
        keep_masked = rng.random(xt.shape) < stay
        draws = _sample_categorical(probs, rng)
        commit = eligible & ~keep_masked
        out[commit] = draws[commit]
    elif kind == "topk_confidence":
        confidence = probs.max(axis=-1)
        commit = _ranked_commit(eligible, confidence, int(policy.k), final)
        out[commit] = probs.argmax(axis=-1)[commit]
    elif kind == "fixed_left_to_right":
        position_score = -np.broadcast_to(np.arange(xt.shape[1], dtype=np.float64), xt.shape)
        commit = _ranked_commit(eligible, position_score, int(policy.tokens_per_step), final)
        out[commit] = probs.argmax(axis=-1)[commit]
    else:
        raise ContractError(f"unknown unmasking policy {kind!r}")
    return out[0] if single else out
