"""Task metrics for a trained model.

- heldout_nelbo: Monte-Carlo NELBO per token on the eval split at a fixed S
- sudoku_solve_rate: prompt with the givens, generate, compare to the solution
- clique_accuracy: one forward pass at t = 1 with workspace and answer
  masked; the label is FALSE vs TRUE at the answer position
- evaluate_loops / adaptive_sweep: the tables behind `eval`
"""
from __future__ import annotations
from dataclasses import dataclass
import logging
from typing import Any, Dict, List, Optional, Sequence, Union

import numpy as np
from tqdm import tqdm

from . import tensor as T
from .analysis import Scorer, generative_perplexity
from .model import LoopConfig, ModelConfig, ModelParams, forward
from .sampler import (
    AdaptiveLoopPolicy,
    SamplerConfig,
    UnmaskPolicy,
    adaptive_forward,
    generate_batch,
    mean_loops,
)
from .tasks import SequenceDataset, TaskConfig, clique_labels, sudoku_instances
from .tasks.clique import answer_from_probs
from .tasks.sudoku import chance_solve_rate, decode_sudoku, solve_rate
from .trainer import nelbo_loss
from .workers import parallel_map, shard_rngs

EVAL_BATCH = 64
Loops = Union[int, AdaptiveLoopPolicy]


@dataclass
class Model:
    params: ModelParams
    model_cfg: ModelConfig
    loop_cfg: LoopConfig


def _chunks(n: int, size: int = EVAL_BATCH) -> List[np.ndarray]:
    return [np.arange(i, min(i + size, n)) for i in range(0, n, size)]


def heldout_nelbo(model: Model, data: SequenceDataset, loops: int, seed: int, t_min: float = 1e-3) -> float:
    """Mean NELBO per token; the masking draws depend only on `seed`."""
    chunks = _chunks(len(data))
    rngs = shard_rngs(np.random.default_rng(seed), len(chunks))

    def run(job) -> float:
        idx, rng = job
        loss = nelbo_loss(
            model.params, model.model_cfg, model.loop_cfg, data.batch(idx), rng,
            loops=loops, training=False, t_min=t_min,
        )
        return float(loss.item()) * len(idx)

    totals = parallel_map(run, list(zip(chunks, rngs)))
    return float(np.sum(totals) / len(data))


def _generate(model: Model, prompts: np.ndarray, policy: UnmaskPolicy, n_steps: int, loops: Loops, seed: int):
    chunks = _chunks(len(prompts))
    rngs = shard_rngs(np.random.default_rng(seed), len(chunks))

    def run(job):
        idx, rng = job
        return generate_batch(
            model.params, model.model_cfg, model.loop_cfg, policy, n_steps, loops,
            prompts.shape[1], rng, prompt=prompts[idx],
        )

    return [traj for part in parallel_map(run, list(zip(chunks, rngs))) for traj in part]


def sudoku_solve_rate(
    model: Model,
    task_cfg: TaskConfig,
    data: SequenceDataset,
    loops: Loops,
    seed: int,
    policy: Optional[UnmaskPolicy] = None,
    n_steps: Optional[int] = None,
) -> Dict[str, float]:
    """Left-to-right, one cell per step, unless another policy is given."""
    policy = policy or UnmaskPolicy("fixed_left_to_right", tokens_per_step=1)
    n_steps = n_steps or data.seq_len
    trajectories = _generate(model, data.prompts(model.model_cfg.mask_id), policy, n_steps, loops, seed)
    grids = [decode_sudoku(traj.final, task_cfg.sudoku_grid) for traj in trajectories]
    instances = sudoku_instances(task_cfg, data)
    return {
        "solve_rate": solve_rate(grids, instances),
        "chance": chance_solve_rate(instances),
        "mean_loops": mean_loops(trajectories),
    }


def clique_accuracy(model: Model, data: SequenceDataset, loops: Loops) -> Dict[str, float]:
    prompts = data.prompts(model.model_cfg.mask_id)
    labels = clique_labels(data)

    def run(idx: np.ndarray):
        if isinstance(loops, AdaptiveLoopPolicy):
            record, used = adaptive_forward(model.params, model.model_cfg, model.loop_cfg, prompts[idx], 1.0, loops)
        else:
            record = forward(model.params, model.model_cfg, model.loop_cfg, prompts[idx], 1.0, int(loops))
            used = np.full(len(idx), int(loops))
        probs = T.softmax(record.logits, axis=-1).data[:, -1, :]
        return [answer_from_probs(p) for p in probs], used

    parts = parallel_map(run, _chunks(len(data)))
    predicted = np.asarray([p for part in parts for p in part[0]])
    used = np.concatenate([part[1] for part in parts])
    return {"accuracy": float(np.mean(predicted == labels)), "mean_loops": float(used.mean())}


def task_metrics(
    model: Model,
    task_cfg: TaskConfig,
    data: SequenceDataset,
    loops: Loops,
    sampler: SamplerConfig,
    scorer: Optional[Scorer] = None,
) -> Dict[str, float]:
    if task_cfg.name == "sudoku":
        policy = sampler.unmask_policy()
        return sudoku_solve_rate(model, task_cfg, data, loops, sampler.seed, policy, sampler.n_steps)
    if task_cfg.name == "clique":
        return clique_accuracy(model, data, loops)
    if scorer is None:
        return {}
    prompts = np.full((sampler.n_samples, data.seq_len), model.model_cfg.mask_id, dtype=np.int64)
    trajectories = _generate(model, prompts, sampler.unmask_policy(), sampler.n_steps, loops, sampler.seed)
    samples = np.stack([traj.final for traj in trajectories])
    return {
        "gen_ppl": generative_perplexity(samples, scorer, model.model_cfg.vocab_size),
        "mean_loops": mean_loops(trajectories),
    }


def evaluate_loops(
    model: Model,
    task_cfg: TaskConfig,
    data: SequenceDataset,
    loops_list: Sequence[int],
    sampler: SamplerConfig,
    scorer: Optional[Scorer] = None,
    with_nelbo: bool = True,
    t_min: float = 1e-3,
) -> List[Dict[str, Any]]:
    """One row per loop count."""
    rows = []
    for S in tqdm(loops_list, desc="eval", unit="S", leave=False):
        row: Dict[str, Any] = {"loops": int(S)}
        if with_nelbo:
            row["nelbo"] = heldout_nelbo(model, data, int(S), sampler.seed, t_min)
        row.update(task_metrics(model, task_cfg, data, int(S), sampler, scorer))
        logging.info("eval: S=%d %s", S, {k: round(v, 4) for k, v in row.items() if isinstance(v, float)})
        rows.append(row)
    return rows


def adaptive_sweep(
    model: Model,
    task_cfg: TaskConfig,
    data: SequenceDataset,
    epsilons: Sequence[float],
    budget: int,
    sampler: SamplerConfig,
    norm_scope: str = "all_positions",
    scorer: Optional[Scorer] = None,
) -> List[Dict[str, Any]]:
    """(epsilon, mean loops, task metric) rows for a grid of thresholds."""
    rows = []
    for eps in tqdm(epsilons, desc="sweep", unit="eps", leave=False):
        policy = AdaptiveLoopPolicy(float(eps), int(budget), norm_scope)
        row: Dict[str, Any] = {"epsilon": float(eps), "budget": int(budget)}
        row.update(task_metrics(model, task_cfg, data, policy, sampler, scorer))
        logging.info("eval: epsilon=%g mean_loops=%.3f", eps, row.get("mean_loops", float("nan")))
        rows.append(row)
    return rows
