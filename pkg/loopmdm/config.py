"""Run configuration.

Behavior:
- Start from the dataclass defaults.
- If a preset name is given (`sudoku4`, `clique5`, `lm_grammar`), apply it.
- If a config file is given, load that flat JSON object and apply it last.

The file format is the canonical flat form written by `dump_config`: one
JSON object, dotted keys (`"loop.s_max": 6`), sorted. Unknown keys or
values of the wrong type raise ConfigError naming the key. The model's
vocabulary size and sequence length are derived from the task.

RUN_THREADS (see `loopmdm.workers`) is the only environment variable read.
"""
from __future__ import annotations
from dataclasses import dataclass, field
from pathlib import Path
import json
from typing import Any, Dict, Optional

from . import fs
from .canonical import canonical_json, from_flat, to_flat
from .errors import ConfigError
from .model import LoopConfig, ModelConfig
from .sampler import SamplerConfig
from .tasks import TaskConfig, task_seq_len, task_vocab_size
from .trainer import TrainConfig


@dataclass
class RunConfig:
    task: TaskConfig = field(default_factory=TaskConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    loop: LoopConfig = field(default_factory=LoopConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    output_dir: str = "runs/latest"
    # dataset generation seed; training and sampling have their own
    seed: int = 0

    def validate(self) -> None:
        self.task.validate()
        self.model.validate()
        self.loop.validate()
        self.train.validate()
        self.sampler.validate()
        if self.model.vocab_size != task_vocab_size(self.task):
            raise ConfigError(
                "model.vocab_size",
                f"{self.model.vocab_size} does not match task {self.task.name!r} ({task_vocab_size(self.task)})",
            )
        if self.model.seq_len != task_seq_len(self.task):
            raise ConfigError(
                "model.seq_len",
                f"{self.model.seq_len} does not match task {self.task.name!r} ({task_seq_len(self.task)})",
            )


PRESETS: Dict[str, Dict[str, Any]] = {
    "sudoku4": {
        "task.name": "sudoku",
        "task.sudoku_grid": 4,
        "task.n_train": 20000,
        "task.n_eval": 1000,
        "model.d_model": 128,
        "model.n_heads": 8,
        "loop.n_layers_total": 1,
        "loop.n_m": 1,
        "loop.s_max": 6,
        "train.batch_size": 64,
        "train.total_steps": 3000,
        "train.learning_rate": 1e-3,
        "train.warmup_steps": 100,
        "train.ema_decay": 0.99,
        "sampler.policy": "fixed_left_to_right",
        "sampler.tokens_per_step": 1,
        "sampler.n_steps": 16,
        "sampler.loops": 6,
        "output_dir": "runs/sudoku4",
    },
    "clique5": {
        "task.name": "clique",
        "task.clique_n": 5,
        "task.clique_k": 3,
        "task.n_train": 20000,
        "task.n_eval": 1000,
        "model.d_model": 64,
        "model.n_heads": 4,
        "loop.n_layers_total": 1,
        "loop.n_m": 1,
        "loop.s_max": 6,
        "train.batch_size": 32,
        "train.total_steps": 3000,
        "train.learning_rate": 1e-3,
        "train.warmup_steps": 100,
        "train.ema_decay": 0.99,
        "sampler.loops": 6,
        "output_dir": "runs/clique5",
    },
    "lm_grammar": {
        "task.name": "lm",
        "task.corpus.source": "synthetic_grammar",
        "task.corpus.seq_len": 32,
        "task.n_train": 8000,
        "task.n_eval": 500,
        "model.d_model": 64,
        "model.n_heads": 4,
        "loop.n_layers_total": 2,
        "loop.n_m": 2,
        "loop.s_max": 6,
        "train.batch_size": 32,
        "train.total_steps": 3000,
        "train.learning_rate": 1e-3,
        "train.warmup_steps": 100,
        "train.ema_decay": 0.99,
        "sampler.policy": "ancestral_random",
        "sampler.n_steps": 32,
        "sampler.loops": 6,
        "output_dir": "runs/lm_grammar",
    },
}

# printed next to `--dump-defaults`
UNITS: Dict[str, str] = {
    "task.n_train": "instances",
    "task.n_eval": "instances",
    "task.corpus.seq_len": "tokens",
    "model.seq_len": "tokens",
    "model.vocab_size": "tokens",
    "loop.s_max": "loop iterations",
    "train.batch_size": "sequences",
    "train.total_steps": "optimizer steps",
    "train.warmup_steps": "optimizer steps",
    "train.checkpoint_every": "optimizer steps (0 disables)",
    "train.t_min": "diffusion time",
    "train.ema_decay": "probability",
    "task.givens_fraction": "probability",
    "task.planted_fraction": "probability",
    "task.edge_prob": "probability",
    "sampler.n_steps": "reverse steps",
    "sampler.loops": "loop iterations",
    "sampler.adaptive_budget": "loop iterations",
    "sampler.n_samples": "sequences",
}


def _load_json_file(path: Path) -> Dict[str, Any]:
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except OSError as exc:
        raise ConfigError(str(path), f"cannot read config file: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(str(path), f"not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(str(path), "config file must hold one JSON object")
    return data


def derive_task_dims(cfg: RunConfig, explicit: Optional[Dict[str, Any]] = None) -> RunConfig:
    """Fill model.vocab_size / seq_len from the task unless set explicitly."""
    explicit = explicit or {}
    if "model.vocab_size" not in explicit:
        cfg.model.vocab_size = task_vocab_size(cfg.task)
    if "model.seq_len" not in explicit:
        cfg.model.seq_len = task_seq_len(cfg.task)
    return cfg


def config_from_flat(flat: Dict[str, Any], base: Optional[RunConfig] = None) -> RunConfig:
    return derive_task_dims(from_flat(RunConfig, flat, base=base or RunConfig()), flat)


def load_config(config_path: Optional[str] = None, preset: Optional[str] = None, validate: bool = True) -> RunConfig:
    """Load configuration from (1) defaults, (2) a named preset, (3) a JSON file."""
    cfg = RunConfig()
    if preset:
        if preset not in PRESETS:
            raise ConfigError("preset", f"unknown preset {preset!r}; expected one of {sorted(PRESETS)}")
        cfg = from_flat(RunConfig, PRESETS[preset], base=cfg)

    explicit: Dict[str, Any] = {}
    if config_path:
        explicit = _load_json_file(Path(config_path))
        cfg = from_flat(RunConfig, explicit, base=cfg)
    derive_task_dims(cfg, explicit)
    if validate:
        cfg.validate()
    return cfg


def dump_config(cfg: RunConfig) -> str:
    return canonical_json(cfg)


def dump_defaults(preset: Optional[str] = None) -> str:
    return dump_config(load_config(preset=preset, validate=False))


def save_config(cfg: RunConfig, path: Path) -> None:
    fs.atomic_write_text(Path(path), dump_config(cfg))


def flat_config(cfg: RunConfig) -> Dict[str, Any]:
    return to_flat(cfg)
