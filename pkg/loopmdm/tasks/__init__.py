"""Task datasets with exact oracles.

Every task is turned into a `SequenceDataset`: clean token rows plus a
per-position role (`tasks.roles`). Roles decide training-time masking:

- GIVEN positions (Sudoku givens, clique edges) are never masked
- OPEN and ANSWER positions are masked by the forward process
- WORKSPACE positions are masked by the forward process when workspace
  supervision is on; otherwise they are always masked and carry no loss
"""
from __future__ import annotations
from dataclasses import dataclass, field, replace
import logging
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np

from ..canonical import to_flat
from ..diffusion import TrainBatch
from ..errors import ConfigError, DatasetError
from . import clique, sudoku
from .corpus import CorpusConfig, load_corpus
from .dataset_io import read_dataset, write_dataset
from .roles import ROLE_ANSWER, ROLE_GIVEN, ROLE_OPEN, ROLE_WORKSPACE

TASK_NAMES = ("sudoku", "clique", "lm")
TRAIN_FILE = "train.txt"
EVAL_FILE = "eval.txt"


@dataclass
class TaskConfig:
    name: str = "sudoku"
    n_train: int = 20000
    n_eval: int = 1000
    # directory holding train.txt / eval.txt written by `gen-data`; None generates in memory
    data_dir: Optional[str] = None
    sudoku_grid: int = 4
    givens_fraction: float = 0.5
    clique_n: int = 5
    clique_k: int = 3
    planted_fraction: float = 0.5
    edge_prob: float = 0.4
    workspace: bool = True
    supervise_workspace: bool = True
    max_workspace: int = clique.MAX_WORKSPACE
    corpus: CorpusConfig = field(default_factory=CorpusConfig)

    def validate(self) -> None:
        if self.name not in TASK_NAMES:
            raise ConfigError("task.name", f"expected one of {TASK_NAMES}")
        if self.n_train < 1:
            raise ConfigError("task.n_train", "must be >= 1")
        if self.n_eval < 1:
            raise ConfigError("task.n_eval", "must be >= 1")
        if self.name == "sudoku":
            sudoku.box_shape(self.sudoku_grid)
            if not 0.0 < self.givens_fraction < 1.0:
                raise ConfigError("task.givens_fraction", "must lie in (0, 1)")
        elif self.name == "clique":
            if not self.clique_n >= self.clique_k >= 2:
                raise ConfigError("task.clique_k", f"need n >= k >= 2, got n={self.clique_n}, k={self.clique_k}")
            if self.workspace and self.clique_n ** self.clique_k > self.max_workspace:
                raise ConfigError(
                    "task.clique_n",
                    f"workspace n^k = {self.clique_n ** self.clique_k} exceeds the cap of {self.max_workspace}",
                )
            if not 0.0 <= self.edge_prob <= 1.0:
                raise ConfigError("task.edge_prob", "must lie in [0, 1]")
        else:
            self.corpus.validate()


def task_vocab_size(cfg: TaskConfig) -> int:
    if cfg.name == "sudoku":
        return cfg.sudoku_grid
    if cfg.name == "clique":
        return clique.VOCAB_SIZE
    return len(cfg.corpus.alphabet) + 2


def task_seq_len(cfg: TaskConfig) -> int:
    if cfg.name == "sudoku":
        return cfg.sudoku_grid * cfg.sudoku_grid
    if cfg.name == "clique":
        return clique.clique_sequence_length(cfg.clique_n, cfg.clique_k, cfg.workspace)
    return cfg.corpus.seq_len


@dataclass
class SequenceDataset:
    tokens: np.ndarray
    roles: np.ndarray
    maskable: np.ndarray
    force_mask: np.ndarray
    supervise: np.ndarray

    @classmethod
    def from_roles(cls, tokens: np.ndarray, roles: np.ndarray, supervise_workspace: bool = True) -> "SequenceDataset":
        tokens = np.asarray(tokens, dtype=np.int64).reshape(len(tokens), -1)
        roles = np.asarray(roles, dtype=np.int64).reshape(tokens.shape)
        free = (roles == ROLE_OPEN) | (roles == ROLE_ANSWER)
        workspace = roles == ROLE_WORKSPACE
        if supervise_workspace:
            return cls(tokens, roles, free | workspace, np.zeros_like(free), free | workspace)
        return cls(tokens, roles, free, workspace, free.copy())

    def __len__(self) -> int:
        return int(self.tokens.shape[0])

    @property
    def seq_len(self) -> int:
        return int(self.tokens.shape[1])

    def batch(self, idx) -> TrainBatch:
        idx = np.asarray(idx, dtype=np.int64)
        return TrainBatch(self.tokens[idx], self.maskable[idx], self.force_mask[idx], self.supervise[idx])

    def sample_batch(self, rng: np.random.Generator, batch_size: int) -> TrainBatch:
        return self.batch(rng.integers(0, len(self), size=batch_size))

    def prompts(self, mask_id: int) -> np.ndarray:
        """Inference inputs: every position the model must fill holds the mask id."""
        return np.where(self.maskable | self.force_mask, mask_id, self.tokens)

    def subset(self, idx) -> "SequenceDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return SequenceDataset(
            self.tokens[idx], self.roles[idx], self.maskable[idx], self.force_mask[idx], self.supervise[idx]
        )


def _sudoku_rows(instances: List[sudoku.SudokuInstance]) -> Tuple[np.ndarray, np.ndarray]:
    tokens, roles = [], []
    for inst in instances:
        tok, given = sudoku.encode_sudoku(inst)
        tokens.append(tok)
        roles.append(np.where(given, ROLE_GIVEN, ROLE_OPEN))
    return np.stack(tokens), np.stack(roles)


def _clique_rows(instances: List[clique.CliqueInstance], workspace: bool) -> Tuple[np.ndarray, np.ndarray]:
    pairs = [clique.encode_clique(inst, workspace) for inst in instances]
    return np.stack([p[0] for p in pairs]), np.stack([p[1] for p in pairs])


def generate_rows(cfg: TaskConfig, n_instances: int, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    """(tokens, roles) for `n_instances` fresh sudoku or clique instances."""
    if cfg.name == "sudoku":
        return _sudoku_rows(sudoku.gen_sudoku(cfg.sudoku_grid, n_instances, cfg.givens_fraction, rng))
    if cfg.name == "clique":
        instances = clique.gen_clique(
            cfg.clique_n, cfg.clique_k, n_instances, cfg.planted_fraction, rng,
            edge_prob=cfg.edge_prob,
            max_workspace=cfg.max_workspace if cfg.workspace else cfg.clique_n ** cfg.clique_k,
        )
        return _clique_rows(instances, cfg.workspace)
    raise ConfigError("task.name", f"task {cfg.name!r} has no instance generator")


def _corpus_rows(cfg: TaskConfig) -> Tuple[Tuple[np.ndarray, np.ndarray], Tuple[np.ndarray, np.ndarray]]:
    wanted = cfg.n_train + cfg.n_eval
    corpus_cfg = cfg.corpus
    if corpus_cfg.source == "synthetic_grammar":
        corpus_cfg = replace(corpus_cfg, n_sequences=wanted)
    stream = load_corpus(corpus_cfg)
    if len(stream) < 2:
        raise DatasetError(str(corpus_cfg.path or corpus_cfg.source), 0,
                           f"corpus yields {len(stream)} sequence(s), need at least 2")
    n_eval = cfg.n_eval
    if len(stream) < wanted:
        n_eval = max(1, len(stream) * cfg.n_eval // wanted)
        logging.warning("tasks: corpus holds %d sequences, using %d for evaluation", len(stream), n_eval)
    seqs = stream.sequences
    roles = np.full(seqs.shape, ROLE_OPEN, dtype=np.int64)
    cut = len(seqs) - n_eval
    return (seqs[:cut][:cfg.n_train], roles[:cut][:cfg.n_train]), (seqs[cut:], roles[cut:])


def build_rows(cfg: TaskConfig, seed: int):
    """((train tokens, roles), (eval tokens, roles)) generated from `seed`."""
    cfg.validate()
    if cfg.name == "lm":
        return _corpus_rows(cfg)
    rng = np.random.default_rng(seed)
    tokens, roles = generate_rows(cfg, cfg.n_train + cfg.n_eval, rng)
    return (tokens[:cfg.n_train], roles[:cfg.n_train]), (tokens[cfg.n_train:], roles[cfg.n_train:])


def _check_header(cfg: TaskConfig, header: dict, path: Path) -> None:
    if header["task"] != cfg.name:
        raise DatasetError(str(path), 1, f"dataset is for task {header['task']!r}, config selects {cfg.name!r}")
    if int(header["vocab_size"]) != task_vocab_size(cfg) or int(header["seq_len"]) != task_seq_len(cfg):
        raise DatasetError(
            str(path), 1,
            f"dataset has vocab {header['vocab_size']} / length {header['seq_len']}, "
            f"config expects {task_vocab_size(cfg)} / {task_seq_len(cfg)}",
        )


def load_split(cfg: TaskConfig, path: Path) -> SequenceDataset:
    header, tokens, roles = read_dataset(path)
    _check_header(cfg, header, Path(path))
    return SequenceDataset.from_roles(tokens, roles, cfg.supervise_workspace)


def build_datasets(cfg: TaskConfig, seed: int) -> Tuple[SequenceDataset, SequenceDataset]:
    """(train, eval) for the configured task, read from `data_dir` when set."""
    cfg.validate()
    if cfg.data_dir:
        base = Path(cfg.data_dir)
        return load_split(cfg, base / TRAIN_FILE), load_split(cfg, base / EVAL_FILE)
    (tr_tok, tr_rol), (ev_tok, ev_rol) = build_rows(cfg, seed)
    logging.info("tasks: %s train=%d eval=%d seq_len=%d", cfg.name, len(tr_tok), len(ev_tok), task_seq_len(cfg))
    return (
        SequenceDataset.from_roles(tr_tok, tr_rol, cfg.supervise_workspace),
        SequenceDataset.from_roles(ev_tok, ev_rol, cfg.supervise_workspace),
    )


def write_datasets(cfg: TaskConfig, seed: int, out_dir: Path) -> Tuple[Path, Path]:
    (tr_tok, tr_rol), (ev_tok, ev_rol) = build_rows(cfg, seed)
    config = dict(to_flat(cfg, "task."), seed=seed)
    vocab = task_vocab_size(cfg)
    out_dir = Path(out_dir)
    return (
        write_dataset(out_dir / TRAIN_FILE, cfg.name, config, vocab, tr_tok, tr_rol),
        write_dataset(out_dir / EVAL_FILE, cfg.name, config, vocab, ev_tok, ev_rol),
    )


def sudoku_instances(cfg: TaskConfig, data: SequenceDataset) -> List[sudoku.SudokuInstance]:
    """Rebuild puzzles from encoded rows: givens are the GIVEN positions."""
    n = cfg.sudoku_grid
    out = []
    for tok, rol in zip(data.tokens, data.roles):
        solution = sudoku.decode_sudoku(tok, n)
        givens = np.where(rol.reshape(n, n) == ROLE_GIVEN, np.asarray(solution), 0).tolist()
        out.append(sudoku.SudokuInstance(n, givens, solution))
    return out


def clique_labels(data: SequenceDataset) -> np.ndarray:
    return (data.tokens[:, -1] == clique.TRUE).astype(np.int64)
