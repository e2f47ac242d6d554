"""Run directories and the training loop.

A run directory holds:

    config.json            exact RunConfig used (canonical flat form)
    run_meta.json          package version, code hash, seeds
    flops.json / flops.md  FlopsReport for this run
    metrics.jsonl          one line per optimizer step
    checkpoints/step_*.lmdm
    final.lmdm
    diagnostic.json        only after a non-finite loss
"""
from __future__ import annotations
from dataclasses import dataclass
import hashlib
import logging
from pathlib import Path
from typing import Optional

from tqdm import tqdm

from . import __version__, fs
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, save_config
from .errors import ConfigError, NonFiniteLossError
from .flops import FlopsReport, per_step_flops, with_matched_steps
from .tasks import SequenceDataset, build_datasets
from .templating import render_template
from .trainer import TrainState, init_train_state, train_step

PACKAGE_DIR = Path(__file__).resolve().parent
CHECKPOINT_DIR = "checkpoints"
FINAL_CHECKPOINT = "final.lmdm"
METRICS_FILE = "metrics.jsonl"


def code_version() -> str:
    """BLAKE2b over the package sources, in path order."""
    h = hashlib.blake2b(digest_size=8)
    for path in sorted(PACKAGE_DIR.rglob("*")):
        if path.is_file() and path.suffix in (".py", ".j2"):
            h.update(path.relative_to(PACKAGE_DIR).as_posix().encode("utf-8"))
            h.update(path.read_bytes())
    return h.hexdigest()


def checkpoint_path(run_dir: Path, step: int) -> Path:
    return Path(run_dir) / CHECKPOINT_DIR / f"step_{step:06d}.lmdm"


def flops_report(cfg: RunConfig) -> FlopsReport:
    """Per-step FLOPs; with flops_match_baseline, also the compute-matched step count."""
    report = per_step_flops(cfg.loop, cfg.model, cfg.model.seq_len, cfg.train.batch_size)
    baseline = cfg.train.flops_match_baseline
    if baseline is not None:
        base = per_step_flops(baseline, cfg.model, cfg.model.seq_len, cfg.train.batch_size)
        report = with_matched_steps(report, cfg.train.total_steps, base.f_loop)
    return report


def write_flops(run_dir: Path, report: FlopsReport) -> None:
    fs.json_save(Path(run_dir) / "flops.json", report.to_dict())
    fs.atomic_write_text(Path(run_dir) / "flops.md", render_template("flops_report.md.j2", {"report": report.to_dict()}))


def prepare_run_dir(cfg: RunConfig, run_dir: Optional[Path] = None) -> Path:
    run_dir = fs.ensure_dir(Path(run_dir or cfg.output_dir))
    save_config(cfg, run_dir / "config.json")
    fs.json_save(run_dir / "run_meta.json", {
        "version": __version__,
        "code_version": code_version(),
        "data_seed": cfg.seed,
        "train_seed": cfg.train.seed,
    })
    return run_dir


@dataclass
class TrainSummary:
    run_dir: Path
    steps: int
    final_loss: float
    flops: int
    checkpoint: Path


def _step_budget(cfg: RunConfig, report: FlopsReport) -> int:
    if report.matched_steps is None:
        return cfg.train.total_steps
    if report.matched_steps < 1:
        raise ConfigError("train.flops_match_baseline", "compute-matched budget is below one step")
    logging.info("runs: compute-matched training for %d steps (baseline %d)",
                 report.matched_steps, cfg.train.total_steps)
    return report.matched_steps


def train_run(
    cfg: RunConfig,
    run_dir: Optional[Path] = None,
    resume: Optional[Path] = None,
    train_data: Optional[SequenceDataset] = None,
    progress: bool = True,
) -> TrainSummary:
    """Train per `cfg`; a fresh run truncates any earlier metrics log."""
    cfg.validate()
    run_dir = prepare_run_dir(cfg, run_dir)
    report = flops_report(cfg)
    write_flops(run_dir, report)
    steps = _step_budget(cfg, report)

    if train_data is None:
        train_data, _ = build_datasets(cfg.task, cfg.seed)
    metrics_path = run_dir / METRICS_FILE
    if resume is not None:
        state = load_checkpoint(Path(resume))
        logging.info("runs: resuming from %s at step %d", resume, state.step)
    else:
        state = init_train_state(cfg.model, cfg.loop, cfg.train)
        fs.atomic_write_text(metrics_path, "")

    every = cfg.train.checkpoint_every
    final_loss = float("nan")
    with tqdm(total=steps, initial=state.step, desc="train", unit="step", disable=not progress) as bar:
        while state.step < steps:
            batch = train_data.sample_batch(state.rng, cfg.train.batch_size)
            try:
                state, metrics = train_step(state, batch)
            except NonFiniteLossError as exc:
                fs.json_save(run_dir / "diagnostic.json", exc.snapshot)
                logging.error("runs: %s; diagnostic written to %s", exc, run_dir / "diagnostic.json")
                raise
            fs.append_jsonl(metrics_path, [metrics])
            final_loss = metrics["loss"]
            bar.update(1)
            bar.set_postfix(loss=f"{final_loss:.4f}", S=metrics["loops"])
            if every and state.step % every == 0 and state.step < steps:
                save_checkpoint(state, checkpoint_path(run_dir, state.step))

    final = save_checkpoint(state, run_dir / FINAL_CHECKPOINT)
    logging.info("runs: trained %d steps, final loss %.4f, %d FLOPs -> %s", state.step, final_loss, state.flops, final)
    return TrainSummary(run_dir, state.step, final_loss, state.flops, final)


def load_weights(path: Path, weights: str = "ema") -> TrainState:
    """Checkpoint with `params` replaced by the EMA weights when asked."""
    state = load_checkpoint(Path(path))
    if weights == "ema":
        state.params = state.ema
    elif weights != "raw":
        raise ConfigError("weights", f"expected 'ema' or 'raw', got {weights!r}")
    return state
