"""Command-line entry point: `python -m loopmdm <command>`.

Commands: train, sample, eval, analyze, flops, gen-data. Tables and JSON
go to stdout; logging and progress bars go to stderr.

Exit codes: 0 success, 1 contract or runtime violation, 2 usage or
configuration error, 3 non-finite training loss, 4 checkpoint or dataset
load error.
"""
from __future__ import annotations
import argparse
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np

from . import fs
from .analysis import (
    Scorer,
    generative_perplexity,
    loop_allocation_profile,
    mask_attention_profile,
    mask_count_gain_profile,
    timestep_gain_profile,
    unigram_perplexity,
)
from .config import UNITS, RunConfig, dump_defaults, load_config
from .errors import CheckpointError, ConfigError, DatasetError, LoopMDMError, NonFiniteLossError
from .evaluation import Model, adaptive_sweep, evaluate_loops
from .flops import per_step_flops, with_matched_steps
from .runs import load_weights, train_run, write_flops
from .sampler import (
    NORM_SCOPES,
    POLICY_ALIASES,
    POLICY_KINDS,
    AdaptiveLoopPolicy,
    UnmaskPolicy,
    generate_batch,
    mean_loops,
    write_trajectories,
)
from .tasks import SequenceDataset, build_datasets, task_seq_len, task_vocab_size, write_datasets
from .templating import render_template
from .trainer import TrainState

EXIT_OK = 0
EXIT_CONTRACT = 1
EXIT_USAGE = 2
EXIT_NONFINITE = 3
EXIT_LOAD = 4

ANALYSES = ("attention", "timestep", "mask-count", "loops", "perplexity")


# -- helpers ----------------------------------------------------------------

def _int_list(text: str) -> List[int]:
    try:
        values = [int(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc
    if not values or min(values) < 1:
        raise argparse.ArgumentTypeError("loop counts must be >= 1")
    return values


def _float_list(text: str) -> List[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from exc


def _print_table(rows: Sequence[Dict[str, Any]], columns: Sequence[str]) -> None:
    print("\t".join(columns))
    for row in rows:
        print("\t".join(_cell(row.get(c, "")) for c in columns))


def _cell(value: Any) -> str:
    if isinstance(value, float):
        return f"{value:.6g}"
    return str(value)


def _columns(rows: Sequence[Dict[str, Any]]) -> List[str]:
    columns: List[str] = []
    for row in rows:
        columns.extend(k for k in row if k not in columns)
    return columns


def _find_run_config(checkpoint: Path, config: Optional[str]) -> RunConfig:
    if config:
        return load_config(config)
    for candidate in (checkpoint.parent / "config.json", checkpoint.parent.parent / "config.json"):
        if candidate.exists():
            return load_config(str(candidate))
    raise ConfigError("config", f"no config.json next to {checkpoint}; pass --config")


def _check_vocab(cfg: RunConfig, state: TrainState, label: str = "checkpoint") -> None:
    expected = task_vocab_size(cfg.task)
    if state.model_cfg.vocab_size != expected:
        raise ConfigError(
            "task", f"{label} vocabulary {state.model_cfg.vocab_size} does not match task {cfg.task.name!r} ({expected})"
        )
    if state.model_cfg.seq_len != task_seq_len(cfg.task):
        raise ConfigError(
            "task", f"{label} sequence length {state.model_cfg.seq_len} does not match task {cfg.task.name!r} "
            f"({task_seq_len(cfg.task)})"
        )


def _model(state: TrainState) -> Model:
    return Model(state.params, state.model_cfg, state.loop_cfg)


def _unmask_policy(args) -> UnmaskPolicy:
    return UnmaskPolicy.parse(args.policy, args.k, args.tokens_per_step)


def _eval_data(cfg: RunConfig, limit: Optional[int]) -> SequenceDataset:
    _, data = build_datasets(cfg.task, cfg.seed)
    if limit is not None and limit < len(data):
        data = data.subset(np.arange(limit))
    return data


def _scorer(path: Optional[str], loops: Optional[int]) -> Optional[Scorer]:
    if not path:
        return None
    state = load_weights(Path(path), "ema")
    return Scorer.of(state.params, state.model_cfg, state.loop_cfg, loops)


# -- commands -----------------------------------------------------------------

def cmd_train(args) -> int:
    cfg = load_config(args.config, args.preset)
    if args.output_dir:
        cfg.output_dir = args.output_dir
    summary = train_run(cfg, resume=Path(args.resume) if args.resume else None, progress=not args.quiet)
    print(fs.json_dumps({
        "run_dir": str(summary.run_dir),
        "steps": summary.steps,
        "final_loss": summary.final_loss,
        "flops": summary.flops,
        "checkpoint": str(summary.checkpoint),
    }), end="")
    return EXIT_OK


def cmd_sample(args) -> int:
    state = load_weights(Path(args.checkpoint), args.weights)
    policy = _unmask_policy(args)
    if args.adaptive is not None:
        eps, budget = args.adaptive
        loops = AdaptiveLoopPolicy(float(eps), int(budget), args.norm_scope)
    else:
        loops = args.loops or state.loop_cfg.s_max
    rng = np.random.default_rng(args.seed)
    trajectories = generate_batch(
        state.params, state.model_cfg, state.loop_cfg, policy, args.steps, loops,
        state.model_cfg.seq_len, rng, batch_size=args.n,
    )
    out = fs.ensure_dir(Path(args.out))
    fs.atomic_write_text(
        out / "samples.jsonl",
        "".join(fs.jsonl_line({"sequence": i, "tokens": [int(x) for x in traj.final]}) + "\n"
                for i, traj in enumerate(trajectories)),
    )
    write_trajectories(out / "trajectories.jsonl", trajectories)
    print(fs.json_dumps({
        "n": len(trajectories),
        "mean_loops": mean_loops(trajectories),
        "samples": str(out / "samples.jsonl"),
        "trajectories": str(out / "trajectories.jsonl"),
    }), end="")
    return EXIT_OK


def cmd_eval(args) -> int:
    checkpoint = Path(args.checkpoint)
    cfg = _find_run_config(checkpoint, args.config)
    state = load_weights(checkpoint, args.weights)
    _check_vocab(cfg, state)
    sampler = cfg.sampler
    sampler.seed = args.seed if args.seed is not None else sampler.seed
    if args.policy:
        sampler.policy, sampler.k, sampler.tokens_per_step = args.policy, args.k, args.tokens_per_step
    sampler.validate()
    scorer = _scorer(args.scorer, args.scorer_loops)
    variants = [("main", cfg, state)]
    if args.compare:
        compare_ckpt = Path(args.compare)
        compare_cfg = _find_run_config(compare_ckpt, args.compare_config)
        compare_state = load_weights(compare_ckpt, args.weights)
        _check_vocab(compare_cfg, compare_state, "comparison checkpoint")
        variants.append(("compare", compare_cfg, compare_state))

    tables = []
    for label, run_cfg, run_state in variants:
        data = _eval_data(run_cfg, args.n_eval)
        model = _model(run_state)
        variant = "workspace" if run_cfg.task.workspace else "padding-free"
        if args.adaptive_sweep is not None:
            rows = adaptive_sweep(model, run_cfg.task, data, args.adaptive_sweep, args.budget, sampler,
                                  args.norm_scope, scorer)
        else:
            loops_list = args.loops or [run_state.loop_cfg.s_max]
            rows = evaluate_loops(model, run_cfg.task, data, loops_list, sampler, scorer,
                                  with_nelbo=not args.no_nelbo, t_min=run_cfg.train.t_min)
        if run_cfg.task.name == "clique":
            rows = [dict(row, variant=variant) for row in rows]
        tables.append({"title": f"{label}: {run_cfg.task.name}", "rows": rows, "columns": _columns(rows)})

    all_rows = [dict(row, checkpoint=label) for (label, _, _), table in zip(variants, tables) for row in table["rows"]]
    _print_table(all_rows, _columns(all_rows))
    out = fs.ensure_dir(Path(args.out) if args.out else checkpoint.parent)
    fs.write_tsv(out / "eval.tsv", _columns(all_rows), [[row.get(c, "") for c in _columns(all_rows)] for row in all_rows])
    fs.atomic_write_text(out / "report.md", render_template("eval_report.md.j2", {
        "task": cfg.task.name,
        "checkpoint": str(checkpoint),
        "weights": args.weights,
        "n_eval": args.n_eval if args.n_eval is not None else cfg.task.n_eval,
        "policy": sampler.policy,
        "n_steps": sampler.n_steps,
        "seed": sampler.seed,
        "tables": tables,
    }))
    return EXIT_OK


def _analysis_rows(args, cfg: RunConfig, state: TrainState) -> Dict[str, Any]:
    data = _eval_data(cfg, args.n_eval)
    rng = np.random.default_rng(args.seed)
    params, mcfg, lcfg = state.params, state.model_cfg, state.loop_cfg
    s_list = args.s_list or sorted({1, lcfg.s_max})
    meta: Dict[str, Any] = {"sequences": len(data)}

    if args.what == "attention":
        stats = mask_attention_profile(params, mcfg, lcfg, data.tokens, args.t, s_list, rng, data.maskable)
        meta["t"] = args.t
        return {"rows": [s.to_dict() for s in stats], "meta": meta, "plot": ("attention", stats)}
    if args.what == "timestep":
        profile = timestep_gain_profile(params, mcfg, lcfg, data.tokens, s_list, rng, args.bins, data.maskable)
        return {"rows": profile.rows(), "meta": meta, "plot": ("timestep", profile)}
    if args.what == "mask-count":
        profile = mask_count_gain_profile(params, mcfg, lcfg, data.tokens, s_list, rng, data.maskable)
        return {"rows": profile.rows(), "meta": meta, "plot": ("mask-count", profile)}
    if args.what == "loops":
        prompts = data.prompts(mcfg.mask_id)
        profiles, rows = {}, []
        for eps in args.epsilons:
            policy = AdaptiveLoopPolicy(eps, args.budget, args.norm_scope)
            trajectories = generate_batch(
                params, mcfg, lcfg, cfg.sampler.unmask_policy(), cfg.sampler.n_steps, policy,
                mcfg.seq_len, np.random.default_rng(args.seed), prompt=prompts,
            )
            profile = loop_allocation_profile(trajectories, args.bins)
            profiles[f"eps={eps:g}"] = profile
            rows.extend(dict(row, epsilon=eps) for row in profile.rows())
        meta["budget"] = args.budget
        return {"rows": rows, "meta": meta, "plot": ("loops", profiles)}

    scorer = _scorer(args.scorer, args.scorer_loops)
    if scorer is None:
        raise ConfigError("scorer", "analyze --what perplexity needs --scorer")
    loops = args.loops or lcfg.s_max
    trajectories = generate_batch(
        params, mcfg, lcfg, cfg.sampler.unmask_policy(), cfg.sampler.n_steps, loops,
        mcfg.seq_len, rng, batch_size=cfg.sampler.n_samples,
    )
    samples = np.stack([traj.final for traj in trajectories])
    meta["convention"] = "leave-one-out, scorer conditioned on t = 1/L"
    rows = [{
        "loops": loops,
        "gen_ppl": generative_perplexity(samples, scorer, mcfg.vocab_size),
        "heldout_ppl": generative_perplexity(data.tokens, scorer, mcfg.vocab_size),
        "unigram_ppl": unigram_perplexity(data.tokens, mcfg.vocab_size),
    }]
    return {"rows": rows, "meta": meta, "plot": None}


def cmd_analyze(args) -> int:
    checkpoint = Path(args.checkpoint)
    cfg = _find_run_config(checkpoint, args.config)
    state = load_weights(checkpoint, args.weights)
    _check_vocab(cfg, state)
    result = _analysis_rows(args, cfg, state)
    rows, columns = result["rows"], _columns(result["rows"])
    _print_table(rows, columns)

    out = fs.ensure_dir(Path(args.out) if args.out else checkpoint.parent / "analysis")
    stem = args.what.replace("-", "_")
    fs.write_tsv(out / f"{stem}.tsv", columns, [[row.get(c, "") for c in columns] for row in rows])
    fs.atomic_write_text(out / f"{stem}.md", render_template("analysis_report.md.j2", {
        "what": args.what, "checkpoint": str(checkpoint), "seed": args.seed,
        "meta": result["meta"], "rows": rows, "columns": columns,
    }))
    if args.plot and result["plot"] is not None:
        from . import plotting

        kind, payload = result["plot"]
        draw = {
            "attention": plotting.plot_attention,
            "timestep": plotting.plot_timestep_gain,
            "mask-count": plotting.plot_mask_count_gain,
            "loops": plotting.plot_loop_allocation,
        }[kind]
        logging.info("cli: wrote %s", draw(payload, out / f"{stem}.png"))
    return EXIT_OK


def cmd_flops(args) -> int:
    cfg = load_config(args.config, args.preset)
    report = per_step_flops(cfg.loop, cfg.model, cfg.model.seq_len, cfg.train.batch_size, not args.no_embeddings)
    if args.baseline:
        base_cfg = load_config(args.baseline)
        base = per_step_flops(base_cfg.loop, base_cfg.model, base_cfg.model.seq_len, base_cfg.train.batch_size,
                              not args.no_embeddings)
        report = with_matched_steps(report, base_cfg.train.total_steps, base.f_loop)
    out = Path(args.out) if args.out else Path(cfg.output_dir)
    write_flops(fs.ensure_dir(out), report)
    print(fs.json_dumps(report.to_dict()), end="")
    return EXIT_OK


def cmd_gen_data(args) -> int:
    cfg = load_config(args.config, args.preset)
    train_path, eval_path = write_datasets(cfg.task, cfg.seed, Path(args.out))
    print(fs.json_dumps({"train": str(train_path), "eval": str(eval_path)}), end="")
    return EXIT_OK


# -- parser -------------------------------------------------------------------

def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat JSON config file")
    p.add_argument("--preset", help="named preset applied before the config file")


def _add_policy_args(p: argparse.ArgumentParser, default: Optional[str]) -> None:
    p.add_argument("--policy", default=default, choices=list(POLICY_KINDS) + sorted(POLICY_ALIASES))
    p.add_argument("--k", type=int, default=1, help="positions per step for topk_confidence")
    p.add_argument("--tokens-per-step", type=int, default=1, help="positions per step for fixed_left_to_right")
    p.add_argument("--norm-scope", default="all_positions", choices=NORM_SCOPES)


def _add_checkpoint_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("checkpoint")
    p.add_argument("--config", help="run config (default: config.json next to the checkpoint)")
    p.add_argument("--weights", default="ema", choices=("ema", "raw"))
    p.add_argument("--n-eval", type=int, default=None, help="limit the eval split")
    p.add_argument("--out", help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="loopmdm", description="Looped masked diffusion models at desk scale")
    parser.add_argument("--verbose", action="store_true", help="debug logging")
    parser.add_argument("--quiet", action="store_true", help="warnings only, no progress bars")
    parser.add_argument("--dump-defaults", action="store_true", help="print the canonical default config and exit")
    parser.add_argument("--preset", dest="dump_preset", help="preset for --dump-defaults")
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("train", help="train a model")
    _add_config_args(p)
    p.add_argument("--output-dir", help="override output_dir")
    p.add_argument("--resume", help="continue from a checkpoint")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="generate sequences from a checkpoint")
    p.add_argument("checkpoint")
    _add_policy_args(p, "ancestral_random")
    loops = p.add_mutually_exclusive_group()
    loops.add_argument("--loops", type=int, help="fixed loop count S (may exceed training S_max)")
    loops.add_argument("--adaptive", nargs=2, type=float, metavar=("EPSILON", "BUDGET"))
    p.add_argument("--n", type=int, default=16)
    p.add_argument("--steps", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--weights", default="ema", choices=("ema", "raw"))
    p.add_argument("--out", default="samples")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("eval", help="task metrics per loop count")
    _add_checkpoint_args(p)
    _add_policy_args(p, None)
    p.add_argument("--loops", type=_int_list, help="comma-separated loop counts, e.g. 1,2,3,6")
    p.add_argument("--adaptive-sweep", type=_float_list, help="comma-separated epsilons")
    p.add_argument("--budget", type=int, default=12)
    p.add_argument("--scorer", help="reference checkpoint for generative perplexity")
    p.add_argument("--scorer-loops", type=int)
    p.add_argument("--compare", help="second checkpoint evaluated side by side")
    p.add_argument("--compare-config")
    p.add_argument("--no-nelbo", action="store_true", help="skip held-out NELBO")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("analyze", help="diagnostics over a checkpoint")
    _add_checkpoint_args(p)
    p.add_argument("--what", required=True, choices=ANALYSES)
    p.add_argument("--t", type=float, default=0.5)
    p.add_argument("--s-list", type=_int_list)
    p.add_argument("--bins", type=int, default=20)
    p.add_argument("--epsilons", type=_float_list, default=[0.0, 0.05, 0.1, 0.15, 0.2])
    p.add_argument("--budget", type=int, default=12)
    p.add_argument("--norm-scope", default="all_positions", choices=NORM_SCOPES)
    p.add_argument("--loops", type=int)
    p.add_argument("--scorer")
    p.add_argument("--scorer-loops", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--plot", action="store_true", help="also write a PNG chart")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("flops", help="per-step FLOPs and compute-matched steps")
    _add_config_args(p)
    p.add_argument("--baseline", help="baseline config; matched steps use its total_steps")
    p.add_argument("--no-embeddings", action="store_true", help="count layer parameters only")
    p.add_argument("--out")
    p.set_defaults(func=cmd_flops)

    p = sub.add_parser("gen-data", help="write train/eval dataset files")
    _add_config_args(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)
    return parser


def _configure_logging(args) -> None:
    level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
    logging.basicConfig(level=level, stream=sys.stderr, format="%(levelname)s %(message)s", force=True)


def _dump_defaults(preset: Optional[str]) -> int:
    print(dump_defaults(preset), end="")
    for key in sorted(UNITS):
        print(f"# {key}: {UNITS[key]}", file=sys.stderr)
    return EXIT_OK


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _configure_logging(args)
    try:
        if args.dump_defaults:
            return _dump_defaults(args.dump_preset)
        if not args.command:
            parser.print_usage(sys.stderr)
            return EXIT_USAGE
        return args.func(args)
    except ConfigError as exc:
        logging.error("config error: %s", exc)
        return EXIT_USAGE
    except NonFiniteLossError as exc:
        logging.error("training stopped: %s", exc)
        return EXIT_NONFINITE
    except (CheckpointError, DatasetError) as exc:
        logging.error("load error: %s", exc)
        return EXIT_LOAD
    except LoopMDMError as exc:
        logging.error("%s: %s", type(exc).__name__, exc)
        return EXIT_CONTRACT


if __name__ == "__main__":
    sys.exit(main())
