"""Write a grid of run configs over the looping axes, plus their FLOPs table.

The grid crosses loop position (loop_start), looped-layer count (n_m) and
the training S_max on top of a base config. Each point gets its own
config file; `grid.tsv` lists per-step FLOPs and the step count that
matches the base config's total training compute.

Usage examples:

python scripts/ablation_grid.py --preset lm_grammar --layers 4 --loop-start 0,1,2 --n-m 1,2 --s-max 1,4,8 --out grids/lm
python -m loopmdm train --config grids/lm/ls1_nm2_s8.json

"""
from pathlib import Path
import argparse
import sys

# ensure package importable when running from repo root
ROOT = Path(__file__).resolve().parents[1]
sys.path.insert(0, str(ROOT))

from loopmdm import fs
from loopmdm.config import load_config, save_config
from loopmdm.errors import ConfigError
from loopmdm.flops import per_step_flops, with_matched_steps


def _ints(text):
    return [int(x) for x in text.split(",") if x.strip()]


def main(argv=None):
    p = argparse.ArgumentParser(prog="ablation_grid")
    p.add_argument("--config", help="base config file")
    p.add_argument("--preset", help="base preset")
    p.add_argument("--layers", type=int, help="n_layers_total for every grid point (default: base value)")
    p.add_argument("--loop-start", type=_ints, default=[0])
    p.add_argument("--n-m", type=_ints, default=[1])
    p.add_argument("--s-max", type=_ints, default=[1, 4, 8])
    p.add_argument("--match-compute", action="store_true",
                   help="train each point for the base config's compute instead of its step count")
    p.add_argument("--out", "-o", required=True, help="Output directory for configs and grid.tsv")
    args = p.parse_args(argv)

    try:
        base = load_config(args.config, args.preset)
    except ConfigError as exc:
        print(f"invalid base config: {exc}", file=sys.stderr)
        return 2
    if args.layers:
        base.loop.n_layers_total = args.layers
    out = fs.ensure_dir(Path(args.out))
    base_report = per_step_flops(base.loop, base.model, base.model.seq_len, base.train.batch_size)

    rows = []
    for start in args.loop_start:
        for n_m in args.n_m:
            for s_max in args.s_max:
                cfg = load_config(args.config, args.preset, validate=False)
                cfg.loop.n_layers_total = base.loop.n_layers_total
                cfg.loop.loop_start, cfg.loop.n_m, cfg.loop.s_max = start, n_m, s_max
                name = f"ls{start}_nm{n_m}_s{s_max}"
                cfg.output_dir = str(Path(base.output_dir) / name)
                try:
                    cfg.validate()
                except ConfigError as exc:
                    print(f"skip {name}: {exc}", file=sys.stderr)
                    continue
                report = with_matched_steps(
                    per_step_flops(cfg.loop, cfg.model, cfg.model.seq_len, cfg.train.batch_size),
                    base.train.total_steps, base_report.f_loop,
                )
                if args.match_compute:
                    cfg.train.flops_match_baseline = base.loop
                save_config(cfg, out / f"{name}.json")
                rows.append([name, start, n_m, s_max, report.expected_loops, report.f_loop, report.matched_steps])

    fs.write_tsv(out / "grid.tsv", ["name", "loop_start", "n_m", "s_max", "E[S]", "f_loop", "matched_steps"], rows)
    print(f"Wrote {len(rows)} configs and grid.tsv to {out}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
