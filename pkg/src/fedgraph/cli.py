"""Command-line experiment driver.

Subcommands: run, sweep, ablate, het-sweep, bench.  Configs are JSON files
following the ExperimentSpec schema; command-line flags override config
fields.  The FEDGRAPH_THREADS environment variable caps sweep workers.
Exit status is nonzero iff any hard error occurred; partial sweep results
are still flushed.
"""

import argparse
import json
import os
import sys
from dataclasses import replace

from .errors import ConfigError
from .experiments import (
    ExperimentSpec,
    export_csv,
    format_table,
    run_ablation,
    run_bench,
    run_experiment,
    run_het_sweep,
    run_sweep,
)


def _load_spec(args):
    spec = ExperimentSpec.from_json(args.config)
    if getattr(args, "seed", None) is not None:
        spec = replace(spec, federation=replace(spec.federation, seed=args.seed))
    if getattr(args, "out", None) is not None:
        spec = replace(spec, output=args.out)
    return spec


def _write_json(path, payload):
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _cmd_run(args):
    spec = _load_spec(args)
    report = run_experiment(spec, seed=args.seed)
    print(json.dumps(report.metrics, indent=2, sort_keys=True))
    if spec.output:
        print(f"report written under {spec.output}", file=sys.stderr)
    return 0


def _cmd_sweep(args):
    spec = _load_spec(args)
    rows = run_sweep([spec], repeats=args.repeats, base_seed=args.seed or 0)
    table = format_table({"sweep": rows[0]})
    print(table)
    out_dir = spec.output or "."
    _write_json(os.path.join(out_dir, "sweep.json"), rows)
    export_csv({"sweep": rows[0]}, os.path.join(out_dir, "sweep.csv"))
    return 1 if rows[0]["failures"] else 0


def _cmd_ablate(args):
    spec = _load_spec(args)
    rows = run_ablation(spec, repeats=args.repeats, base_seed=args.seed or 0)
    print(format_table(rows))
    out_dir = spec.output or "."
    _write_json(os.path.join(out_dir, "ablation.json"), {k: v for k, v in rows.items()})
    export_csv(rows, os.path.join(out_dir, "ablation.csv"))
    return 1 if any(row["failures"] for row in rows.values()) else 0


def _cmd_het_sweep(args):
    spec = _load_spec(args)
    ratios = [float(r) for r in args.ratios.split(",")]
    rows = run_het_sweep(spec, ratios=ratios, repeats=args.repeats, base_seed=args.seed or 0)
    print(format_table(rows))
    out_dir = spec.output or "."
    _write_json(os.path.join(out_dir, "het_sweep.json"), {str(k): v for k, v in rows.items()})
    export_csv(rows, os.path.join(out_dir, "het_sweep.csv"))
    return 1 if any(row["failures"] for row in rows.values()) else 0


def _cmd_bench(args):
    spec = _load_spec(args)
    scales = [float(s) for s in args.scales.split(",")]
    rows = run_bench(spec, scales=scales, base_seed=args.seed or 0)
    for row in rows:
        print(
            f"n={row['n']}: bytes={row['total_bytes']} wall={row['wall_clock_s']:.2f}s "
            f"metrics={row['metrics']}"
        )
    out_dir = spec.output or "."
    _write_json(os.path.join(out_dir, "bench.json"), rows)
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="fedgraph", description="Federated graph clustering experiment driver"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="JSON experiment spec")
        p.add_argument("--seed", type=int, default=None, help="override base seed")
        p.add_argument("--out", default=None, help="output directory")

    p_run = sub.add_parser("run", help="run a single experiment")
    common(p_run)
    p_run.set_defaults(func=_cmd_run)

    p_sweep = sub.add_parser("sweep", help="repeat an experiment over seeds")
    common(p_sweep)
    p_sweep.add_argument("--repeats", type=int, default=5)
    p_sweep.set_defaults(func=_cmd_sweep)

    p_abl = sub.add_parser("ablate", help="run the five ablation arms")
    common(p_abl)
    p_abl.add_argument("--repeats", type=int, default=5)
    p_abl.set_defaults(func=_cmd_ablate)

    p_het = sub.add_parser("het-sweep", help="sweep the heterogeneity ratio")
    common(p_het)
    p_het.add_argument("--ratios", default="0.2,0.4,0.6,0.8,0.95")
    p_het.add_argument("--repeats", type=int, default=3)
    p_het.set_defaults(func=_cmd_het_sweep)

    p_bench = sub.add_parser("bench", help="message-size and runtime scaling")
    common(p_bench)
    p_bench.add_argument("--scales", default="1,2")
    p_bench.set_defaults(func=_cmd_bench)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2
    except Exception as err:
        print(f"error: {type(err).__name__}: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
