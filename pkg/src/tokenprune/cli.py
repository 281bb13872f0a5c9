"""Command-line front end: ``tokenprune run|compare|flops|heatmap``."""
from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

from . import flops
from .analysis import accumulate_heatmap, bottom_bias, write_heatmap
from .errors import ConfigError, PruneError
from .harness import (ExperimentConfig, comparison_table, compare, parse_schedule, parse_seeds,
                      run_experiment, run_seeds)
from .pruning import PRESETS

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(EXIT_CONFIG)


def _layers(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad layer list {text!r}") from None


def _common(p: argparse.ArgumentParser, preset_help: str = "schedule preset"):
    p.add_argument("--config", action="append", default=[], metavar="PATH",
                   help="experiment config (YAML); repeatable for compare")
    p.add_argument("--preset", help=f"{preset_help}: {'|'.join(PRESETS)}")
    p.add_argument("--ratio", type=float, help="pruned fraction R")
    p.add_argument("--layers", type=_layers, metavar="K[,K...]", help="pruning layer(s)")
    p.add_argument("--seeds", help="seed count N or comma-separated list")
    p.add_argument("--out", metavar="DIR", help="output directory")
    p.add_argument("--instrument", action="store_true", help="count multiply-accumulates")
    p.add_argument("--dump-config", action="store_true",
                   help="print the resolved config and exit")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="tokenprune", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    _common(sub.add_parser("run", help="run one experiment and write its results"))
    _common(sub.add_parser("compare", help="compare schedules on the same scenes"),
            preset_help="comma-separated presets to compare")
    p = sub.add_parser("flops", help="analytic FLOPS report for a schedule")
    _common(p)
    p.add_argument("--json", action="store_true", help="print only the JSON record")
    p = sub.add_parser("heatmap", help="write retention heatmaps for an experiment")
    _common(p)
    return parser


def resolve_config(args, path: str | None = None, preset: str | None = None) -> ExperimentConfig:
    cfg = ExperimentConfig.load(path) if path else ExperimentConfig()
    data = cfg.to_dict()
    preset = preset or args.preset
    if preset or args.ratio is not None or args.layers:
        sched = {"preset": preset or cfg.preset or "none"}
        if args.ratio is not None:
            sched["ratio"] = args.ratio
        if args.layers:
            sched["layers"] = args.layers
        data["schedule"] = sched
        if preset and not path:
            data["experiment_id"] = preset
    if args.seeds is not None:
        data["scene"]["seeds"] = list(parse_seeds(args.seeds))
    if args.out:
        data["out"] = args.out
    if args.instrument:
        data["instrument"] = True
    return ExperimentConfig.from_dict(data)


def cmd_run(args) -> int:
    cfg = resolve_config(args, args.config[0] if args.config else None)
    if args.dump_config:
        print(cfg.dump(), end="")
        return EXIT_OK
    rec = run_experiment(cfg)
    final = rec.final_stage()
    print(f"{cfg.experiment_id}: {rec.schedule}")
    print(f"  reduction {rec.reduction:.4f}  recall {final['recall_mean']}  "
          f"bias {final['bias_mean']}")
    print(f"  results written to {cfg.out}")
    return EXIT_OK


def cmd_compare(args) -> int:
    if args.preset:
        base = args.config[0] if args.config else None
        configs = [resolve_config(args, base, p.strip())
                   for p in args.preset.split(",") if p.strip()]
        configs = [dataclasses.replace(c, experiment_id=p.strip())
                   for c, p in zip(configs, args.preset.split(","))]
    else:
        configs = [resolve_config(args, path) for path in args.config]
    if not configs:
        raise ConfigError("compare needs --config PATH (repeatable) or --preset A,B,...")
    if args.dump_config:
        for cfg in configs:
            print("---")
            print(cfg.dump(), end="")
        return EXIT_OK
    rows = compare(configs)
    print(comparison_table(rows))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "comparison.json").write_text(json.dumps(rows, indent=2) + "\n")
    return EXIT_OK


def cmd_flops(args) -> int:
    cfg = resolve_config(args, args.config[0] if args.config else None)
    if args.dump_config:
        print(cfg.dump(), end="")
        return EXIT_OK
    report = flops.schedule_report(cfg.schedule, **dict(cfg.flops_reference))
    record = {"schedule": cfg.schedule.describe(), **report.to_dict()}
    if not args.json:
        print(f"schedule: {record['schedule']}")
        print(report.table())
    print(json.dumps(record))
    return EXIT_OK


def cmd_heatmap(args) -> int:
    cfg = resolve_config(args, args.config[0] if args.config else None)
    if args.dump_config:
        print(cfg.dump(), end="")
        return EXIT_OK
    results = run_seeds(cfg)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    for i in range(len(results[0].retained)):
        heat = accumulate_heatmap((r.retained[i] for r in results), i)
        txt, pgm = write_heatmap(heat, out / f"heatmap_stage{i}")
        bias = bottom_bias(heat) if heat.counts.sum() else float("nan")
        print(f"stage {i}: bottom_bias {bias:.4f} -> {txt}, {pgm}")
    return EXIT_OK


COMMANDS = {"run": cmd_run, "compare": cmd_compare, "flops": cmd_flops, "heatmap": cmd_heatmap}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (PruneError, FileExistsError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
