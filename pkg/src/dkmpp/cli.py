"""Command-line interface.

Subcommands: simulate, train, eval, sweep, export-grid.  Exits 0 on success;
on failure prints one categorized error line to stderr and exits nonzero.
"""

from __future__ import annotations

import argparse
import os
import sys

import yaml

from .domain import Window, load_sequences, split_by_time
from .errors import ConfigError, DkmppError
from .experiments import (
    ExperimentData,
    load_config,
    prepare_data,
    run_cell,
    run_experiment,
)
from .metrics import evaluate, export_intensity_grid
from .models import load_checkpoint
from .simulator import SyntheticScenario, build_ground_truth, generate_dataset, load_scenario


def _cmd_simulate(args) -> int:
    scenario = load_scenario(args.scenario) if args.scenario else SyntheticScenario()
    data, _ = generate_dataset(scenario, args.n, args.seed, out_dir=args.out)
    print(f"wrote {data.n_sequences} sequences ({data.n_events} events) to {args.out}")
    return 0


def _cmd_train(args) -> int:
    cfg = load_config(args.config)
    if args.data:
        cfg["data"] = {"dir": args.data}
    cfg["out"] = args.out
    cfg.setdefault("experiment", "single")
    report = run_experiment(_materialize(cfg, args.out))
    print(f"training complete; artifacts in {args.out}")
    if report is not None and report.rmse is not None:
        print(f"rmse vs ground truth: {report.rmse:.6g}")
    return 0


def _materialize(cfg: dict, out_dir: str) -> str:
    """Write the effective config next to the artifacts and return its path."""
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "effective_config.yaml")
    with open(path, "w", encoding="utf-8") as fh:
        yaml.safe_dump(cfg, fh, sort_keys=True)
    return path


def _cmd_eval(args) -> int:
    model = load_checkpoint(args.model)
    scenario = None
    scenario_path = os.path.join(args.data, "scenario.yaml")
    if os.path.exists(scenario_path):
        scenario = load_scenario(scenario_path)
    window = scenario.window if scenario else Window()
    data = load_sequences(os.path.join(args.data, "events.csv"), window)
    truth = build_ground_truth(scenario) if scenario else None
    report = evaluate(
        model, data, window, mc_samples=args.mc, seed=args.seed, truth=truth
    )
    text = yaml.safe_dump(report.to_dict(), sort_keys=True)
    sys.stdout.write(text)
    if args.out:
        report.write(args.out)
    return 0


def _cmd_sweep(args) -> int:
    cfg = load_config(args.config)
    if cfg.get("experiment") != "sweep":
        raise ConfigError(f"{args.config}: sweep command needs experiment: sweep")
    report = run_experiment(args.config)
    out = cfg.get("out", "runs/experiment")
    print(f"sweep complete; artifacts in {out}")
    return 0


def _cmd_export_grid(args) -> int:
    model = load_checkpoint(args.model)
    try:
        n1, n2 = (int(v) for v in args.res.lower().split("x"))
    except ValueError as exc:
        raise ConfigError(f"--res must look like 40x40, got {args.res!r}") from exc
    window = Window()
    if args.data:
        scenario_path = os.path.join(args.data, "scenario.yaml")
        if os.path.exists(scenario_path):
            window = load_scenario(scenario_path).window
    export_intensity_grid(model, args.t, (n1, n2), args.out, window=window)
    print(f"wrote {n1 * n2} grid rows to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dkmpp",
        description="Covariate-driven spatio-temporal point process toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="sample sequences from a synthetic scenario")
    p.add_argument("--scenario", help="scenario YAML (defaults apply when omitted)")
    p.add_argument("--n", type=int, required=True, help="number of sequences")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=_cmd_simulate)

    p = sub.add_parser("train", help="train a model per a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--data", help="data directory (overrides config data.dir)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--model", required=True, help="checkpoint path")
    p.add_argument("--data", required=True, help="data directory")
    p.add_argument("--mc", type=int, default=1000, help="MC samples for the compensator")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="optional report path")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("sweep", help="run a hyperparameter sweep config")
    p.add_argument("--config", required=True)
    p.set_defaults(func=_cmd_sweep)

    p = sub.add_parser("export-grid", help="export a fixed-time intensity heatmap CSV")
    p.add_argument("--model", required=True)
    p.add_argument("--t", type=float, required=True)
    p.add_argument("--res", default="40x40")
    p.add_argument("--out", required=True)
    p.add_argument("--data", help="data directory (for the window)")
    p.set_defaults(func=_cmd_export_grid)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except DkmppError as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"IOError: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
