"""Experiment orchestration: simulate -> train -> evaluate pipelines, data-size
and Monte-Carlo sensitivity curves, noise-variance contrasts, and
hyperparameter sweeps with repeats.

Experiments are described by a YAML config; every run writes its artifacts
(history CSV, checkpoint, metrics report, curve CSVs) under the configured
output directory, flushing rows as cells finish so partial results survive an
abort.
"""

from __future__ import annotations

import csv
import math
import os
import time
from dataclasses import dataclass
from typing import Optional

import numpy as np
import yaml

from .domain import (
    SequenceSet,
    Window,
    build_representative_set,
    load_covariate_grid,
    load_sequences,
    split_by_time,
)
from .errors import ConfigError
from .estimators import EstimatorConfig, train, write_history
from .metrics import MetricsReport, evaluate, export_intensity_grid, intensity_rmse
from .models import build_dkmpp, build_dmpp, fit_homopoisson, save_checkpoint
from .simulator import SyntheticScenario, build_ground_truth, generate_dataset, load_scenario

SWEEP_AXES = ("representative_points", "layers", "batch_size")


@dataclass(frozen=True)
class SweepSpec:
    axis: str
    values: tuple
    repeats: int = 3

    def __post_init__(self):
        if self.axis not in SWEEP_AXES:
            raise ConfigError(f"sweep axis {self.axis!r} not in {SWEEP_AXES}")
        if not self.values:
            raise ConfigError("sweep needs at least one value")
        if self.repeats < 1:
            raise ConfigError("repeats must be >= 1")


def load_config(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        cfg = yaml.safe_load(fh)
    if not isinstance(cfg, dict):
        raise ConfigError(f"{path}: expected a mapping at top level")
    return cfg


def estimator_config(cfg: dict, **overrides) -> EstimatorConfig:
    est = dict(cfg.get("estimator") or {})
    est.update(overrides)
    return EstimatorConfig(
        kind=est.get("kind", "sm"),
        epochs=int(est.get("epochs", 50)),
        learning_rate=float(est.get("lr", 1e-2)),
        batch_size=int(est.get("batch_size", 100)),
        mc_samples=int(est.get("mc_samples", 1000)),
        sigma2=float(est.get("sigma2", 0.01)),
        seed=int(est.get("seed", 0)),
        exact_compensator=bool(est.get("exact_compensator", False)),
        validation=str(est.get("validation", "own")),
        val_mc_samples=int(est.get("val_mc_samples", 200)),
    )


@dataclass
class ExperimentData:
    train: SequenceSet
    val: SequenceSet
    test: SequenceSet
    window: Window
    grid_path: str
    scenario: Optional[SyntheticScenario]

    @property
    def truth(self):
        return build_ground_truth(self.scenario) if self.scenario else None


def prepare_data(cfg: dict, out_dir: str) -> ExperimentData:
    """Load (or simulate) the dataset named by the config and split it."""
    data_cfg = dict(cfg.get("data") or {})
    if "dir" in data_cfg:
        data_dir = data_cfg["dir"]
    elif "simulate" in data_cfg:
        sim = dict(data_cfg["simulate"])
        data_dir = os.path.join(out_dir, "data")
        scenario = SyntheticScenario(
            convention=sim.get("convention", "std"),
        )
        generate_dataset(
            scenario, int(sim.get("n", 2000)), int(sim.get("seed", 0)), out_dir=data_dir
        )
    else:
        raise ConfigError("config data section needs either 'dir' or 'simulate'")

    scenario = None
    scenario_path = os.path.join(data_dir, "scenario.yaml")
    if os.path.exists(scenario_path):
        scenario = load_scenario(scenario_path)
    window = scenario.window if scenario else Window()
    seqs = load_sequences(os.path.join(data_dir, "events.csv"), window)
    ratios = tuple(cfg.get("split", (0.5, 0.4, 0.1)))
    tr, va, te = split_by_time(seqs, ratios)
    return ExperimentData(
        tr, va, te, window, os.path.join(data_dir, "covariates.csv"), scenario
    )


def _take_fraction(data: SequenceSet, fraction: float) -> SequenceSet:
    if not (0 < fraction <= 1):
        raise ConfigError(f"fraction must be in (0, 1], got {fraction}")
    n = max(1, int(math.ceil(data.n_sequences * fraction)))
    return data.subset(range(n))


def build_model(cfg: dict, data: ExperimentData, seed_offset: int = 0, **overrides):
    """Instantiate the configured model over the dataset's covariate grid."""
    mc = dict(cfg.get("model") or {})
    mc.update(overrides)
    kind = mc.get("kind", "dkmpp")
    if kind == "homopoisson":
        return fit_homopoisson(data.train, data.window)
    grid = load_covariate_grid(data.grid_path)
    rep_counts = tuple(mc.get("rep_counts", (5, 5, 5)))
    rep = build_representative_set(data.window, rep_counts, grid)
    width = int(mc.get("hidden_width", 8))
    layers = int(mc.get("layers", 1))
    hidden = (width,) * layers
    kernel = dict(mc.get("kernel") or {})
    seed = int(mc.get("seed", 0)) + seed_offset
    if kind == "dkmpp":
        return build_dkmpp(
            rep,
            kernel_kind=kernel.get("kind", "rbf"),
            phi_init=float(kernel.get("phi_init", 1.0)),
            link=mc.get("link", "softplus"),
            f_hidden=hidden,
            g_hidden=hidden,
            g_out=int(mc.get("g_out", 3)),
            seed=seed,
        )
    if kind == "dmpp":
        return build_dmpp(
            rep,
            kernel_kind=kernel.get("kind", "rbf"),
            phi_init=float(kernel.get("phi_init", 1.0)),
            f_hidden=hidden,
            seed=seed,
        )
    raise ConfigError(f"unknown model kind {kind!r}")


def _eval_settings(cfg: dict):
    ev = dict(cfg.get("eval") or {})
    return (
        int(ev.get("mc_samples", 1000)),
        int(ev.get("seed", 1234)),
        tuple(ev.get("rmse_grid", (20, 20, 20))),
        str(ev.get("rmse_nodes", "lattice")),
    )


def run_cell(
    cfg: dict,
    data: ExperimentData,
    out_dir: str,
    tag: str,
    est_overrides: dict = None,
    model_overrides: dict = None,
    train_set: SequenceSet = None,
    seed_offset: int = 0,
):
    """One simulate->train->evaluate unit; returns (report, history, model)."""
    overrides = dict(model_overrides or {})
    kind = overrides.get("kind", (cfg.get("model") or {}).get("kind", "dkmpp"))
    model = build_model(cfg, data, seed_offset=seed_offset, **overrides)
    tr = train_set if train_set is not None else data.train
    t0 = time.perf_counter()
    history = []
    if kind != "homopoisson":
        est = estimator_config(cfg, **(est_overrides or {}))
        est = EstimatorConfig(
            kind=est.kind, epochs=est.epochs, learning_rate=est.learning_rate,
            batch_size=est.batch_size, mc_samples=est.mc_samples,
            sigma2=est.sigma2, seed=est.seed + seed_offset,
            exact_compensator=est.exact_compensator,
            validation=est.validation, val_mc_samples=est.val_mc_samples,
        )
        # use_validation: false trains for the full budget and keeps the final
        # parameters (fixed-budget estimator comparisons)
        val = data.val if cfg.get("use_validation", True) else None
        model, history = train(model, tr, val, est, window=data.window)
    train_seconds = time.perf_counter() - t0
    mc_samples, eval_seed, rmse_grid, rmse_nodes = _eval_settings(cfg)
    t0 = time.perf_counter()
    report = evaluate(
        model, data.test, data.window, mc_samples=mc_samples, seed=eval_seed,
        truth=data.truth, rmse_grid=rmse_grid, rmse_nodes=rmse_nodes,
    )
    report.runtime_seconds = {
        "train": train_seconds,
        "eval": time.perf_counter() - t0,
    }
    os.makedirs(out_dir, exist_ok=True)
    if history:
        write_history(history, os.path.join(out_dir, f"history_{tag}.csv"))
    save_checkpoint(model, os.path.join(out_dir, f"model_{tag}.ckpt"))
    report.write(os.path.join(out_dir, f"report_{tag}.yaml"))
    return report, history, model


class _CurveWriter:
    """Incremental CSV writer so partial sweep results survive an abort."""

    def __init__(self, path, header):
        os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
        self._fh = open(path, "w", newline="", encoding="utf-8")
        self._writer = csv.writer(self._fh)
        self._writer.writerow(header)
        self._fh.flush()

    def row(self, values):
        self._writer.writerow(values)
        self._fh.flush()

    def close(self):
        self._fh.close()


def run_consistency(cfg: dict, data: ExperimentData, out_dir: str):
    """Estimator-vs-data-size grid: every estimator at every data fraction."""
    estimators = list(cfg.get("estimators", ("mle", "sm", "dsm")))
    fractions = [float(f) for f in cfg.get("fractions", (1.0, 0.1))]
    writer = _CurveWriter(
        os.path.join(out_dir, "consistency.csv"),
        ["estimator", "fraction", "rmse", "tll", "acc"],
    )
    results = {}
    last = None
    try:
        for kind in estimators:
            for fraction in fractions:
                tr = _take_fraction(data.train, fraction)
                tag = f"{kind}_{int(round(fraction * 100))}pct"
                report, history, _ = run_cell(
                    cfg, data, out_dir, tag, est_overrides={"kind": kind}, train_set=tr
                )
                writer.row([kind, fraction, report.rmse, report.tll, report.acc])
                results[(kind, fraction)] = (report, history)
                last = report
    finally:
        writer.close()
    return last, results


def run_mc_curve(cfg: dict, data: ExperimentData, out_dir: str):
    """RMSE as a function of the MLE Monte-Carlo budget.

    The score losses never touch mc_samples, so their curves are computed
    from a single training run each.
    """
    mc_values = [int(v) for v in cfg.get("mc_values", (10, 25, 50, 100, 150))]
    writer = _CurveWriter(
        os.path.join(out_dir, "mc_curve.csv"), ["estimator", "mc_samples", "rmse"]
    )
    results = {}
    last = None
    try:
        for mc in mc_values:
            report, _, _ = run_cell(
                cfg, data, out_dir, f"mle_mc{mc}",
                est_overrides={"kind": "mle", "mc_samples": mc},
            )
            writer.row(["mle", mc, report.rmse])
            results[("mle", mc)] = report
            last = report
        for kind in ("sm", "dsm"):
            report, _, _ = run_cell(cfg, data, out_dir, kind, est_overrides={"kind": kind})
            for mc in mc_values:
                writer.row([kind, mc, report.rmse])
                results[(kind, mc)] = report
            last = report
    finally:
        writer.close()
    return last, results


def run_noise_contrast(cfg: dict, data: ExperimentData, out_dir: str):
    """Denoising estimator under small vs large noise variance."""
    sigma2_values = [float(v) for v in cfg.get("sigma2_values", (0.01, 10.0))]
    grid_time = float(cfg.get("grid_time", data.window.t_max))
    writer = _CurveWriter(
        os.path.join(out_dir, "noise_contrast.csv"), ["sigma2", "rmse", "tll", "acc"]
    )
    results = {}
    last = None
    try:
        for s2 in sigma2_values:
            tag = f"dsm_sigma2_{s2:g}"
            report, _, model = run_cell(
                cfg, data, out_dir, tag, est_overrides={"kind": "dsm", "sigma2": s2}
            )
            export_intensity_grid(
                model, grid_time, (40, 40),
                os.path.join(out_dir, f"intensity_{tag}.csv"), window=data.window,
            )
            writer.row([s2, report.rmse, report.tll, report.acc])
            results[s2] = report
            last = report
    finally:
        writer.close()
    return last, results


def _rep_counts_for(total: int) -> tuple:
    side = round(total ** (1.0 / 3.0))
    if side ** 3 != total:
        raise ConfigError(f"representative sweep value {total} is not a cube")
    return (side, side, side)


def run_sweep(cfg: dict, data: ExperimentData, out_dir: str, sweep: SweepSpec):
    """Mean +- std RMSE across repeats for each sweep value."""
    writer = _CurveWriter(
        os.path.join(out_dir, f"sweep_{sweep.axis}.csv"),
        [sweep.axis, "mean_rmse", "std_rmse", "mean_tll", "repeats"],
    )
    results = {}
    last = None
    try:
        for value in sweep.values:
            rmses, tlls = [], []
            for rep in range(sweep.repeats):
                model_overrides = {}
                est_overrides = {}
                if sweep.axis == "representative_points":
                    model_overrides["rep_counts"] = _rep_counts_for(int(value))
                elif sweep.axis == "layers":
                    model_overrides["layers"] = int(value)
                else:
                    est_overrides["batch_size"] = int(value)
                tag = f"{sweep.axis}_{value}_r{rep}"
                report, _, _ = run_cell(
                    cfg, data, out_dir, tag,
                    est_overrides=est_overrides, model_overrides=model_overrides,
                    seed_offset=rep,
                )
                rmses.append(report.rmse)
                tlls.append(report.tll)
                last = report
            writer.row([
                value, float(np.mean(rmses)),
                float(np.std(rmses, ddof=1)) if len(rmses) > 1 else 0.0,
                float(np.mean(tlls)), sweep.repeats,
            ])
            results[value] = (float(np.mean(rmses)), rmses)
    finally:
        writer.close()
    return last, results


def run_experiment(config_path) -> MetricsReport:
    """Execute the experiment described by a YAML config; returns the final
    cell's metrics report (all artifacts land in the output directory)."""
    cfg = load_config(config_path)
    out_dir = cfg.get("out") or "runs/experiment"
    os.makedirs(out_dir, exist_ok=True)
    data = prepare_data(cfg, out_dir)
    mode = cfg.get("experiment", "single")
    if mode == "single":
        report, _, _ = run_cell(cfg, data, out_dir, cfg.get("tag", "run"))
    elif mode == "consistency":
        report, _ = run_consistency(cfg, data, out_dir)
    elif mode == "mc_curve":
        report, _ = run_mc_curve(cfg, data, out_dir)
    elif mode == "noise_contrast":
        report, _ = run_noise_contrast(cfg, data, out_dir)
    elif mode == "sweep":
        sw = dict(cfg.get("sweep") or {})
        spec = SweepSpec(
            axis=sw.get("axis", "layers"),
            values=tuple(sw.get("values", (1, 2, 4))),
            repeats=int(sw.get("repeats", 3)),
        )
        report, _ = run_sweep(cfg, data, out_dir, spec)
    else:
        raise ConfigError(f"unknown experiment mode {mode!r}")
    if report is not None:
        report.write(os.path.join(out_dir, "report.yaml"))
    return report
