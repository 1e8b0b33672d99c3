"""Command line interface: ``run``, ``compare``, ``gen-data`` and ``validate``.

Exit codes: 0 success, 1 invalid scenario, 2 infeasible (a subproblem had no
feasible point, or execution had to exceed the PCC limit).
"""

from __future__ import annotations

import csv
import json
import logging
import sys
from pathlib import Path

import click
import numpy as np

from .exchange import ExchangeError
from .metrics import Comparison, compute_metrics
from .mpc import MODES, run
from .qp import QPInfeasibleError
from .scenario import (
    CSVSource,
    ScenarioConfig,
    ScenarioError,
    load_scenario,
    realize,
    save_scenario,
    write_series_csv,
)

EXIT_CONFIG = 1
EXIT_INFEASIBLE = 2


def _apply_flags(cfg: ScenarioConfig, seed, rho, horizon, mode) -> ScenarioConfig:
    changes = {}
    if seed is not None:
        changes["seed"] = seed
    if rho is not None:
        changes["admm.rho"] = rho
    if horizon is not None:
        changes["grid.horizon_steps"] = horizon
    if mode is not None:
        changes["mode"] = mode
    return cfg.with_overrides(**changes) if changes else cfg


def _load(path, seed=None, rho=None, horizon=None, mode=None) -> ScenarioConfig:
    try:
        return _apply_flags(load_scenario(path), seed, rho, horizon, mode)
    except (ScenarioError, ValueError) as err:
        click.echo(f"invalid scenario: {err}", err=True)
        sys.exit(EXIT_CONFIG)


def _fmt(v) -> str:
    return repr(float(v))


def _write_rows(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def write_outputs(result, report, out_dir, data) -> dict:
    """Write metrics, schedules, figure tables and traces for one mode.

    Returns the written paths by kind.  Every file name carries the mode so
    several runs can share a directory.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    m = result.mode
    cfg = data.config
    stamps = result.grid.timestamps(0, result.steps)
    paths = {k: out / f"{k}_{m}.{ext}" for k, ext in (
        ("metrics", "json"), ("schedules", "csv"), ("trace", "jsonl"), ("events", "jsonl"),
        ("fig_pcc", "csv"), ("fig_pv", "csv"), ("fig_load", "csv"), ("fig_bes", "csv"), ("fig_ev", "csv"))}
    paths["metrics"].write_text(report.to_json() + "\n")

    ev_total = result.ev.sum(axis=0)
    head = ["timestamp", "price", "grid_import", "load", "pv", "bes", "ev_total",
            "load_actual", "pv_actual", "bes_q"] + [f"{n}_kw" for n in result.ev_names]
    rows = []
    for t in range(result.steps):
        rows.append([stamps[t].isoformat()] + [_fmt(v) for v in (
            result.price[t], result.grid_import[t], result.load[t], result.pv[t], result.bes[t],
            ev_total[t], result.load_actual[t], result.pv_actual[t], result.bes_q[t + 1])]
            + [_fmt(v) for v in result.ev[:, t]])
    _write_rows(paths["schedules"], head, rows)
    result.write_jsonl(paths["trace"])
    with open(paths["events"], "w") as fh:
        for e in result.events.events:
            fh.write(json.dumps(e, sort_keys=True, default=float) + "\n")

    iso = [s.isoformat() for s in stamps]
    net = result.load_actual + result.pv_actual
    _write_rows(paths["fig_pcc"], ["timestamp", "grid_import", "unoptimized_net", "price"],
                [[iso[t], _fmt(result.grid_import[t]), _fmt(net[t]), _fmt(result.price[t])]
                 for t in range(result.steps)])
    avail = np.abs(result.pv_actual)
    _write_rows(paths["fig_pv"], ["timestamp", "pv_available", "pv_realized", "pv_curtailed"],
                [[iso[t], _fmt(avail[t]), _fmt(abs(result.pv[t])), _fmt(max(avail[t] - abs(result.pv[t]), 0.0))]
                 for t in range(result.steps)])
    _write_rows(paths["fig_load"], ["timestamp", "load_demand", "load_served", "load_curtailed"],
                [[iso[t], _fmt(result.load_actual[t]), _fmt(result.load[t]),
                  _fmt(max(result.load_actual[t] - result.load[t], 0.0))] for t in range(result.steps)])
    cap = cfg.bes.capacity_kwh
    _write_rows(paths["fig_bes"], ["timestamp", "bes_kw", "soc_pct", "price"],
                [[iso[t], _fmt(result.bes[t]), _fmt(100 * result.bes_q[t + 1] / cap), _fmt(result.price[t])]
                 for t in range(result.steps)])
    caps = np.array([v.capacity_kwh for v in data.fleet.vehicles])
    q_next = result.ev_q[:, 1:]
    present = np.isfinite(q_next)
    rows = []
    for t in range(result.steps):
        here = present[:, t]
        soc = 100 * q_next[here, t].sum() / caps[here].sum() if here.any() else float("nan")
        rows.append([iso[t], _fmt(ev_total[t]), _fmt(soc), int(here.sum()), _fmt(result.price[t])])
    _write_rows(paths["fig_ev"], ["timestamp", "ev_kw", "soc_pct_plugged", "plugged", "price"], rows)
    return paths


def _simulate(cfg, mode, steps, out_dir, data=None):
    data = data or realize(cfg)
    try:
        result = run(data, mode=mode, steps=steps)
    except (QPInfeasibleError, ExchangeError) as err:
        click.echo(f"infeasible ({mode}): {err}", err=True)
        sys.exit(EXIT_INFEASIBLE)
    report = compute_metrics(result, data)
    write_outputs(result, report, out_dir, data)
    return result, report


_common = [
    click.option("--seed", type=int, default=None, help="Override the scenario seed."),
    click.option("--rho", type=float, default=None, help="Override the exchange penalty."),
    click.option("--horizon", type=int, default=None, help="Override the MPC horizon (steps)."),
    click.option("--out-dir", type=click.Path(file_okay=False), default="out", show_default=True),
    click.option("--steps", type=int, default=None, help="Simulate only the first N steps."),
]


def _with_common(f):
    for opt in reversed(_common):
        f = opt(f)
    return f


@click.group()
@click.option("-v", "--verbose", count=True, help="Log progress (-vv for debug).")
def main(verbose):
    """Decentralized microgrid scheduling by exchange ADMM inside MPC."""
    level = logging.WARNING - 10 * min(verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


@main.command("run")
@click.argument("scenario", type=click.Path(exists=True, dir_okay=False))
@click.option("--mode", type=click.Choice(MODES), default=None, help="Override the scenario mode.")
@_with_common
def run_cmd(scenario, mode, seed, rho, horizon, out_dir, steps):
    """Simulate SCENARIO in one mode and write metrics, schedules and traces."""
    cfg = _load(scenario, seed, rho, horizon, mode)
    result, report = _simulate(cfg, cfg.mode, steps, out_dir)
    click.echo(report.to_json())
    if report.pcc_violations:
        click.echo(f"PCC limit exceeded at {report.pcc_violations} step(s)", err=True)
        sys.exit(EXIT_INFEASIBLE)


@main.command()
@click.argument("scenario", type=click.Path(exists=True, dir_okay=False))
@_with_common
def compare(scenario, seed, rho, horizon, out_dir, steps):
    """Run all three modes on identical data and report the cost gaps."""
    cfg = _load(scenario, seed, rho, horizon)
    data = realize(cfg)
    reports = {}
    for mode in MODES:
        _, reports[mode] = _simulate(cfg, mode, steps, out_dir, data)
    comp = Comparison(reports)
    Path(out_dir, "comparison.json").write_text(comp.to_json() + "\n")
    click.echo(comp.table())
    if any(r.pcc_violations for r in reports.values()):
        sys.exit(EXIT_INFEASIBLE)


@main.command("gen-data")
@click.argument("spec", type=click.Path(exists=True, dir_okay=False))
@click.option("--seed", type=int, default=None, help="Override the scenario seed.")
@click.option("--out-dir", type=click.Path(file_okay=False), default="data", show_default=True)
def gen_data(spec, seed, out_dir):
    """Realize the synthetic series of SPEC as CSV files.

    Writes ``load.csv``, ``pv.csv`` and ``price.csv`` (history and simulation
    period) plus ``scenario.yaml``, a copy of SPEC that reads them back.
    """
    cfg = _load(spec, seed)
    data = realize(cfg)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    # whole days, as realize reads them back
    stamps = data.grid.timestamps(-data.history_steps, data.load.size)
    write_series_csv(out / "load.csv", stamps, data.load)
    write_series_csv(out / "pv.csv", stamps, data.pv)
    write_series_csv(out / "price.csv", stamps, data.price, column="price")
    csv_cfg = cfg.model_copy(update={
        "load": CSVSource(path="load.csv"), "pv": CSVSource(path="pv.csv"), "price": CSVSource(path="price.csv"),
    })
    save_scenario(csv_cfg, out / "scenario.yaml")
    click.echo(f"wrote {data.load.size} samples per series to {out}")


@main.command()
@click.argument("scenario", type=click.Path(exists=True, dir_okay=False))
def validate(scenario):
    """Check SCENARIO and print it with every default filled in."""
    cfg = _load(scenario)
    try:
        realize(cfg)
    except (ScenarioError, ValueError) as err:
        click.echo(f"invalid scenario data: {err}", err=True)
        sys.exit(EXIT_CONFIG)
    click.echo(cfg.to_yaml(), nl=False)


if __name__ == "__main__":  # pragma: no cover
    main()
