"""Cost metrics over executed schedules and the three-mode comparison."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .scenario import ScenarioConfig, ScenarioData, realize

METRIC_FIELDS = ("external_cost", "smoothing_cost", "pv_curtailed", "load_curtailed", "ev_shortfall")


@dataclass(frozen=True)
class MetricsReport:
    """Realized metrics of one run.

    ``external_cost`` is in $, curtailment and shortfall in kWh.
    ``smoothing_cost`` is the weighted range/variation/curvature value of the
    realized import profile (a mix of kW and kW^2 terms, so effectively
    unitless).  ``total_cost`` adds the curtailment penalties and the storage
    cycling costs, i.e. the microgrid objective evaluated on what was
    actually executed; it is the quantity the mode comparison uses.
    """

    mode: str
    steps: int
    external_cost: float
    smoothing_cost: float
    pv_curtailed: float
    load_curtailed: float
    ev_shortfall: float
    total_cost: float
    pcc_violations: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)


def _config(scenario) -> ScenarioConfig:
    return scenario.config if isinstance(scenario, ScenarioData) else scenario


def _smoothing(p, w) -> float:
    p = np.asarray(p, dtype=float)
    c = 0.0
    if p.size > 1:
        c += w.alpha_range * (p.max() - p.min()) + w.alpha_diff * np.abs(np.diff(p)).sum()
    if p.size > 2:
        d2 = np.diff(p, 2)
        c += w.alpha_curv * float(d2 @ d2)
    return float(c)


def _cycling(p, alpha) -> float:
    p = np.asarray(p, dtype=float)
    return alpha * float(np.abs(np.diff(p)).sum()) if p.size > 1 else 0.0


def compute_metrics(result, scenario) -> MetricsReport:
    """Metrics of a :class:`~microgrid_mpc.mpc.SimulationResult`.

    ``scenario`` is the :class:`ScenarioConfig` (or realized data) the run
    used; only its weights and time step are read.
    """
    cfg = _config(scenario)
    w = cfg.weights
    dt = result.grid.dt_hours
    imp = np.asarray(result.grid_import, dtype=float)
    external = float(np.sum(result.price * imp) * dt)
    smoothing = _smoothing(imp, w)
    # curtailment as the shortfall of realized vs available magnitudes
    pv_gap = np.maximum(np.abs(result.pv_actual) - np.abs(result.pv), 0.0)
    load_gap = np.maximum(result.load_actual - result.load, 0.0)
    ev_short = float(sum(d.shortfall for d in result.departures))
    total = (
        external
        + smoothing
        + w.alpha_load * float(load_gap @ load_gap)
        + w.alpha_pv * float(pv_gap @ pv_gap)
        + _cycling(result.bes, cfg.bes.alpha_cyc)
        + sum(_cycling(row, cfg.ev.alpha_cyc) for row in result.ev)
    )
    return MetricsReport(
        mode=result.mode,
        steps=int(result.steps),
        external_cost=external,
        smoothing_cost=smoothing,
        pv_curtailed=float(pv_gap.sum() * dt),
        load_curtailed=float(load_gap.sum() * dt),
        ev_shortfall=ev_short,
        total_cost=float(total),
        pcc_violations=len(result.events.of_kind("pcc_violation")),
    )


def relative_gap(a: float, b: float) -> float:
    """``|a - b| / |b|`` (``inf`` when ``b`` is zero and ``a`` is not)."""
    if b == 0:
        return 0.0 if a == 0 else float("inf")
    return abs(a - b) / abs(b)


@dataclass
class Comparison:
    reports: dict  # mode -> MetricsReport
    results: dict = field(default_factory=dict, repr=False)  # mode -> SimulationResult

    @property
    def gaps(self) -> dict:
        """Relative total-cost gaps: ADMM vs centralized, centralized vs prescient."""
        out = {}
        r = self.reports
        if "admm" in r and "centralized" in r:
            out["admm_vs_centralized"] = relative_gap(r["admm"].total_cost, r["centralized"].total_cost)
        if "centralized" in r and "prescient" in r:
            out["centralized_vs_prescient"] = relative_gap(r["centralized"].total_cost,
                                                           r["prescient"].total_cost)
        return out

    def to_dict(self) -> dict:
        return {"metrics": {m: rep.to_dict() for m, rep in self.reports.items()}, "gaps": self.gaps}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    def table(self) -> str:
        """Plain-text table, one row per mode."""
        cols = METRIC_FIELDS + ("total_cost",)
        head = f"{'mode':<12}" + "".join(f"{c:>16}" for c in cols)
        lines = [head]
        for mode, rep in self.reports.items():
            lines.append(f"{mode:<12}" + "".join(f"{getattr(rep, c):>16.4f}" for c in cols))
        for name, gap in self.gaps.items():
            lines.append(f"gap {name}: {100 * gap:.3f}%")
        return "\n".join(lines)


def compare(scenario, modes=("admm", "centralized", "prescient"), **run_kwargs) -> Comparison:
    """Run each mode on identical realized data and collect the metrics."""
    from .mpc import run

    data = scenario if isinstance(scenario, ScenarioData) else realize(scenario)
    reports, results = {}, {}
    for mode in modes:
        res = run(data, mode=mode, **run_kwargs)
        results[mode] = res
        reports[mode] = compute_metrics(res, data)
    return Comparison(reports, results)
