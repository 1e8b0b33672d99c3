"""Receding-horizon controller.

Each step forecasts PV and load, refreshes the EV session estimates, builds
the agents over the remaining horizon, solves the coupled problem (exchange
ADMM or the centralized QP), executes the first step against the actual
realizations and propagates the charge states.

Execution rule under forecast error: the load keeps its planned curtailment
fraction of actual demand, a PV curtailment cap applies to actual generation,
storage runs its planned charge/discharge verbatim (clamped to its state
bounds) and the grid connection absorbs the remaining imbalance.  If that
would exceed the PCC limit, load (import side) or PV (export side) is
curtailed further, then the battery is adjusted; every such action is logged.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .agents import GridAgent, LoadAgent, PVAgent, StorageAgent, reachability_check
from .core import EventLog, TimeGrid, per_step_retention
from .exchange import ExchangeSettings, ExchangeState, run_exchange
from .forecast import EVSession, HistoryBuffer, estimate_ev_params, fit_forecast_model, predict
from .reference import solve_centralized
from .scenario import ScenarioConfig, ScenarioData, realize

logger = logging.getLogger(__name__)

MODES = ("admm", "centralized", "prescient")
_TOL = 1e-9
_EVENT_KW = 1e-3  # smallest emergency action worth an event


@dataclass
class StepRecord:
    step: int
    mode: str
    horizon: int
    n_agents: int
    objective: float
    iterations: int
    r_norm: float
    s_norm: float
    status: str
    solve_seconds: float
    events: list = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(self.__dict__, sort_keys=True)


@dataclass
class EVDeparture:
    vehicle: str
    day: int
    step: int
    q_dep: float
    q_des: float
    alpha_des: float

    @property
    def shortfall(self) -> float:
        return max(0.0, self.alpha_des * self.q_des - self.q_dep)


@dataclass
class MPCState:
    """Everything carried from one MPC step to the next.

    ``t`` counts executed simulation steps.  Previous plans are stored per
    agent name as ``(absolute start step, bus-convention schedule)``.
    """

    t: int
    load_hist: HistoryBuffer
    pv_hist: HistoryBuffer  # generation magnitudes
    bes_q: float
    ev_q: list  # current charge per vehicle, NaN when not plugged in
    ev_estimates: dict = field(default_factory=dict)  # (vehicle, day) -> EVParamEstimate
    prev_plan: dict = field(default_factory=dict)
    prev_u: tuple | None = None  # (absolute start step, u, rho)
    events: EventLog = field(default_factory=EventLog)


@dataclass
class SimulationResult:
    """Realized (executed) trajectories over the simulated steps."""

    mode: str
    grid: TimeGrid
    load: np.ndarray
    pv: np.ndarray
    bes: np.ndarray
    grid_import: np.ndarray
    ev: np.ndarray  # (n_vehicles, steps)
    bes_q: np.ndarray  # (steps + 1,)
    ev_q: np.ndarray  # (n_vehicles, steps + 1), NaN while away
    load_actual: np.ndarray
    pv_actual: np.ndarray
    price: np.ndarray
    ev_names: tuple
    departures: list
    events: EventLog
    records: list
    plans: list | None = None  # per step: {name: (start, schedule)}
    planned_q: list | None = None  # per step: {name: planned q(t+1)}

    @property
    def steps(self) -> int:
        return self.load.size

    def balance_residual(self) -> np.ndarray:
        """``load + pv + bes + sum(ev) - import`` at each executed step."""
        return self.load + self.pv + self.bes + self.ev.sum(axis=0) - self.grid_import

    def write_jsonl(self, path) -> None:
        with open(path, "w") as fh:
            for rec in self.records:
                fh.write(rec.to_json() + "\n")


# -------------------------------------------------------------- controller


class Controller:
    """Stateful wrapper running one scenario in one mode."""

    def __init__(self, data: ScenarioData, mode: str = "admm", exchange: ExchangeSettings | None = None,
                 warm_start: bool = True, keep_plans: bool = False, refit_every: int = 1):
        if mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
        self.data = data
        self.cfg: ScenarioConfig = data.config
        self.grid = data.grid
        self.mode = mode
        a = self.cfg.admm
        self.exchange = exchange or ExchangeSettings(
            eps_pri=a.eps_pri, eps_dual=a.eps_dual, max_iter=a.max_iter, rho=a.rho,
            rho_adapt=a.rho_adapt, parallelism=a.parallelism)
        self.warm_start = warm_start
        self.keep_plans = keep_plans
        self.refit_every = max(1, int(refit_every))
        self._models = {}
        b = self.cfg.bes
        dt = self.grid.dt_hours
        self.bes_eta_q = per_step_retention(b.eta_q, b.eta_q_basis_hours, dt)
        self.ev_eta_q = per_step_retention(self.cfg.ev.eta_q, self.cfg.ev.eta_q_basis_hours, dt)

    # ----------------------------------------------------------- helpers

    def initial_state(self) -> MPCState:
        d = self.data
        H0 = d.history_steps
        cap = self.data.config.forecast.history_days * self.grid.period_steps
        state = MPCState(
            t=0,
            load_hist=HistoryBuffer(d.load[:H0].copy(), 0, cap),
            pv_hist=HistoryBuffer(-d.pv[:H0].copy(), 0, cap),
            bes_q=self.cfg.bes.q_init_frac * self.cfg.bes.capacity_kwh,
            ev_q=[float("nan")] * len(d.fleet),
        )
        return state

    def _absolute(self, t: int) -> int:
        return self.data.history_steps + t

    def _forecast(self, state: MPCState, a: int, H: int):
        if self.mode == "prescient":
            return self.data.load[a:a + H].copy(), self.data.pv[a:a + H].copy()
        fc = self.cfg.forecast
        out = []
        for key, hist, params in (("load", state.load_hist, fc.load), ("pv", state.pv_hist, fc.pv)):
            model = self._models.get(key)
            if model is None or state.t % self.refit_every == 0:
                model = fit_forecast_model(hist, self.grid.period_steps, params.gamma_asym,
                                           params.gamma_curv, params.ar_order, params.decay)
                self._models[key] = model
            out.append(predict(model, hist, H, start=a))
        load_fc, pv_mag = out
        return load_fc, -pv_mag

    def _estimate(self, state: MPCState, i: int, day: int):
        key = (i, day)
        est = state.ev_estimates.get(key)
        if est is None:
            history = [self.data.session(i, dd) for dd in range(day)]
            est = estimate_ev_params(history, self.data.fleet.vehicles[i])
            state.ev_estimates[key] = est
        return est

    def _session(self, state: MPCState, i: int, day: int, s: int, observed: bool) -> EVSession:
        """Actual session if known (observed or prescient), else the estimate."""
        actual = self.data.session(i, day)
        if observed or self.mode == "prescient":
            return actual
        est = self._estimate(state, i, day)
        return EVSession(est.t_arr, est.t_dep, est.q_init, est.q_des)

    def _ev_plan_session(self, state: MPCState, i: int, a: int, H: int):
        """The one session vehicle ``i`` plans for in ``[a, a+H)``, local coordinates.

        Returns ``(start, end, q_init, q_des, departs_in_horizon)`` or None.
        """
        P = self.grid.period_steps
        days = len(self.data.fleet.sessions[i])
        day, s = divmod(a, P)
        today = self.data.session(i, day)
        if today.t_arr <= s < today.t_dep:  # plugged in now
            q0 = state.ev_q[i]
            sess, offset = today, -s
            start = 0
        else:
            if s < today.t_arr:
                sess, offset = self._session(state, i, day, s, observed=False), -s
            elif day + 1 < days:
                sess, offset = self._session(state, i, day + 1, s, observed=False), P - s
            else:
                return None
            start = sess.t_arr + offset
            if start < 1:  # expected arrival has passed: assume it happens next step
                start = 1
            q0 = sess.q_init
        end_abs = sess.t_dep + offset
        end = max(end_abs, start + 1)
        if start >= H:
            return None
        departs = end <= H
        return start, min(end, H), q0, sess.q_des, departs

    # ----------------------------------------------------------- agents

    def build_agents(self, state: MPCState, a: int, H: int):
        cfg, w = self.cfg, self.cfg.weights
        dt = self.grid.dt_hours
        load_fc, pv_fc = self._forecast(state, a, H)
        prev = {name: self._prev_window(state, name, a, H) for name in state.prev_plan}
        ap = w.alpha_prev
        agents = [
            LoadAgent(load_fc, w.beta, w.alpha_load, prev.get("load"), ap, name="load"),
            PVAgent(pv_fc, w.alpha_pv, prev.get("pv"), ap, name="pv"),
        ]
        b = cfg.bes
        bes = StorageAgent(H, b.c_max_kw, b.d_max_kw, b.capacity_kwh, state.bes_q, b.eta_c, b.eta_d,
                           self.bes_eta_q, b.q_min_frac, b.q_max_frac, b.alpha_cyc, dt,
                           q_final=b.q_final_frac * b.capacity_kwh, prev=prev.get("bes"),
                           alpha_prev=ap, name="bes")
        self._relax_terminal(bes, state, a)
        agents.append(bes)
        ev_cfg = cfg.ev
        for i, ev in enumerate(self.data.fleet.vehicles):
            plan = self._ev_plan_session(state, i, a, H)
            if plan is None:
                continue
            start, end, q0, q_des, departs = plan
            lo, hi = ev.q_bounds
            required = None
            if departs:
                required = min(ev_cfg.alpha_des * q_des + ev_cfg.required_margin_kwh, hi)
            agent = StorageAgent(H, ev.charger_kw, ev.charger_kw, ev.capacity_kwh, float(np.clip(q0, lo, hi)),
                                 ev.efficiency, ev.efficiency, self.ev_eta_q, ev.q_min_frac, ev.q_max_frac,
                                 ev_cfg.alpha_cyc, dt, window=(start, end), q_required=required,
                                 prev=prev.get(ev.name), alpha_prev=ap, name=ev.name)
            if required is not None:
                reach = reachability_check(agent)
                if not reach.feasible:
                    agent.q_required = reach.max_attainable - 1e-6
                    state.events.add(state.t, "ev_relaxed", vehicle=ev.name, required=required,
                                     max_attainable=reach.max_attainable)
            agents.append(agent)
        prev_grid = prev.get("grid")
        agents.append(GridAgent(self.data.price[a:a + H], cfg.pcc_limit_kw, w.alpha_range, w.alpha_diff,
                                w.alpha_curv, dt, None if prev_grid is None else -prev_grid, ap, name="grid"))
        return agents, load_fc, pv_fc

    def _relax_terminal(self, bes: StorageAgent, state: MPCState, a: int) -> None:
        """Move an unreachable terminal target to the nearest attainable charge."""
        hi = reachability_check(replace(bes, q_final=None)).max_attainable
        q = bes.q_init
        lo_bound = bes.q_bounds[0]
        for _ in range(bes.window_length):
            q = max(bes.eta_q * q - bes.dt_hours / bes.eta_d * bes.d_max, min(lo_bound, bes.eta_q * q))
        target = float(np.clip(bes.q_final, q, hi))
        if abs(target - bes.q_final) > 1e-9:
            state.events.add(state.t, "bes_terminal_relaxed", q_final=bes.q_final, used=target)
            bes.q_final = target

    @staticmethod
    def _prev_window(state: MPCState, name: str, a: int, H: int):
        start, values = state.prev_plan[name]
        out = np.full(H, np.nan)
        lo, hi = max(a, start), min(a + H, start + values.size)
        if hi > lo:
            out[lo - a:hi - a] = values[lo - start:hi - start]
        return out

    def _warm(self, state: MPCState, agents, a: int, H: int):
        if not self.warm_start or not state.prev_plan:
            return None
        rows = []
        for ag in agents:
            if ag.name in state.prev_plan:
                row = self._prev_window(state, ag.name, a, H)
                fill = row[np.isfinite(row)][-1] if np.isfinite(row).any() else 0.0
                rows.append(np.where(np.isfinite(row), row, fill))
            else:
                rows.append(np.zeros(H))
        u = np.zeros(H)
        rho = self.exchange.rho
        if state.prev_u is not None:
            start, pu, rho = state.prev_u
            lo, hi = a - start, min(pu.size, a - start + H)
            if hi > lo:
                u[:hi - lo] = pu[lo:hi]
                u[hi - lo:] = pu[hi - 1]
        return ExchangeState(np.vstack(rows), u, rho)

    # ----------------------------------------------------------- solve

    def solve(self, state: MPCState, agents, a: int, H: int):
        """Returns plans (bus convention), first-step storage splits and stats."""
        t0 = time.perf_counter()
        splits = {}
        planned_q = {}
        if self.mode == "admm":
            res = run_exchange(agents, self._warm(state, agents, a, H), self.exchange)
            plans = {ag.name: res.state.schedules[i].copy() for i, ag in enumerate(agents)}
            for ag in agents:
                if isinstance(ag, StorageAgent):
                    sl = ag._cache["enc"].slices
                    splits[ag.name], planned_q[ag.name] = _first_split(ag, ag.last_solution.x, sl)
            stats = dict(objective=res.objective, iterations=res.iterations, r_norm=res.r_norm,
                         s_norm=res.s_norm, status=res.status)
            if not res.converged:
                state.events.add(state.t, "exchange_max_iter", r_norm=res.r_norm, s_norm=res.s_norm)
            state.prev_u = (a, res.state.u.copy(), res.state.rho)
        else:
            res = solve_centralized(agents)
            plans = {ag.name: res.schedules[i].copy() for i, ag in enumerate(agents)}
            for i, ag in enumerate(agents):
                if isinstance(ag, StorageAgent):
                    splits[ag.name], planned_q[ag.name] = _first_split(ag, res.agent_x(i),
                                                                       res.encodings[i].slices)
            sol = res.solution
            stats = dict(objective=res.objective, iterations=sol.iterations, r_norm=sol.primal_residual,
                         s_norm=sol.dual_residual, status=sol.status.value)
        stats["solve_seconds"] = time.perf_counter() - t0
        return plans, splits, planned_q, stats

    # ----------------------------------------------------------- step

    def step(self, state: MPCState, out: dict) -> MPCState:
        t = state.t
        a = self._absolute(t)
        H = self.grid.horizon_at(t)
        if H <= 0:
            raise ValueError(f"step {t} is past the end of the simulation")
        P = self.grid.period_steps
        day, s = divmod(a, P)
        n_events = len(state.events)
        # arrivals become observed
        for i in range(len(self.data.fleet)):
            sess = self.data.session(i, day)
            if s == sess.t_arr:
                state.ev_q[i] = sess.q_init
        agents, load_fc, pv_fc = self.build_agents(state, a, H)
        plans, splits, planned_q, stats = self.solve(state, agents, a, H)
        self._execute(state, t, a, plans, splits, load_fc, pv_fc, out)
        for name, values in plans.items():
            state.prev_plan[name] = (a, values)
        for name in list(state.prev_plan):
            if name not in plans:
                del state.prev_plan[name]
        # departures after executing step s
        for i, ev in enumerate(self.data.fleet.vehicles):
            sess = self.data.session(i, day)
            if s + 1 == sess.t_dep:
                out["departures"].append(EVDeparture(ev.name, day, t, float(state.ev_q[i]), sess.q_des,
                                                     self.cfg.ev.alpha_des))
                state.ev_q[i] = float("nan")
        state.load_hist.append(a, self.data.load[a])
        state.pv_hist.append(a, -self.data.pv[a])
        rec = StepRecord(t, self.mode, H, len(agents), float(stats["objective"]), int(stats["iterations"]),
                         float(stats["r_norm"]), float(stats["s_norm"]), str(stats["status"]),
                         float(stats["solve_seconds"]), state.events.events[n_events:])
        out["records"].append(rec)
        if self.keep_plans:
            out["plans"].append({k: (a, v) for k, v in plans.items()})
            out["planned_q"].append(planned_q)
        state.t = t + 1
        return state

    def _execute(self, state, t, a, plans, splits, load_fc, pv_fc, out):
        cfg = self.cfg
        beta = cfg.weights.beta
        lim = cfg.pcc_limit_kw
        L, G = float(self.data.load[a]), float(self.data.pv[a])
        frac = plans["load"][0] / load_fc[0] if load_fc[0] > _TOL else 1.0
        load = float(np.clip(frac, beta, 1.0)) * L
        pv = G
        if plans["pv"][0] > pv_fc[0] + 1e-6:  # planned curtailment caps actual output
            pv = max(G, float(plans["pv"][0]))
        # storage, verbatim and clamped to state bounds
        b = cfg.bes
        bes = _Battery(state.bes_q, self.bes_eta_q, b.eta_c, b.eta_d, b.c_max_kw, b.d_max_kw,
                       b.q_min_frac * b.capacity_kwh, b.q_max_frac * b.capacity_kwh, self.grid.dt_hours)
        pc, pd = splits["bes"]
        bes.set(pc, pd)
        if bes.clamped:
            state.events.add(t, "bes_clamped", pc=pc, pd=pd)
        ev_power = np.zeros(len(self.data.fleet))
        ev_next = list(state.ev_q)
        for i, ev in enumerate(self.data.fleet.vehicles):
            if ev.name not in splits or not np.isfinite(state.ev_q[i]):
                continue
            lo, hi = ev.q_bounds
            batt = _Battery(state.ev_q[i], self.ev_eta_q, ev.efficiency, ev.efficiency, ev.charger_kw,
                            ev.charger_kw, lo, hi, self.grid.dt_hours)
            batt.set(*splits[ev.name])
            ev_power[i] = batt.power
            ev_next[i] = batt.q_next
        imp = load + pv + bes.power + ev_power.sum()
        def log(kind, kw, **extra):
            # slivers at solver tolerance are absorbed without an event
            if abs(kw) > _EVENT_KW:
                state.events.add(t, kind, kw=kw, **extra)

        if imp > lim + _TOL:
            excess = imp - lim
            cut = min(excess, load - beta * L)
            if cut > _TOL:
                load -= cut
                excess -= cut
                log("load_curtailed_emergency", cut)
            if excess > _TOL:
                cut = min(excess, load)
                load -= cut
                excess -= cut
                log("load_below_beta", cut)
            if excess > _TOL:
                moved = -bes.shift(-excess)
                excess -= moved
                log("bes_adjusted", moved, direction="discharge")
            if excess > _TOL:
                state.events.add(t, "pcc_violation", kw=excess)
        elif imp < -lim - _TOL:
            excess = -lim - imp
            cut = min(excess, -pv)
            if cut > _TOL:
                pv += cut
                excess -= cut
                log("pv_curtailed_emergency", cut)
            if excess > _TOL:
                moved = bes.shift(excess)
                excess -= moved
                log("bes_adjusted", moved, direction="charge")
            if excess > _TOL:
                state.events.add(t, "pcc_violation", kw=-excess)
        imp = load + pv + bes.power + ev_power.sum()
        state.bes_q = bes.q_next
        state.ev_q = ev_next
        o = out
        o["load"][t], o["pv"][t], o["bes"][t], o["grid_import"][t] = load, pv, bes.power, imp
        o["ev"][:, t] = ev_power
        o["bes_q"][t + 1] = state.bes_q
        o["ev_q"][:, t + 1] = state.ev_q


def _first_split(agent: StorageAgent, x, slices):
    """First-step ``(p_c, p_d)`` of a storage solution and its planned next charge."""
    if agent.window[0] > 0 or agent.window_length == 0:
        return (0.0, 0.0), None
    pc = float(x[slices["pc"]][0])
    pd = float(x[slices["pd"]][0])
    return (pc, pd), float(x[slices["q"]][1])


class _Battery:
    """One-step battery execution with rate and state clamps."""

    def __init__(self, q, eta_q, eta_c, eta_d, c_max, d_max, q_lo, q_hi, dt):
        self.q, self.eta_q, self.eta_c, self.eta_d = q, eta_q, eta_c, eta_d
        self.c_max, self.d_max, self.q_lo, self.q_hi, self.dt = c_max, d_max, q_lo, q_hi, dt
        self.clamped = False
        self.pc = self.pd = 0.0

    @property
    def power(self) -> float:
        return self.pc - self.pd

    @property
    def q_next(self) -> float:
        return self.eta_q * self.q + self.eta_c * self.dt * self.pc - self.dt / self.eta_d * self.pd

    def set(self, pc, pd):
        pc0, pd0 = pc, pd
        pc = float(np.clip(pc, 0.0, self.c_max))
        pd = float(np.clip(pd, 0.0, self.d_max))
        self.pc, self.pd = pc, pd
        # keep q_next inside the state bounds (solver tolerance or forced shifts)
        if self.q_next > self.q_hi:
            over = self.q_next - self.q_hi
            take = min(self.pc, over / (self.eta_c * self.dt))
            self.pc -= take
            over -= take * self.eta_c * self.dt
            if over > 0:
                self.pd = min(self.d_max, self.pd + over * self.eta_d / self.dt)
        if self.q_next < self.q_lo:
            under = self.q_lo - self.q_next
            take = min(self.pd, under * self.eta_d / self.dt)
            self.pd -= take
            under -= take * self.dt / self.eta_d
            if under > 0:
                self.pc = min(self.c_max, self.pc + under / (self.eta_c * self.dt))
        self.clamped = abs(self.pc - pc0) > 1e-6 or abs(self.pd - pd0) > 1e-6

    def shift(self, delta) -> float:
        """Change net power by up to ``delta`` kW; returns the change achieved."""
        before = self.power
        target = before + delta
        self.set(max(target, 0.0), max(-target, 0.0))
        return self.power - before


# ------------------------------------------------------------------- run


def run(scenario, mode: str | None = None, exchange: ExchangeSettings | None = None,
        warm_start: bool = True, keep_plans: bool = False, steps: int | None = None,
        refit_every: int = 1) -> SimulationResult:
    """Simulate a scenario (config or realized data) in the given mode.

    ``steps`` truncates the run (the planning horizon still shrinks towards
    the configured end of the simulation).
    """
    data = scenario if isinstance(scenario, ScenarioData) else realize(scenario)
    mode = mode or data.config.mode
    ctl = Controller(data, mode, exchange, warm_start, keep_plans, refit_every)
    n = data.grid.sim_steps if steps is None else min(steps, data.grid.sim_steps)
    nv = len(data.fleet)
    out = {
        "load": np.zeros(n), "pv": np.zeros(n), "bes": np.zeros(n), "grid_import": np.zeros(n),
        "ev": np.zeros((nv, n)), "bes_q": np.zeros(n + 1), "ev_q": np.full((nv, n + 1), np.nan),
        "departures": [], "records": [], "plans": [], "planned_q": [],
    }
    state = ctl.initial_state()
    out["bes_q"][0] = state.bes_q
    for _ in range(n):
        ctl.step(state, out)
    a0 = data.history_steps
    return SimulationResult(
        mode=mode, grid=data.grid, load=out["load"], pv=out["pv"], bes=out["bes"],
        grid_import=out["grid_import"], ev=out["ev"], bes_q=out["bes_q"], ev_q=out["ev_q"],
        load_actual=data.load[a0:a0 + n].copy(), pv_actual=data.pv[a0:a0 + n].copy(),
        price=data.price[a0:a0 + n].copy(), ev_names=tuple(v.name for v in data.fleet.vehicles),
        departures=out["departures"], events=state.events, records=out["records"],
        plans=out["plans"] if keep_plans else None, planned_q=out["planned_q"] if keep_plans else None,
    )
