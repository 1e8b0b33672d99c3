"""Exchange ADMM coordinator.

Agents minimize their own objective plus a quadratic pull toward
``p_i^k - pbar^k - u^k``; the collector averages the returned schedules and
accumulates the mean imbalance into a single scaled price ``u``.  The only
messages are the schedules going up and ``(pbar, u)`` coming back down.
"""

from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

logger = logging.getLogger(__name__)

CONVERGED = "converged"
MAX_ITERATIONS = "max_iterations"


class ExchangeError(RuntimeError):
    """An agent failed inside the exchange iteration."""


@dataclass
class ExchangeSettings:
    """Stopping tolerances, penalty and execution options.

    ``eps_pri``/``eps_dual`` default to ``1e-3 * sqrt(N*T)``.
    """

    eps_pri: float | None = None
    eps_dual: float | None = None
    max_iter: int = 2000
    rho: float = 1.0
    rho_adapt: str = "none"
    adapt_factor: float = 2.0
    adapt_ratio: float = 10.0
    parallelism: int = 1

    def __post_init__(self):
        if self.rho <= 0:
            raise ValueError("rho must be positive")
        for name in ("eps_pri", "eps_dual"):
            value = getattr(self, name)
            if value is not None and value <= 0:
                raise ValueError(f"{name} must be positive")
        if self.rho_adapt not in ("none", "balance"):
            raise ValueError("rho_adapt must be 'none' or 'balance'")

    def tolerances(self, n_agents: int, horizon: int) -> tuple[float, float]:
        default = 1e-3 * math.sqrt(n_agents * horizon)
        return (self.eps_pri or default, self.eps_dual or default)


@dataclass
class ExchangeState:
    """Iterate of the exchange algorithm (bus convention schedules)."""

    schedules: np.ndarray
    u: np.ndarray
    rho: float
    k: int = 0
    names: tuple = ()
    residual_history: list = field(default_factory=list)

    @property
    def mean(self) -> np.ndarray:
        return mean_schedule(self.schedules)

    @property
    def y(self) -> np.ndarray:
        """Unscaled internal price ``rho * u``."""
        return self.rho * self.u

    @property
    def n_agents(self) -> int:
        return self.schedules.shape[0]

    def schedule(self, name) -> np.ndarray:
        return self.schedules[self.names.index(name)]


@dataclass
class ExchangeResult:
    state: ExchangeState
    status: str
    objective: float
    iterations: int
    r_norm: float
    s_norm: float
    trace: list = field(default_factory=list)

    @property
    def converged(self) -> bool:
        return self.status == CONVERGED


def mean_schedule(schedules: np.ndarray) -> np.ndarray:
    """Average over agents, summed in a fixed row order."""
    total = np.zeros(schedules.shape[1])
    for row in schedules:
        total += row
    return total / schedules.shape[0]


def residuals(state: ExchangeState, prev: ExchangeState) -> tuple[float, float]:
    """Primal ``||pbar^k||`` and dual ``rho ||(p^k - pbar^k) - (p^{k-1} - pbar^{k-1})||``."""
    if state.schedules.shape != prev.schedules.shape:
        raise ValueError("states have different agent count or horizon")
    mean = state.mean
    dev = (state.schedules - mean) - (prev.schedules - prev.mean)
    return float(np.linalg.norm(mean)), float(state.rho * np.linalg.norm(dev))


def rescale_rho(state: ExchangeState, new_rho: float) -> ExchangeState:
    """Change the penalty while keeping the unscaled price ``rho * u`` fixed."""
    if not new_rho > 0:
        raise ValueError("rho must be positive")
    if new_rho == state.rho:
        return state
    return replace(state, u=state.u * (state.rho / new_rho), rho=float(new_rho))


class Collector:
    """Gathers schedules, returns the mean imbalance and the updated price."""

    def __init__(self, u):
        self.u = np.array(u, dtype=float)

    def exchange(self, schedules: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        mean = mean_schedule(schedules)
        self.u = self.u + mean
        return mean, self.u.copy()


def _initial_state(agents, init, rho) -> ExchangeState:
    names = tuple(a.name for a in agents)
    T = agents[0].horizon
    if init is None:
        return ExchangeState(np.zeros((len(agents), T)), np.zeros(T), rho, 0, names)
    if init.schedules.shape != (len(agents), T):
        raise ValueError("initial state does not match the agents")
    state = replace(init, names=names, k=0, residual_history=[])
    return rescale_rho(state, rho)


def _objective(agents, schedules) -> float:
    return float(sum(a.cost(a.sign * p) for a, p in zip(agents, schedules)))


_SNAPSHOT_ATTRS = ("last_q", "last_solution")


def _snapshot(agents):
    return [{k: getattr(a, k) for k in _SNAPSHOT_ATTRS if hasattr(a, k)} for a in agents]


def run_exchange(agents, init: ExchangeState | None = None,
                 settings: ExchangeSettings | None = None) -> ExchangeResult:
    """Run exchange ADMM until the residual tolerances are met.

    Parameters
    ----------
    agents : sequence
        Objects with ``name``, ``horizon``, ``sign``, ``prox(v, rho)`` and
        ``cost(p)``.  All must share one horizon.
    init : ExchangeState, optional
        Warm start (schedules and scaled price).  Its ``rho`` is rescaled to
        ``settings.rho`` if they differ.
    settings : ExchangeSettings, optional

    Returns
    -------
    ExchangeResult
        On ``max_iterations`` the state with the smallest normalized residual
        seen is returned.
    """
    settings = settings or ExchangeSettings()
    agents = list(agents)
    if len(agents) < 2:
        raise ValueError("exchange needs at least two agents")
    T = agents[0].horizon
    if any(a.horizon != T for a in agents):
        raise ValueError("all agents must share one horizon")
    N = len(agents)
    eps_pri, eps_dual = settings.tolerances(N, T)
    state = _initial_state(agents, init, settings.rho)
    collector = Collector(state.u)
    mean = state.mean
    pool = ThreadPoolExecutor(settings.parallelism) if settings.parallelism > 1 else None

    def prox(i, v, rho):
        try:
            return agents[i].prox(v, rho)
        except Exception as err:  # noqa: BLE001 - re-raised with the agent named
            raise ExchangeError(f"agent {agents[i].name!r} failed in prox: {err}") from err

    trace = []
    best = None
    status = MAX_ITERATIONS
    r_norm = s_norm = math.inf
    try:
        for k in range(1, settings.max_iter + 1):
            targets = state.schedules - mean - collector.u
            rho = state.rho
            if pool is None:
                rows = [prox(i, targets[i], rho) for i in range(N)]
            else:
                rows = list(pool.map(prox, range(N), targets, [rho] * N))
            new = np.vstack(rows)
            new_mean, u = collector.exchange(new)
            dev = (new - new_mean) - (state.schedules - mean)
            r_norm = float(np.linalg.norm(new_mean))
            s_norm = float(rho * np.linalg.norm(dev))
            history = state.residual_history
            history.append((r_norm, s_norm))
            state = ExchangeState(new, u, rho, k, state.names, history)
            mean = new_mean
            objective = _objective(agents, new)
            trace.append({"k": k, "r_norm": r_norm, "s_norm": s_norm, "objective": objective, "rho": rho})
            score = max(r_norm / eps_pri, s_norm / eps_dual)
            if best is None or score < best[0]:
                best = (score, state, objective, _snapshot(agents), r_norm, s_norm)
            if r_norm <= eps_pri and s_norm <= eps_dual:
                status = CONVERGED
                break
            if settings.rho_adapt == "balance":
                if r_norm > settings.adapt_ratio * s_norm:
                    state = rescale_rho(state, rho * settings.adapt_factor)
                elif s_norm > settings.adapt_ratio * r_norm:
                    state = rescale_rho(state, rho / settings.adapt_factor)
                collector.u = state.u.copy()
    finally:
        if pool is not None:
            pool.shutdown()

    if status == CONVERGED:
        return ExchangeResult(state, status, objective, state.k, r_norm, s_norm, trace)
    _, bstate, bobj, snap, br, bs = best
    for agent, attrs in zip(agents, snap):
        for key, value in attrs.items():
            setattr(agent, key, value)
    logger.info("exchange stopped at max_iter=%d (r=%.3g, s=%.3g)", settings.max_iter, br, bs)
    return ExchangeResult(bstate, MAX_ITERATIONS, bobj, state.k, br, bs, trace)


def write_trace_csv(trace, path) -> None:
    """Write an iteration trace as CSV with columns ``k, r_norm, s_norm, objective``."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["k", "r_norm", "s_norm", "objective"])
        for row in trace:
            writer.writerow([row["k"], repr(row["r_norm"]), repr(row["s_norm"]), repr(row["objective"])])


def search_rho(make_agents, lo: float = 1e-4, hi: float = 1e2, rounds: int = 12,
               settings: ExchangeSettings | None = None) -> tuple[float, int]:
    """Bracketing search over ``log10(rho)`` for the fewest exchange iterations.

    ``make_agents`` builds a fresh agent list for each trial.  Returns the
    best ``(rho, iterations)`` found.
    """
    settings = settings or ExchangeSettings()
    cache = {}

    def iters(log_rho):
        key = round(log_rho, 6)
        if key not in cache:
            res = run_exchange(make_agents(), settings=replace(settings, rho=10.0**log_rho))
            cache[key] = res.iterations if res.converged else settings.max_iter + 1
        return cache[key]

    a, b = math.log10(lo), math.log10(hi)
    for _ in range(rounds):
        m1 = a + (b - a) / 3
        m2 = b - (b - a) / 3
        if iters(m1) <= iters(m2):
            b = m2
        else:
            a = m1
    best_key = min(cache, key=lambda kk: (cache[kk], kk))
    return 10.0**best_key, cache[best_key]
