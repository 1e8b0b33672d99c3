"""DER agents: local objectives, their QP encodings and proximal operators.

Each agent owns a *native* schedule.  For every device except the grid the
native schedule already follows the bus convention (consumption positive).
The grid agent's native schedule is the power imported at the PCC, so it
enters the power balance with ``sign = -1``.  :meth:`Agent.prox` always works
in bus convention; the ``prox_*`` functions work in native convention.

A prox call minimizes ``f(p) + (rho/2)||p - v||^2`` where ``f`` includes the
optional damping term ``alpha_prev ||p - prev||^2``; entries of ``prev`` that
are NaN carry no damping (no overlap with the previous plan).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
import scipy.sparse as sp

from .qp import (
    CanonicalQP,
    QPInfeasibleError,
    QPSettings,
    QPSolution,
    QPStatus,
    QPWorkspace,
    difference_matrix,
    l1_to_qp,
    range_to_qp,
    solve_qp,
)

PROX_SETTINGS = QPSettings(eps_abs=1e-6, eps_rel=0.0, polish=False, max_iter=20000, coarse_eps=1e-3, backend="piqp")


@dataclass
class AgentQP:
    """An agent objective as a QP plus the map from its variables to ``p``.

    ``schedule_map`` (``S``) gives the native schedule ``p = S x``; the bus
    schedule is ``sign * p``.  ``slices`` names blocks of ``x`` (e.g. the
    state-of-charge trajectory of a storage agent).
    """

    qp: CanonicalQP
    schedule_map: sp.csc_matrix
    sign: int = 1
    slices: dict = field(default_factory=dict)


def _prev_terms(prev, alpha_prev, horizon):
    """Mask and filled target of the damping term."""
    if prev is None or alpha_prev == 0:
        return np.zeros(horizon), np.zeros(horizon)
    prev = np.asarray(prev, dtype=float)
    if prev.size != horizon:
        raise ValueError(f"prev has length {prev.size}, expected {horizon}")
    mask = np.isfinite(prev).astype(float)
    return alpha_prev * mask, np.where(mask > 0, prev, 0.0)


def _prev_cost(p, prev, alpha_prev):
    if prev is None or alpha_prev == 0:
        return 0.0
    w, target = _prev_terms(prev, alpha_prev, len(p))
    return float(np.sum(w * (p - target) ** 2))


def _add_prev(qp: CanonicalQP, S, prev, alpha_prev) -> CanonicalQP:
    """Add ``alpha_prev * ||mask*(S x - prev)||^2`` to ``qp``."""
    w, target = _prev_terms(prev, alpha_prev, S.shape[0])
    if not np.any(w):
        return qp
    W = sp.diags(w)
    qp.P = (qp.P + 2 * S.T @ W @ S).tocsc()
    qp.q = qp.q - 2 * S.T @ (w * target)
    qp.offset += float(np.sum(w * target**2))
    return qp


def _add_prox(qp: CanonicalQP, S, v, rho) -> CanonicalQP:
    """Return a copy of ``qp`` with ``(rho/2)||S x - v||^2`` added."""
    v = np.asarray(v, dtype=float)
    return CanonicalQP(
        (qp.P + rho * (S.T @ S)).tocsc(), qp.q - rho * (S.T @ v), qp.A, qp.b,
        qp.lower, qp.upper, qp.offset + 0.5 * rho * float(v @ v),
    )


class Agent:
    """Mixin giving every agent the exchange-facing prox and bookkeeping."""

    sign = 1

    @property
    def horizon(self) -> int:
        raise NotImplementedError

    def prox(self, v, rho: float) -> np.ndarray:
        """Prox in bus convention: returns ``sign * prox_native(sign * v)``."""
        v = np.asarray(v, dtype=float)
        return self.sign * self.prox_native(self.sign * v, rho)

    def prox_native(self, v, rho):
        raise NotImplementedError

    def cost(self, p, include_prev: bool = True) -> float:
        raise NotImplementedError

    def to_qp(self) -> AgentQP:
        raise NotImplementedError


class _QPBacked(Agent):
    """Prox through a cached :class:`QPWorkspace`, rebuilt when rho changes."""

    def _workspace(self, rho):
        cache = self.__dict__.setdefault("_cache", {})
        if cache.get("rho") != rho:
            enc = self.to_qp()
            base = enc.qp
            S = enc.schedule_map
            qp = CanonicalQP((base.P + rho * (S.T @ S)).tocsc(), base.q.copy(), base.A, base.b,
                             base.lower, base.upper, base.offset)
            cache.update(rho=rho, enc=enc, q0=base.q.copy(), ST=S.T.tocsr(),
                         ws=QPWorkspace(qp, PROX_SETTINGS))
        return cache

    def prox_native(self, v, rho):
        cache = self._workspace(rho)
        enc = cache["enc"]
        sol = cache["ws"].solve(cache["q0"] - rho * (cache["ST"] @ np.asarray(v, dtype=float)))
        if sol.status in (QPStatus.INFEASIBLE, QPStatus.UNBOUNDED):
            raise QPInfeasibleError(f"{self.name}: prox subproblem {sol.status.value} ({sol.message})")
        self.last_solution = sol
        return enc.schedule_map @ sol.x


# ---------------------------------------------------------------- load / PV


@dataclass
class LoadAgent(Agent):
    """Curtailable load: ``beta * forecast <= p <= forecast``."""

    demand_forecast: np.ndarray
    beta: float = 0.5
    alpha_load: float = 0.0
    prev: np.ndarray | None = None
    alpha_prev: float = 0.0
    name: str = "load"

    def __post_init__(self):
        self.demand_forecast = np.asarray(self.demand_forecast, dtype=float)
        if np.any(self.demand_forecast < 0):
            raise ValueError("load forecast must be nonnegative")
        if not 0 <= self.beta <= 1:
            raise ValueError("beta must lie in [0, 1]")

    @property
    def horizon(self):
        return self.demand_forecast.size

    @property
    def bounds(self):
        return self.beta * self.demand_forecast, self.demand_forecast

    def prox_native(self, v, rho):
        return prox_load(self, v, rho, self.prev, self.alpha_prev)

    def cost(self, p, include_prev=True):
        p = np.asarray(p, dtype=float)
        c = self.alpha_load * float(np.sum((self.demand_forecast - p) ** 2))
        return c + (_prev_cost(p, self.prev, self.alpha_prev) if include_prev else 0.0)

    def to_qp(self):
        return _tracking_qp(self.demand_forecast, self.alpha_load, *self.bounds, self.prev, self.alpha_prev)


@dataclass
class PVAgent(Agent):
    """Curtailable PV array: ``forecast <= p <= 0`` (forecast is nonpositive)."""

    generation_forecast: np.ndarray
    alpha_pv: float = 0.0
    prev: np.ndarray | None = None
    alpha_prev: float = 0.0
    name: str = "pv"

    def __post_init__(self):
        self.generation_forecast = np.asarray(self.generation_forecast, dtype=float)
        if np.any(self.generation_forecast > 0):
            raise ValueError("PV forecast must be nonpositive (generation is negative)")

    @property
    def horizon(self):
        return self.generation_forecast.size

    @property
    def bounds(self):
        return self.generation_forecast, np.zeros(self.horizon)

    def prox_native(self, v, rho):
        return prox_pv(self, v, rho, self.prev, self.alpha_prev)

    def cost(self, p, include_prev=True):
        p = np.asarray(p, dtype=float)
        c = self.alpha_pv * float(np.sum((self.generation_forecast - p) ** 2))
        return c + (_prev_cost(p, self.prev, self.alpha_prev) if include_prev else 0.0)

    def to_qp(self):
        return _tracking_qp(self.generation_forecast, self.alpha_pv, *self.bounds, self.prev, self.alpha_prev)


def _tracking_qp(target, alpha, lower, upper, prev, alpha_prev) -> AgentQP:
    T = target.size
    I = sp.identity(T, format="csc")
    qp = CanonicalQP(2 * alpha * I, -2 * alpha * target, lower=lower, upper=upper,
                     offset=alpha * float(target @ target))
    return AgentQP(_add_prev(qp, I, prev, alpha_prev), I)


def _clipped_average(target, alpha, v, rho, prev, alpha_prev, lower, upper):
    v = np.asarray(v, dtype=float)
    if v.shape != target.shape:
        raise ValueError(f"target v has shape {v.shape}, expected {target.shape}")
    if not rho > 0:
        raise ValueError("rho must be positive")
    w, pt = _prev_terms(prev, alpha_prev, target.size)
    p = (2 * alpha * target + rho * v + 2 * w * pt) / (2 * alpha + rho + 2 * w)
    return np.clip(p, lower, upper)


def prox_load(agent: LoadAgent, v, rho, prev=None, alpha_prev=0.0) -> np.ndarray:
    """Exact per-step prox of the load curtailment cost on ``[beta p^, p^]``."""
    lo, hi = agent.bounds
    return _clipped_average(agent.demand_forecast, agent.alpha_load, v, rho, prev, alpha_prev, lo, hi)


def prox_pv(agent: PVAgent, v, rho, prev=None, alpha_prev=0.0) -> np.ndarray:
    """Exact per-step prox of the PV curtailment cost on ``[p^, 0]``."""
    lo, hi = agent.bounds
    return _clipped_average(agent.generation_forecast, agent.alpha_pv, v, rho, prev, alpha_prev, lo, hi)


# ----------------------------------------------------------------- storage


@dataclass
class StorageAgent(_QPBacked):
    """Battery (stationary BES or one EV) with split charge/discharge power.

    ``eta_q`` is the per-step retention factor.  ``window = (start, end)``
    is the plugged-in interval in local steps (``p = 0`` outside it); the
    state trajectory covers ``end - start + 1`` points starting at
    ``q_init`` at ``start``.  ``q_final`` pins the state at the window end
    (BES terminal condition), ``q_required`` lower-bounds it (EV departure).
    """

    horizon_steps: int
    c_max: float
    d_max: float
    q_cap: float
    q_init: float
    eta_c: float = 1.0
    eta_d: float = 1.0
    eta_q: float = 1.0
    q_min_frac: float = 0.0
    q_max_frac: float = 1.0
    alpha_cyc: float = 0.0
    dt_hours: float = 0.25
    window: tuple[int, int] | None = None
    q_final: float | None = None
    q_required: float | None = None
    prev: np.ndarray | None = None
    alpha_prev: float = 0.0
    name: str = "bes"

    def __post_init__(self):
        if self.window is None:
            self.window = (0, self.horizon_steps)
        a, e = self.window
        if not 0 <= a <= e <= self.horizon_steps:
            raise ValueError(f"window {self.window} outside horizon {self.horizon_steps}")
        for name in ("eta_c", "eta_d", "eta_q"):
            if not 0 < getattr(self, name) <= 1:
                raise ValueError(f"{name} must lie in (0, 1]")
        if not 0 <= self.q_min_frac <= self.q_max_frac <= 1:
            raise ValueError("need 0 <= q_min_frac <= q_max_frac <= 1")
        if self.q_cap <= 0 or self.c_max < 0 or self.d_max < 0:
            raise ValueError("capacity must be positive and rate limits nonnegative")
        self.last_q = None

    @property
    def horizon(self):
        return self.horizon_steps

    @property
    def q_bounds(self):
        return self.q_min_frac * self.q_cap, self.q_max_frac * self.q_cap

    @property
    def window_length(self):
        return self.window[1] - self.window[0]

    def available(self) -> np.ndarray:
        mask = np.zeros(self.horizon_steps, dtype=bool)
        mask[self.window[0]:self.window[1]] = True
        return mask

    def to_qp(self) -> AgentQP:
        return storage_qp(self)

    def prox_native(self, v, rho):
        p = super().prox_native(v, rho)
        sl = self._cache["enc"].slices["q"]
        self.last_q = self.last_solution.x[sl].copy()
        return p

    def cost(self, p, include_prev=True):
        p = np.asarray(p, dtype=float)
        c = self.alpha_cyc * float(np.abs(np.diff(p)).sum())
        return c + (_prev_cost(p, self.prev, self.alpha_prev) if include_prev else 0.0)

    def split_from_solution(self, sol: QPSolution):
        """``(p_c, p_d, q)`` over the window from a solution of :meth:`to_qp`."""
        L = self.window_length
        return sol.x[:L], sol.x[L:2 * L], sol.x[2 * L:3 * L + 1]


class StorageProx(NamedTuple):
    p: np.ndarray
    q: np.ndarray
    solution: QPSolution


def storage_qp(agent: StorageAgent, prev=None, alpha_prev=None) -> AgentQP:
    """Encode a storage agent's objective and constraints as a QP.

    Variables: ``p_c`` (L), ``p_d`` (L), ``q`` (L+1) over the availability
    window, followed by the L1 auxiliaries of the cycling term.
    """
    prev = agent.prev if prev is None else prev
    alpha_prev = agent.alpha_prev if alpha_prev is None else alpha_prev
    H = agent.horizon_steps
    a, e = agent.window
    L = e - a
    n = 3 * L + 1
    dt = agent.dt_hours
    jj = np.arange(L)
    S = sp.csc_matrix(
        (np.concatenate([np.ones(L), -np.ones(L)]), (np.concatenate([a + jj, a + jj]), np.concatenate([jj, L + jj]))),
        shape=(H, n),
    )
    # dynamics: q0 = q_init;  q_{j+1} - eta_q q_j - eta_c dt pc_j + dt/eta_d pd_j = 0
    rows = [0]
    cols = [2 * L]
    vals = [1.0]
    for j in range(L):
        r = j + 1
        rows += [r, r, r, r]
        cols += [2 * L + j + 1, 2 * L + j, j, L + j]
        vals += [1.0, -agent.eta_q, -agent.eta_c * dt, dt / agent.eta_d]
    A = sp.csc_matrix((vals, (rows, cols)), shape=(L + 1, n))
    b = np.zeros(L + 1)
    b[0] = agent.q_init
    qlo, qhi = agent.q_bounds
    lower = np.concatenate([np.zeros(2 * L), np.full(L + 1, qlo)])
    upper = np.concatenate([np.full(L, agent.c_max), np.full(L, agent.d_max), np.full(L + 1, qhi)])
    # the initial state is pinned by the equality row, not by the bounds
    lower[2 * L] = -np.inf
    upper[2 * L] = np.inf
    if agent.q_final is not None:
        lower[3 * L] = upper[3 * L] = agent.q_final
    elif agent.q_required is not None and L > 0:
        lower[3 * L] = max(qlo, agent.q_required)
    qp = CanonicalQP(sp.csc_matrix((n, n)), np.zeros(n), A, b, lower, upper)
    qp = _add_prev(qp, S, prev, alpha_prev)
    if agent.alpha_cyc > 0 and H > 1 and L > 0:
        D = (difference_matrix(H) @ S).tocsr()
        keep = np.flatnonzero(np.diff(D.indptr) > 0)
        if keep.size:
            qp = l1_to_qp(agent.alpha_cyc, D[keep].tocsc(), qp)
            S = sp.hstack([S, sp.csc_matrix((H, qp.n - n))], format="csc")
    return AgentQP(qp, S, 1, {"pc": slice(0, L), "pd": slice(L, 2 * L), "q": slice(2 * L, 3 * L + 1)})


def prox_storage(agent: StorageAgent, v, rho, prev=None, alpha_prev=0.0,
                 settings: QPSettings | None = None) -> StorageProx:
    """Prox of a storage agent; ``q`` is the state trajectory over its window.

    Raises
    ------
    QPInfeasibleError
        If the constraints cannot be met (typically an unreachable departure
        requirement; see :func:`reachability_check`).
    """
    enc = storage_qp(agent, prev=prev, alpha_prev=alpha_prev)
    qp = _add_prox(enc.qp, enc.schedule_map, v, rho)
    sol = solve_qp(qp, settings or QPSettings(eps_abs=1e-7))
    if sol.status in (QPStatus.INFEASIBLE, QPStatus.UNBOUNDED):
        raise QPInfeasibleError(f"{agent.name}: storage prox {sol.status.value} ({sol.message})")
    return StorageProx(enc.schedule_map @ sol.x, sol.x[enc.slices["q"]], sol)


class Reachability(NamedTuple):
    feasible: bool
    max_attainable: float


def reachability_check(agent: StorageAgent, tol: float = 1e-9) -> Reachability:
    """Charge at full rate over the window and compare with the requirement."""
    q = agent.q_init
    qmax = agent.q_bounds[1]
    gain = agent.eta_c * agent.c_max * agent.dt_hours
    for _ in range(agent.window_length):
        q = min(agent.eta_q * q + gain, max(qmax, agent.eta_q * q))
    need = agent.q_required if agent.q_required is not None else -np.inf
    if agent.q_final is not None:
        need = agent.q_final
    return Reachability(bool(q >= need - tol), float(q))


# -------------------------------------------------------------------- grid


@dataclass
class GridAgent(_QPBacked):
    """PCC connection; native schedule is the imported power (kW).

    Cost: ``sum_t c_t p_t dt`` plus range, total-variation and curvature
    smoothing; ``|p| <= p_pcc_limit``.
    """

    price: np.ndarray
    p_pcc_limit: float
    alpha_range: float = 0.0
    alpha_diff: float = 0.0
    alpha_curv: float = 0.0
    dt_hours: float = 0.25
    prev: np.ndarray | None = None
    alpha_prev: float = 0.0
    name: str = "grid"
    sign = -1

    def __post_init__(self):
        self.price = np.asarray(self.price, dtype=float)
        if not self.p_pcc_limit > 0:
            raise ValueError("p_pcc_limit must be positive")

    @property
    def horizon(self):
        return self.price.size

    def to_qp(self):
        return grid_qp(self)

    def energy_cost(self, p) -> float:
        return float(np.sum(self.price * np.asarray(p, dtype=float)) * self.dt_hours)

    def cost(self, p, include_prev=True):
        p = np.asarray(p, dtype=float)
        c = self.energy_cost(p)
        if p.size > 1:
            c += self.alpha_range * (p.max() - p.min()) + self.alpha_diff * np.abs(np.diff(p)).sum()
        if p.size > 2:
            d2 = np.diff(p, 2)
            c += self.alpha_curv * float(d2 @ d2)
        return float(c) + (_prev_cost(p, self.prev, self.alpha_prev) if include_prev else 0.0)


def grid_qp(agent: GridAgent, prev=None, alpha_prev=None) -> AgentQP:
    prev = agent.prev if prev is None else prev
    alpha_prev = agent.alpha_prev if alpha_prev is None else alpha_prev
    H = agent.horizon
    I = sp.identity(H, format="csc")
    P = sp.csc_matrix((H, H))
    if agent.alpha_curv > 0 and H > 2:
        D2 = difference_matrix(H, 2)
        P = (2 * agent.alpha_curv * D2.T @ D2).tocsc()
    lim = agent.p_pcc_limit
    qp = CanonicalQP(P, agent.price * agent.dt_hours, lower=np.full(H, -lim), upper=np.full(H, lim))
    qp = _add_prev(qp, I, prev, alpha_prev)
    if agent.alpha_range > 0 and H > 1:
        qp = range_to_qp(agent.alpha_range, qp, selector=I)
    if agent.alpha_diff > 0 and H > 1:
        D1 = sp.hstack([difference_matrix(H), sp.csc_matrix((H - 1, qp.n - H))], format="csc")
        qp = l1_to_qp(agent.alpha_diff, D1, qp)
    S = sp.hstack([I, sp.csc_matrix((H, qp.n - H))], format="csc")
    return AgentQP(qp, S, -1)


def prox_grid(agent: GridAgent, v, rho, prev=None, alpha_prev=0.0,
              settings: QPSettings | None = None) -> np.ndarray:
    """Prox of the grid agent in native (import-positive) convention."""
    enc = grid_qp(agent, prev=prev, alpha_prev=alpha_prev)
    sol = solve_qp(_add_prox(enc.qp, enc.schedule_map, v, rho), settings or QPSettings(eps_abs=1e-7))
    if sol.status in (QPStatus.INFEASIBLE, QPStatus.UNBOUNDED):
        raise QPInfeasibleError(f"{agent.name}: grid prox {sol.status.value}")
    return enc.schedule_map @ sol.x


# ------------------------------------------------------------------ toy


@dataclass
class QuadraticAgent(Agent):
    """``sum_t w_t (p_t - target_t)^2`` on a box; used by the oracle tests."""

    target: np.ndarray
    weight: np.ndarray | float = 1.0
    lower: np.ndarray | float = -np.inf
    upper: np.ndarray | float = np.inf
    name: str = "quad"
    prev: np.ndarray | None = None
    alpha_prev: float = 0.0

    def __post_init__(self):
        self.target = np.atleast_1d(np.asarray(self.target, dtype=float))
        T = self.target.size
        self.weight = np.broadcast_to(np.asarray(self.weight, dtype=float), (T,)).copy()
        self.lower = np.broadcast_to(np.asarray(self.lower, dtype=float), (T,)).copy()
        self.upper = np.broadcast_to(np.asarray(self.upper, dtype=float), (T,)).copy()

    @property
    def horizon(self):
        return self.target.size

    def prox_native(self, v, rho):
        return _clipped_average(self.target, self.weight, v, rho, self.prev, self.alpha_prev,
                                self.lower, self.upper)

    def cost(self, p, include_prev=True):
        p = np.asarray(p, dtype=float)
        c = float(np.sum(self.weight * (p - self.target) ** 2))
        return c + (_prev_cost(p, self.prev, self.alpha_prev) if include_prev else 0.0)

    def to_qp(self):
        T = self.horizon
        I = sp.identity(T, format="csc")
        qp = CanonicalQP(sp.diags(2 * self.weight).tocsc(), -2 * self.weight * self.target,
                         lower=self.lower, upper=self.upper,
                         offset=float(np.sum(self.weight * self.target**2)))
        return AgentQP(_add_prev(qp, I, self.prev, self.alpha_prev), I)
