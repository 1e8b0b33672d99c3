"""Shared domain types, time-grid arithmetic and sign conventions.

Sign convention used throughout the package: power consumed by a device is
positive, power generated (or flowing out of a device into the microgrid bus)
is negative.  PV schedules are therefore nonpositive.  The only exception is
the grid agent, whose native schedule is the power *imported* at the point of
common coupling (see :mod:`microgrid_mpc.agents`).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from datetime import datetime, timedelta

import numpy as np

MINUTES_PER_DAY = 24 * 60


@dataclass(frozen=True)
class TimeGrid:
    """Uniform simulation/planning grid.

    Attributes
    ----------
    step_minutes : int
        Length of one step in minutes.
    horizon_steps : int
        MPC lookahead ``T`` in steps.
    sim_steps : int
        Number of executed simulation steps.
    origin : datetime
        Wall-clock time of simulation step 0 (midnight by convention).
    """

    step_minutes: int = 15
    horizon_steps: int = 96
    sim_steps: int = 96
    origin: datetime = datetime(2013, 5, 18)

    def __post_init__(self):
        for name in ("step_minutes", "horizon_steps", "sim_steps"):
            value = getattr(self, name)
            if int(value) != value or value <= 0:
                raise ValueError(f"{name} must be a positive integer, got {value!r}")
        if MINUTES_PER_DAY % self.step_minutes:
            raise ValueError(
                f"step_minutes={self.step_minutes} does not divide a day evenly"
            )

    @property
    def dt_hours(self) -> float:
        return self.step_minutes / 60.0

    @property
    def period_steps(self) -> int:
        return MINUTES_PER_DAY // self.step_minutes

    def timestamp(self, step: int) -> datetime:
        return self.origin + timedelta(minutes=self.step_minutes * int(step))

    def timestamps(self, start: int, count: int) -> list[datetime]:
        return [self.timestamp(start + k) for k in range(count)]

    def horizon_at(self, step: int) -> int:
        """Planning horizon at ``step``; shrinks over the final window."""
        return max(0, min(self.horizon_steps, self.sim_steps - step))


@dataclass(frozen=True)
class PenaltyWeights:
    """Objective weights shared by the agents.

    ``alpha_cyc_ev`` and ``alpha_des`` may be scalars (same for every vehicle)
    or per-vehicle sequences.
    """

    alpha_load: float = 0.0
    alpha_pv: float = 0.0
    alpha_cyc_bes: float = 0.0
    alpha_cyc_ev: float | tuple[float, ...] = 0.0
    alpha_range: float = 0.0
    alpha_diff: float = 0.0
    alpha_curv: float = 0.0
    alpha_prev: float = 0.0
    alpha_des: float | tuple[float, ...] = 1.0
    rho: float = 1.0

    def __post_init__(self):
        for name in (
            "alpha_load", "alpha_pv", "alpha_cyc_bes", "alpha_cyc_ev", "alpha_range",
            "alpha_diff", "alpha_curv", "alpha_prev", "alpha_des",
        ):
            if np.any(np.asarray(getattr(self, name), dtype=float) < 0):
                raise ValueError(f"{name} must be nonnegative")
        if not self.rho > 0:
            raise ValueError("rho must be positive")

    def cyc_ev(self, i: int) -> float:
        return _per_vehicle(self.alpha_cyc_ev, i)

    def des(self, i: int) -> float:
        return _per_vehicle(self.alpha_des, i)


def _per_vehicle(value, i):
    if np.ndim(value) == 0:
        return float(value)
    return float(value[i])


@dataclass(frozen=True)
class SmoothingWeights:
    alpha_range: float = 0.0
    alpha_diff: float = 0.0
    alpha_curv: float = 0.0


def smoothing_cost(p, w) -> float:
    """Range + total-variation + squared-curvature cost of a schedule.

    ``w`` is anything carrying ``alpha_range``, ``alpha_diff`` and
    ``alpha_curv`` attributes (:class:`PenaltyWeights`,
    :class:`SmoothingWeights`, ...).
    """
    p = np.asarray(p, dtype=float)
    if p.ndim != 1 or p.size < 3:
        raise ValueError("smoothing cost needs a schedule of length >= 3")
    d1 = np.diff(p)
    d2 = np.diff(p, n=2)
    return float(
        w.alpha_range * (p.max() - p.min())
        + w.alpha_diff * np.abs(d1).sum()
        + w.alpha_curv * np.dot(d2, d2)
    )


def power_to_energy(p_kw, grid: TimeGrid):
    """Energy in kWh delivered by ``p_kw`` held for one step of ``grid``."""
    return p_kw * grid.step_minutes / 60.0


def per_step_retention(eta_q: float, basis_hours: float | None, dt_hours: float) -> float:
    """Convert a storage retention factor to a per-step factor.

    ``basis_hours=None`` means ``eta_q`` already applies per step.
    """
    if not 0 < eta_q <= 1:
        raise ValueError("retention factor must lie in (0, 1]")
    if basis_hours is None:
        return float(eta_q)
    return float(eta_q ** (dt_hours / basis_hours))


@dataclass
class EventLog:
    """Append-only list of simulation events (PCC clamps, relaxations, ...)."""

    events: list = field(default_factory=list)

    def add(self, step: int, kind: str, **details):
        self.events.append({"step": int(step), "kind": kind, **details})

    def of_kind(self, kind: str) -> list:
        return [e for e in self.events if e["kind"] == kind]

    def __len__(self):
        return len(self.events)
