"""Scenario configuration, data ingestion and synthetic generators.

A scenario is a YAML file validated into :class:`ScenarioConfig`.  Realizing
it (:func:`realize`) produces the actual PV, load and price series over the
history window plus the simulated days, and the EV fleet with one plug-in
session per vehicle per day.  Absolute step 0 is the start of the history;
simulation starts at ``history_steps``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from datetime import datetime, timedelta
from importlib import resources
from pathlib import Path
from typing import Annotated, Literal, Union

import numpy as np
import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .core import TimeGrid, per_step_retention
from .forecast import EVSession

KWH_PER_MILE = 0.311


class ScenarioError(ValueError):
    """Invalid or unreadable scenario."""


class _Model(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


# ------------------------------------------------------------------ sources


class CSVSource(_Model):
    kind: Literal["csv"] = "csv"
    path: str


class SyntheticPV(_Model):
    kind: Literal["synthetic"] = "synthetic"
    peak_kw: float = Field(1200.0, gt=0)
    sunrise_hour: float = Field(6.0, ge=0, lt=24)
    sunset_hour: float = Field(20.0, gt=0, le=24)
    clearness: tuple[float, float] = (0.9, 1.0)
    cloud_events_per_day: float = Field(1.0, ge=0)
    cloud_depth: float = Field(0.3, ge=0, le=1)
    noise_kw: float = Field(15.0, ge=0)
    noise_ar: float = Field(0.5, ge=0, lt=1)

    @model_validator(mode="after")
    def _daylight(self):
        if self.sunset_hour <= self.sunrise_hour:
            raise ValueError("sunset_hour must come after sunrise_hour")
        return self


class SyntheticLoad(_Model):
    kind: Literal["synthetic"] = "synthetic"
    base_kw: float = Field(320.0, ge=0)
    morning_peak_kw: float = Field(220.0, ge=0)
    afternoon_peak_kw: float = Field(300.0, ge=0)
    day_scale: tuple[float, float] = (0.95, 1.05)
    noise_kw: float = Field(12.0, ge=0)
    noise_ar: float = Field(0.5, ge=0, lt=1)


class SyntheticPrice(_Model):
    kind: Literal["synthetic"] = "synthetic"
    low: float = 0.02
    high: float = 0.08
    day_scale: tuple[float, float] = (0.9, 1.1)

    @model_validator(mode="after")
    def _order(self):
        if self.high < self.low:
            raise ValueError("price high must be >= low")
        return self


PVSource = Annotated[Union[SyntheticPV, CSVSource], Field(discriminator="kind")]
LoadSource = Annotated[Union[SyntheticLoad, CSVSource], Field(discriminator="kind")]
PriceSource = Annotated[Union[SyntheticPrice, CSVSource], Field(discriminator="kind")]


# ------------------------------------------------------------------ devices


class GridConfig(_Model):
    step_minutes: int = Field(15, gt=0)
    horizon_steps: int = Field(96, gt=0)
    sim_steps: int = Field(288, gt=0)
    origin: datetime = datetime(2013, 5, 18)

    def time_grid(self) -> TimeGrid:
        return TimeGrid(self.step_minutes, self.horizon_steps, self.sim_steps, self.origin)


class BESConfig(_Model):
    """Stationary battery; the defaults are the reference parameter block.

    ``eta_q`` is the charge retained over ``eta_q_basis_hours``; the per-step
    factor is derived from the step length (``None``: ``eta_q`` is per step).
    """

    capacity_kwh: float = Field(3000.0, gt=0)
    c_max_kw: float = Field(500.0, ge=0)
    d_max_kw: float = Field(500.0, ge=0)
    eta_c: float = Field(0.85, gt=0, le=1)
    eta_d: float = Field(0.85, gt=0, le=1)
    eta_q: float = Field(0.90, gt=0, le=1)
    eta_q_basis_hours: float | None = Field(24.0, gt=0)
    q_min_frac: float = Field(0.20, ge=0, le=1)
    q_max_frac: float = Field(0.90, ge=0, le=1)
    q_init_frac: float = Field(0.5, ge=0, le=1)
    q_final_frac: float = Field(0.5, ge=0, le=1)
    alpha_cyc: float = Field(1e-3, ge=0)

    @model_validator(mode="after")
    def _fractions(self):
        lo, hi = self.q_min_frac, self.q_max_frac
        if not lo <= hi:
            raise ValueError("q_min_frac must not exceed q_max_frac")
        for name in ("q_init_frac", "q_final_frac"):
            if not lo <= getattr(self, name) <= hi:
                raise ValueError(f"{name} must lie within [q_min_frac, q_max_frac]")
        return self


class EVFleetConfig(_Model):
    """EV fleet; batteries are sized from each vehicle's longest trip."""

    count: int = Field(20, ge=0)
    charger_kw: float = Field(7.2, gt=0)
    efficiency: float = Field(0.9, gt=0, le=1)
    eta_q: float = Field(1.0, gt=0, le=1)
    eta_q_basis_hours: float | None = Field(24.0, gt=0)
    q_min_frac: float = Field(0.3, ge=0, le=1)
    q_max_frac: float = Field(0.9, ge=0, le=1)
    trip_miles: list[float] | None = None
    trip_miles_range: tuple[float, float] = (20.0, 60.0)
    arrival_habit_steps: tuple[int, int] = (30, 38)
    departure_habit_steps: tuple[int, int] = (64, 74)
    punctuality: float = Field(0.6, ge=0, le=1)
    jitter_steps: int = Field(3, ge=0)
    q_init_frac_range: tuple[float, float] = (0.3, 0.6)
    q_des_frac_range: tuple[float, float] = (0.75, 0.85)
    alpha_cyc: float = Field(1e-4, ge=0)
    alpha_des: float = Field(1.0, gt=0, le=1)
    required_margin_kwh: float = Field(1e-3, ge=0)

    @model_validator(mode="after")
    def _check(self):
        if self.q_min_frac > self.q_max_frac:
            raise ValueError("q_min_frac must not exceed q_max_frac")
        if self.trip_miles is not None:
            if len(self.trip_miles) != self.count:
                raise ValueError("trip_miles must list one distance per vehicle")
            if any(m <= 0 for m in self.trip_miles):
                raise ValueError("trip distances must be positive")
        for name in ("trip_miles_range", "arrival_habit_steps", "departure_habit_steps",
                     "q_init_frac_range", "q_des_frac_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name} must be an increasing pair")
        if self.trip_miles_range[0] <= 0:
            raise ValueError("trip distances must be positive")
        if self.arrival_habit_steps[1] + self.jitter_steps >= self.departure_habit_steps[0] - self.jitter_steps:
            raise ValueError("arrival and departure habits overlap")
        return self


class WeightsConfig(_Model):
    alpha_load: float = Field(0.01, ge=0)
    alpha_pv: float = Field(1e-3, ge=0)
    alpha_range: float = Field(0.05, ge=0)
    alpha_diff: float = Field(0.01, ge=0)
    alpha_curv: float = Field(1e-4, ge=0)
    alpha_prev: float = Field(1e-4, ge=0)
    beta: float = Field(0.5, ge=0, le=1)


class SignalForecastConfig(_Model):
    gamma_asym: float = Field(1.0, ge=0)
    gamma_curv: float = Field(1.0, ge=0)
    ar_order: int = Field(4, ge=1)
    decay: float = Field(0.7, gt=0, lt=1)


class ForecastConfig(_Model):
    history_days: int = Field(5, ge=2)
    pv: SignalForecastConfig = SignalForecastConfig(gamma_asym=9.0)
    load: SignalForecastConfig = SignalForecastConfig(gamma_asym=1.0)


class ADMMConfig(_Model):
    rho: float = Field(1.0, gt=0)
    eps_pri: float | None = Field(None, gt=0)
    eps_dual: float | None = Field(None, gt=0)
    max_iter: int = Field(2000, ge=1)
    rho_adapt: Literal["none", "balance"] = "none"
    parallelism: int = Field(1, ge=1)


class ScenarioConfig(_Model):
    """Complete, validated experiment description."""

    seed: int
    name: str = "scenario"
    mode: Literal["admm", "centralized", "prescient"] = "admm"
    grid: GridConfig = GridConfig()
    pcc_limit_kw: float = Field(200.0, gt=0)
    pv: PVSource = SyntheticPV()
    load: LoadSource = SyntheticLoad()
    price: PriceSource = SyntheticPrice()
    bes: BESConfig = BESConfig()
    ev: EVFleetConfig = EVFleetConfig()
    weights: WeightsConfig = WeightsConfig()
    forecast: ForecastConfig = ForecastConfig()
    admm: ADMMConfig = ADMMConfig()

    @model_validator(mode="after")
    def _grid(self):
        try:
            self.grid.time_grid()
        except ValueError as err:
            raise ValueError(f"grid: {err}") from None
        return self

    def with_overrides(self, **changes) -> "ScenarioConfig":
        """Copy with dotted-path overrides, e.g. ``{"admm.rho": 0.01}``; revalidated."""
        data = self.model_dump(mode="python")
        for path, value in changes.items():
            node = data
            *parents, leaf = path.split(".")
            for key in parents:
                node = node[key]
            node[leaf] = value
        return ScenarioConfig.model_validate(data)

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.model_dump(mode="json"), sort_keys=False)


def _format_errors(err: ValidationError) -> str:
    parts = []
    for e in err.errors():
        loc = ".".join(str(x) for x in e["loc"]) or "<root>"
        parts.append(f"{loc}: {e['msg']}")
    return "; ".join(parts)


def parse_scenario(data: dict, base_dir: Path | None = None) -> ScenarioConfig:
    """Validate a mapping; CSV paths are resolved against ``base_dir``.

    A series block without ``kind`` is read as CSV when it names a ``path``
    and as synthetic otherwise.
    """
    data = dict(data or {})
    for name in ("pv", "load", "price"):
        block = data.get(name)
        if isinstance(block, dict) and "kind" not in block:
            data[name] = {"kind": "csv" if "path" in block else "synthetic", **block}
    try:
        cfg = ScenarioConfig.model_validate(data)
    except ValidationError as err:
        raise ScenarioError(_format_errors(err)) from None
    changes = {}
    for name in ("pv", "load", "price"):
        src = getattr(cfg, name)
        if isinstance(src, CSVSource):
            path = Path(src.path)
            if not path.is_absolute() and base_dir is not None:
                path = base_dir / path
            if not path.is_file():
                raise ScenarioError(f"{name}.path: file not found: {path}")
            changes[f"{name}.path"] = str(path)
    return cfg.with_overrides(**changes) if changes else cfg


def load_scenario(path) -> ScenarioConfig:
    path = Path(path)
    try:
        data = yaml.safe_load(path.read_text())
    except OSError as err:
        raise ScenarioError(f"cannot read scenario {path}: {err}") from None
    except yaml.YAMLError as err:
        raise ScenarioError(f"malformed YAML in {path}: {err}") from None
    if data is not None and not isinstance(data, dict):
        raise ScenarioError("scenario file must hold a mapping")
    return parse_scenario(data, path.parent)


def save_scenario(cfg: ScenarioConfig, path) -> None:
    Path(path).write_text(cfg.to_yaml())


def bundled_scenario_path() -> Path:
    return Path(str(resources.files("microgrid_mpc") / "data" / "synthetic_3day.yaml"))


def bundled_scenario() -> ScenarioConfig:
    """The seeded synthetic 3-day scenario shipped with the package."""
    return load_scenario(bundled_scenario_path())


# --------------------------------------------------------------------- CSV


def write_series_csv(path, timestamps, values, column: str = "kw") -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["timestamp", column])
        for ts, v in zip(timestamps, values):
            w.writerow([ts.isoformat(), repr(float(v))])


def read_series_csv(path) -> tuple[list[datetime], np.ndarray]:
    """Read a ``timestamp,<value>`` CSV and check uniform, increasing spacing."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or len(rows[0]) != 2 or rows[0][0].strip() != "timestamp":
        raise ScenarioError(f"{path}: expected header 'timestamp,<value>'")
    stamps, values = [], []
    for i, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        try:
            stamps.append(datetime.fromisoformat(row[0].strip()))
            values.append(float(row[1]))
        except (ValueError, IndexError):
            raise ScenarioError(f"{path}:{i}: cannot parse row {row!r}") from None
    if len(stamps) < 2:
        raise ScenarioError(f"{path}: need at least two samples")
    step = stamps[1] - stamps[0]
    if step <= timedelta(0):
        raise ScenarioError(f"{path}: timestamps must increase")
    for i in range(2, len(stamps)):
        if stamps[i] - stamps[i - 1] != step:
            raise ScenarioError(f"{path}: non-uniform spacing at {stamps[i].isoformat()}")
    return stamps, np.asarray(values)


def resample_hold(stamps, values, start: datetime, count: int, step_minutes: int) -> np.ndarray:
    """Zero-order hold of a uniform series onto ``count`` steps from ``start``."""
    src_step = stamps[1] - stamps[0]
    dst_step = timedelta(minutes=step_minutes)
    ratio = src_step / dst_step
    if ratio < 1 or abs(ratio - round(ratio)) > 1e-9:
        raise ScenarioError(f"series spacing {src_step} is not a multiple of the {step_minutes}-min step")
    ratio = int(round(ratio))
    offset = (start - stamps[0]) / dst_step
    if offset < 0 or abs(offset - round(offset)) > 1e-9:
        raise ScenarioError(f"series does not start on the grid before {start.isoformat()}")
    idx = (int(round(offset)) + np.arange(count)) // ratio
    if idx[-1] >= len(values):
        raise ScenarioError(f"series ends before {(start + count * dst_step).isoformat()}")
    return np.asarray(values)[idx]


# --------------------------------------------------------------- generators


def _ar_noise(rng, n, sigma, phi):
    e = rng.normal(0.0, sigma * math.sqrt(1 - phi**2), n)
    out = np.empty(n)
    acc = rng.normal(0.0, sigma)
    for i in range(n):
        acc = phi * acc + e[i]
        out[i] = acc
    return out


def synthetic_pv(spec: SyntheticPV, days: int, step_minutes: int, rng) -> np.ndarray:
    """PV output in bus convention (nonpositive): clear-sky arc, cloud dips, AR noise."""
    per_day = 24 * 60 // step_minutes
    hours = (np.arange(per_day) + 0.5) * step_minutes / 60
    span = spec.sunset_hour - spec.sunrise_hour
    clear = np.clip(np.sin(np.pi * (hours - spec.sunrise_hour) / span), 0, None)
    clear[(hours < spec.sunrise_hour) | (hours > spec.sunset_hour)] = 0.0
    out = np.empty(days * per_day)
    for d in range(days):
        level = spec.peak_kw * rng.uniform(*spec.clearness) * clear
        for _ in range(rng.poisson(spec.cloud_events_per_day)):
            centre = rng.uniform(spec.sunrise_hour + 1, spec.sunset_hour - 1)
            width = rng.uniform(0.25, 1.0)
            depth = rng.uniform(0.3, 1.0) * spec.cloud_depth
            level = level * (1 - depth * np.exp(-0.5 * ((hours - centre) / width) ** 2))
        out[d * per_day:(d + 1) * per_day] = level
    noise = _ar_noise(rng, out.size, spec.noise_kw, spec.noise_ar)
    daylight = np.tile(clear, days) > 0
    mag = np.where(daylight, np.clip(out + noise * np.tile(clear, days), 0, None), 0.0)
    return -mag


def synthetic_load(spec: SyntheticLoad, days: int, step_minutes: int, rng) -> np.ndarray:
    """Commercial double-hump demand (kW, nonnegative)."""
    per_day = 24 * 60 // step_minutes
    h = (np.arange(per_day) + 0.5) * step_minutes / 60
    shape = (spec.base_kw
             + spec.morning_peak_kw * np.exp(-0.5 * ((h - 10.0) / 2.0) ** 2)
             + spec.afternoon_peak_kw * np.exp(-0.5 * ((h - 15.5) / 2.5) ** 2))
    scale = np.repeat(rng.uniform(*spec.day_scale, size=days), per_day)
    noise = _ar_noise(rng, days * per_day, spec.noise_kw, spec.noise_ar)
    return np.clip(np.tile(shape, days) * scale + noise, 0, None)


def synthetic_price_hourly(spec: SyntheticPrice, days: int, rng) -> np.ndarray:
    """Day-ahead style hourly prices ($/kWh): midday solar trough, evening peak."""
    h = np.arange(24) + 0.5
    shape = (0.55 + 0.35 * np.cos(2 * np.pi * (h - 19.0) / 24)
             - 0.45 * np.exp(-0.5 * ((h - 13.0) / 2.5) ** 2)
             + 0.25 * np.exp(-0.5 * ((h - 7.5) / 1.2) ** 2))
    shape = (shape - shape.min()) / (shape.max() - shape.min())
    base = spec.low + (spec.high - spec.low) * shape
    return np.concatenate([base * rng.uniform(*spec.day_scale) for _ in range(days)])


# --------------------------------------------------------------------- EVs


def size_ev_battery(longest_trip_miles: float, buffer: float = 2.0,
                    kwh_per_mile: float = KWH_PER_MILE) -> float:
    """Battery capacity covering the longest trip with a safety buffer (kWh)."""
    if not longest_trip_miles > 0:
        raise ValueError("trip distance must be positive")
    return buffer * longest_trip_miles * kwh_per_mile


@dataclass(frozen=True)
class EVSpec:
    name: str
    capacity_kwh: float
    charger_kw: float
    efficiency: float
    eta_q: float
    q_min_frac: float
    q_max_frac: float
    q_des: float
    arrival_habit: int
    departure_habit: int

    @property
    def q_bounds(self):
        return self.q_min_frac * self.capacity_kwh, self.q_max_frac * self.capacity_kwh


@dataclass(frozen=True)
class Fleet:
    vehicles: tuple
    sessions: tuple  # sessions[i][d]: vehicle i on day d, step-of-day times

    def __len__(self):
        return len(self.vehicles)


def _jittered(rng, habit, spec: EVFleetConfig, per_day: int) -> int:
    if rng.random() < spec.punctuality or spec.jitter_steps == 0:
        return habit
    shift = int(rng.integers(1, spec.jitter_steps + 1)) * (1 if rng.random() < 0.5 else -1)
    return int(np.clip(habit + shift, 0, per_day))


def sample_fleet(spec: EVFleetConfig, seed, days: int, per_day: int = 96) -> Fleet:
    """Draw vehicles and ``days`` daily sessions each; deterministic in ``seed``.

    Initial charges are drawn uniformly from ``q_init_frac_range`` and clamped
    to the charge-state bounds; the desired charge of each vehicle is the top
    of its range (a conservative requirement).
    """
    rng = np.random.default_rng(seed)
    vehicles, sessions = [], []
    for i in range(spec.count):
        miles = spec.trip_miles[i] if spec.trip_miles is not None else rng.uniform(*spec.trip_miles_range)
        cap = size_ev_battery(miles)
        lo, hi = spec.q_min_frac * cap, spec.q_max_frac * cap
        arr = int(rng.integers(spec.arrival_habit_steps[0], spec.arrival_habit_steps[1] + 1))
        dep = int(rng.integers(spec.departure_habit_steps[0], spec.departure_habit_steps[1] + 1))
        q_des = float(np.clip(rng.uniform(*spec.q_des_frac_range) * cap, lo, hi))
        ev = EVSpec(f"ev{i:02d}", cap, spec.charger_kw, spec.efficiency, spec.eta_q,
                    spec.q_min_frac, spec.q_max_frac, q_des, arr, dep)
        vehicles.append(ev)
        days_i = []
        for _ in range(days):
            a = _jittered(rng, arr, spec, per_day)
            e = _jittered(rng, dep, spec, per_day)
            q0 = float(np.clip(rng.uniform(*spec.q_init_frac_range) * cap, lo, hi))
            days_i.append(EVSession(a, max(e, a + 1), q0, q_des))
        sessions.append(tuple(days_i))
    return Fleet(tuple(vehicles), tuple(sessions))


# ---------------------------------------------------------------- realized


@dataclass(frozen=True)
class ScenarioData:
    """Realized series over history + simulation (absolute steps)."""

    config: ScenarioConfig
    grid: TimeGrid
    history_steps: int
    load: np.ndarray  # demand, kW >= 0
    pv: np.ndarray  # generation, kW <= 0
    price: np.ndarray  # $/kWh
    fleet: Fleet

    @property
    def total_steps(self) -> int:
        return self.history_steps + self.grid.sim_steps

    @property
    def sim_days(self) -> int:
        return -(-self.grid.sim_steps // self.grid.period_steps)

    def bes_retention(self) -> float:
        b = self.config.bes
        return per_step_retention(b.eta_q, b.eta_q_basis_hours, self.grid.dt_hours)

    def session(self, vehicle: int, day: int) -> EVSession:
        """Session on absolute day index ``day`` (0 = first history day)."""
        return self.fleet.sessions[vehicle][day]


def _signal(src, generator, days, grid, start, rng):
    count = days * grid.period_steps
    if isinstance(src, CSVSource):
        stamps, values = read_series_csv(src.path)
        return resample_hold(stamps, values, start, count, grid.step_minutes)
    return generator(src, days, rng)


def realize(cfg: ScenarioConfig) -> ScenarioData:
    """Generate or load every series of ``cfg``; deterministic in ``cfg.seed``."""
    grid = cfg.grid.time_grid()
    P = grid.period_steps
    hist_days = cfg.forecast.history_days
    days = hist_days + -(-grid.sim_steps // P)
    start = grid.origin - timedelta(days=hist_days)
    streams = np.random.SeedSequence(cfg.seed).spawn(4)
    rng_pv, rng_load, rng_price, rng_ev = (np.random.default_rng(s) for s in streams)
    pv = _signal(cfg.pv, lambda s, d, r: synthetic_pv(s, d, grid.step_minutes, r), days, grid, start, rng_pv)
    load = _signal(cfg.load, lambda s, d, r: synthetic_load(s, d, grid.step_minutes, r), days, grid, start, rng_load)
    if isinstance(cfg.price, CSVSource):
        price = _signal(cfg.price, None, days, grid, start, rng_price)
    else:
        hourly = synthetic_price_hourly(cfg.price, days, rng_price)
        price = np.repeat(hourly, 60 // grid.step_minutes) if 60 % grid.step_minutes == 0 else \
            hourly[(np.arange(days * P) * grid.step_minutes) // 60]
    if np.any(pv > 0):
        raise ScenarioError("PV series must be nonpositive (generation is negative)")
    if np.any(load < 0):
        raise ScenarioError("load series must be nonnegative")
    fleet = sample_fleet(cfg.ev, rng_ev, days, P)
    return ScenarioData(cfg, grid, hist_days * P, np.asarray(load, float), np.asarray(pv, float),
                        np.asarray(price, float), fleet)
