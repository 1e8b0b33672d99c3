"""PV/load forecasting and EV parameter estimation.

Power forecasts combine a periodic expectile baseline (asymmetric least
squares with circular curvature smoothing) with an autoregressive model of the
residual ``actual - baseline`` whose multi-step forecast is damped
geometrically, so predictions fall back to the baseline further out.
Forecasting works on nonnegative magnitudes; PV sign is restored by callers.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from typing import Sequence

import numpy as np


@dataclass
class HistoryBuffer:
    """Uniformly sampled history; ``start`` is the absolute index of ``values[0]``."""

    values: np.ndarray
    start: int = 0
    capacity: int | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float).ravel()
        self._trim()

    def _trim(self):
        if self.capacity is not None and self.values.size > self.capacity:
            drop = self.values.size - self.capacity
            self.values = self.values[drop:]
            self.start += drop

    @property
    def end(self) -> int:
        """Absolute index one past the last sample."""
        return self.start + self.values.size

    def __len__(self):
        return self.values.size

    def append(self, step: int, value: float) -> None:
        if step != self.end:
            raise ValueError(f"history expects step {self.end}, got {step}")
        self.values = np.append(self.values, float(value))
        self._trim()

    def extend(self, values) -> None:
        self.values = np.concatenate([self.values, np.asarray(values, dtype=float).ravel()])
        self._trim()

    def window(self, length: int) -> "HistoryBuffer":
        """The most recent ``length`` samples as a new buffer."""
        length = min(length, self.values.size)
        return HistoryBuffer(self.values[self.values.size - length:].copy(), self.end - length)


@dataclass
class ForecastModel:
    baseline: np.ndarray
    ar_weights: np.ndarray
    decay: float = 0.7
    gamma_asym: float = 1.0
    gamma_curv: float = 0.0

    def __post_init__(self):
        if not 0 < self.decay < 1:
            raise ValueError("decay must lie in (0, 1)")
        if not np.all(np.isfinite(self.baseline)):
            raise ValueError("baseline must be finite")

    @property
    def period_steps(self) -> int:
        return self.baseline.size

    def tiled(self, start: int, count: int) -> np.ndarray:
        """Baseline at absolute steps ``start .. start+count-1``."""
        return self.baseline[(start + np.arange(count)) % self.period_steps]


def _circular_curvature(P: int) -> np.ndarray:
    D = np.zeros((P, P))
    for s in range(P):
        D[s, (s - 1) % P] += 1.0
        D[s, s] -= 2.0
        D[s, (s + 1) % P] += 1.0
    return D


def fit_baseline(hist: HistoryBuffer, gamma_asym: float, gamma_curv: float,
                 period_steps: int, max_rounds: int = 100) -> np.ndarray:
    """Periodic expectile baseline over one period.

    Minimizes ``sum (x - h)_+^2 + gamma_asym (x - h)_-^2 + gamma_curv (D2 x)^2``
    over the history with ``x`` periodic, by iteratively reweighted least
    squares.  Slot ``s`` of the result corresponds to absolute steps
    ``s (mod period_steps)``.
    """
    h = hist.values
    P = int(period_steps)
    if h.size < 2 * P:
        raise ValueError(f"baseline fit needs at least two periods ({2 * P} samples), got {h.size}")
    if gamma_asym < 0 or gamma_curv < 0:
        raise ValueError("gamma_asym and gamma_curv must be nonnegative")
    slots = (hist.start + np.arange(h.size)) % P
    counts = np.bincount(slots, minlength=P).astype(float)
    D = _circular_curvature(P)
    R = gamma_curv * D.T @ (counts[:, None] * D)
    weights = np.ones(h.size)
    x = None
    for _ in range(max_rounds):
        W = np.bincount(slots, weights=weights, minlength=P)
        rhs = np.bincount(slots, weights=weights * h, minlength=P)
        x = np.linalg.solve(np.diag(W) + R, rhs)
        new = np.where(x[slots] - h < 0, gamma_asym, 1.0)
        if np.array_equal(new, weights):
            break
        weights = new
    return x


def fit_residual_ar(residuals, n: int) -> np.ndarray:
    """Least-squares AR weights ``a`` with ``r(t) ~ a_1 r(t-1) + ... + a_n r(t-n)``.

    Uses the minimum-norm solution (pseudoinverse), so rank-deficient lag
    matrices are fine.
    """
    r = np.asarray(residuals, dtype=float).ravel()
    if n < 1:
        raise ValueError("AR order must be >= 1")
    if r.size <= n:
        raise ValueError(f"need more than {n} residuals, got {r.size}")
    M, b = lag_matrix(r, n)
    a, *_ = np.linalg.lstsq(M, b, rcond=None)
    return a


def lag_matrix(r: np.ndarray, n: int) -> tuple[np.ndarray, np.ndarray]:
    """Rows ``[r(j-1), ..., r(j-n)]`` and targets ``r(j)`` for ``j = n .. len-1``."""
    rows = len(r) - n
    M = np.empty((rows, n))
    for k in range(n):
        M[:, k] = r[n - 1 - k:n - 1 - k + rows]
    return M, r[n:].copy()


def fit_forecast_model(hist: HistoryBuffer, period_steps: int, gamma_asym: float = 1.0,
                       gamma_curv: float = 0.0, ar_order: int = 4, decay: float = 0.7) -> ForecastModel:
    baseline = fit_baseline(hist, gamma_asym, gamma_curv, period_steps)
    model = ForecastModel(baseline, np.zeros(ar_order), decay, gamma_asym, gamma_curv)
    resid = hist.values - model.tiled(hist.start, len(hist))
    model.ar_weights = fit_residual_ar(resid, ar_order)
    return model


def residual_forecast(ar_weights, recent, horizon: int, decay: float) -> np.ndarray:
    """Damped multi-step AR forecast of the residual.

    The undamped recursion feeds its own predictions back as lags; step ``k``
    of the result is that prediction times ``decay**k``.  ``recent`` holds the
    latest residuals, oldest first.
    """
    a = np.asarray(ar_weights, dtype=float)
    n = a.size
    lags = list(np.asarray(recent, dtype=float)[-n:][::-1])  # lags[0] = most recent
    lags += [0.0] * (n - len(lags))
    out = np.empty(horizon)
    for k in range(horizon):
        nxt = float(np.dot(a, lags[:n]))
        out[k] = nxt * decay**k
        lags.insert(0, nxt)
    return out


def predict(model: ForecastModel, hist: HistoryBuffer, horizon: int, start: int | None = None,
            clamp_nonnegative: bool = True) -> np.ndarray:
    """Forecast magnitudes for absolute steps ``start .. start+horizon-1``.

    ``start`` defaults to the step right after the history.
    """
    start = hist.end if start is None else start
    base = model.tiled(start, horizon)
    n = model.ar_weights.size
    tail = hist.window(n)
    recent = tail.values - model.tiled(tail.start, len(tail))
    pred = base + residual_forecast(model.ar_weights, recent, horizon, model.decay)
    return np.maximum(pred, 0.0) if clamp_nonnegative else pred


# ---------------------------------------------------------------------- EV


@dataclass(frozen=True)
class EVSession:
    """One plug-in session; times are step-of-day indices, charges in kWh."""

    t_arr: int
    t_dep: int
    q_init: float
    q_des: float


@dataclass(frozen=True)
class EVParamEstimate:
    t_arr: int
    t_dep: int
    q_init: float
    q_des: float
    source: str  # "observed" | "predicted"


def _mode_int(values) -> int:
    counts = Counter(int(v) for v in values)
    top = max(counts.values())
    return min(v for v, c in counts.items() if c == top)


def _mode_binned(values, width: float = 1.0) -> float:
    values = np.asarray(values, dtype=float)
    bins = np.floor(values / width).astype(int)
    top = _mode_int(bins)
    return float(values[bins == top].mean())


def estimate_ev_params(history: Sequence[EVSession], battery=None, now: int | None = None,
                       today: EVSession | None = None, prior: EVSession | None = None) -> EVParamEstimate:
    """Estimate a vehicle's session parameters.

    If ``today``'s session has already started (``today.t_arr <= now``) its
    observed values are returned.  Otherwise arrival, departure and initial
    charge are the modes of their empirical distributions (1-step and 1-kWh
    bins, ties to the lowest bin) and the desired charge is the largest
    observed value.  ``battery`` (anything with ``q_bounds``) clips charges.
    """
    if today is not None and now is not None and today.t_arr <= now:
        est = EVParamEstimate(today.t_arr, today.t_dep, today.q_init, today.q_des, "observed")
    else:
        sessions = list(history)
        if not sessions:
            if prior is None:
                raise ValueError("no EV history and no prior to estimate from")
            sessions = [prior]
        t_arr = _mode_int(s.t_arr for s in sessions)
        t_dep = _mode_int(s.t_dep for s in sessions)
        if t_dep <= t_arr:
            t_dep = t_arr + 1
        q_init = _mode_binned([s.q_init for s in sessions])
        q_des = max(s.q_des for s in sessions)
        est = EVParamEstimate(t_arr, t_dep, q_init, q_des, "predicted")
    if battery is not None:
        lo, hi = battery.q_bounds
        est = EVParamEstimate(est.t_arr, est.t_dep, float(np.clip(est.q_init, lo, hi)),
                              float(np.clip(est.q_des, lo, hi)), est.source)
    return est
