"""Underlying-asset simulation, volatility plumbing, and the analytic baseline.

Covers realized-volatility computation from intraday returns, alignment
of a daily volatility forecast onto the recursion time grid, risk-neutral
GBM path simulation with the exact one-step solution, and the closed-form
Black-Scholes pricer used as the reference model.

Conventions: maturities are in years with 252 trading days per year,
volatilities are annualized, and the default risk-free rate is 0.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Dict, List, Sequence, Tuple

import numpy as np
from scipy.special import ndtri

from .autodiff import norm_cdf
from .errors import DataError

log = logging.getLogger(__name__)

TRADING_DAYS_PER_YEAR = 252

# random() emits multiples of 2^-53 in [0, 1); the half-step shift keeps
# the inverse CDF finite at u = 0 without biasing the grid.
_U_SHIFT = 2.0 ** -54


@dataclass
class VolTrajectory:
    """Daily annualized volatility forecast over the remaining life."""

    daily_sigma: np.ndarray  # (D,) annualized, per sqrt(year)

    def __post_init__(self) -> None:
        self.daily_sigma = np.asarray(self.daily_sigma, dtype=np.float64)
        if self.daily_sigma.ndim != 1 or self.daily_sigma.size < 1:
            raise DataError("volatility trajectory needs at least one day")
        if np.any(self.daily_sigma < 0) or not np.all(np.isfinite(self.daily_sigma)):
            raise DataError("volatility trajectory entries must be finite and >= 0")

    @property
    def days(self) -> int:
        return self.daily_sigma.size


@dataclass
class PathBatch:
    """Simulated GBM grid: M paths over N uniform steps of size dt (years)."""

    X: np.ndarray            # (M, N+1) prices, X[:, 0] = X0
    dW: np.ndarray           # (M, N) Brownian increments ~ N(0, dt)
    dt: float
    sigma_steps: np.ndarray  # (N,) per-step annualized volatility


def realized_vol(returns: Sequence[float]) -> Tuple[float, float]:
    """Sum of squared intraday log returns and its annualized volatility.

    Returns (realized variance, sqrt(RV) * sqrt(252)).
    """
    r = np.asarray(returns, dtype=np.float64)
    if r.size == 0:
        raise DataError("realized_vol needs a nonempty return sequence")
    rv = float(np.sum(r * r))
    return rv, math.sqrt(rv) * math.sqrt(TRADING_DAYS_PER_YEAR)


def align_sigma(traj: VolTrajectory, n_steps: int) -> np.ndarray:
    """Piecewise-constant map from D daily values onto N recursion steps.

    Step i reads daily index min(floor(i*D/N), D-1).
    """
    if n_steps < 1:
        raise DataError("n_steps must be >= 1")
    d = traj.days
    idx = np.minimum(np.arange(n_steps) * d // n_steps, d - 1)
    return traj.daily_sigma[idx]


def path_normals(seed: int, n_paths: int, n_steps: int) -> np.ndarray:
    """Standard normal draws with one counter-based substream per path.

    Path j consumes the Philox stream keyed by (seed, j) through the
    inverse normal CDF, so its draws do not depend on n_paths or on any
    scheduling order; generation is bitwise-reproducible by construction.
    """
    u = np.empty((n_paths, n_steps), dtype=np.float64)
    for j in range(n_paths):
        gen = np.random.Generator(np.random.Philox(key=[seed, j]))
        u[j] = gen.random(n_steps)
    return ndtri(u + _U_SHIFT)


def simulate_paths(
    x0: float,
    r: float,
    sigma_steps: np.ndarray,
    dt: float,
    n_paths: int,
    seed: int,
) -> PathBatch:
    """Exact-solution GBM stepping: X_{i+1} = X_i * exp((r - s_i^2/2) dt + s_i dW).

    The exponential form preserves positivity exactly.
    """
    if x0 <= 0.0:
        raise DataError("x0 must be > 0")
    if dt <= 0.0:
        raise DataError("dt must be > 0")
    sigma_steps = np.asarray(sigma_steps, dtype=np.float64)
    n_steps = sigma_steps.size
    xi = path_normals(seed, n_paths, n_steps)
    dw = math.sqrt(dt) * xi
    drift = (r - 0.5 * sigma_steps**2) * dt
    log_incr = drift[None, :] + sigma_steps[None, :] * dw
    x = np.empty((n_paths, n_steps + 1), dtype=np.float64)
    x[:, 0] = x0
    x[:, 1:] = x0 * np.exp(np.cumsum(log_incr, axis=1))
    return PathBatch(X=x, dW=dw, dt=dt, sigma_steps=sigma_steps)


def bsm_price(x, k, tau, sigma, r=0.0, kind="call"):
    """Black-Scholes price for a European option; vectorized over inputs.

    Degenerate maturities/volatilities fall back to the discounted
    intrinsic value; puts come from put-call parity.
    """
    x = np.asarray(x, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    tau = np.asarray(tau, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    if kind not in ("call", "put"):
        raise DataError(f"option kind must be 'call' or 'put', got {kind!r}")

    disc_k = k * np.exp(-r * tau)
    vol = sigma * np.sqrt(np.maximum(tau, 0.0))
    degenerate = vol <= 0.0
    vol_safe = np.where(degenerate, 1.0, vol)
    d1 = (np.log(x / k) + (r + 0.5 * sigma**2) * tau) / vol_safe
    d2 = d1 - vol_safe
    call = np.where(
        degenerate,
        np.maximum(x - disc_k, 0.0),
        x * norm_cdf(d1) - disc_k * norm_cdf(d2),
    )
    if kind == "call":
        out = call
    else:
        out = call - x + disc_k
        out = np.where(degenerate, np.maximum(disc_k - x, 0.0), out)
    return float(out) if out.ndim == 0 else out


def bsm_sweep(
    rows: Sequence,
    sigma_grid: Sequence[float],
    r: float = 0.0,
) -> List[dict]:
    """Monthly MAE of the closed-form pricer over a volatility grid.

    `rows` are option contracts carrying date, kind, strike, underlying,
    tau_days and label. Returns one dict per month with the MAE for each
    grid volatility and the argmin; calendar months inside the data span
    that have no rows are omitted with a warning.
    """
    if not rows:
        raise DataError("bsm_sweep needs at least one contract")
    sigma_grid = [float(s) for s in sigma_grid]
    by_month: Dict[str, List] = {}
    for row in rows:
        by_month.setdefault(row.date.strftime("%Y-%m"), []).append(row)

    first = min(r.date for r in rows)
    last = max(r.date for r in rows)
    ym = (first.year, first.month)
    while ym <= (last.year, last.month):
        key = f"{ym[0]:04d}-{ym[1]:02d}"
        if key not in by_month:
            log.warning("bsm_sweep: month %s has no rows, omitted", key)
        ym = (ym[0] + 1, 1) if ym[1] == 12 else (ym[0], ym[1] + 1)

    out = []
    for month in sorted(by_month):
        chunk = by_month[month]
        x = np.array([c.underlying for c in chunk])
        k = np.array([c.strike for c in chunk])
        tau = np.array([c.tau_days / TRADING_DAYS_PER_YEAR for c in chunk])
        y = np.array([c.label for c in chunk])
        is_call = np.array([c.kind == "call" for c in chunk])
        maes = {}
        for s in sigma_grid:
            call = bsm_price(x, k, tau, s, r, "call")
            put = bsm_price(x, k, tau, s, r, "put")
            pred = np.where(is_call, call, put)
            maes[s] = float(np.mean(np.abs(y - pred)))
        best = min(sigma_grid, key=lambda s: maes[s])
        out.append({"month": month, "n": len(chunk), "mae": maes, "best_sigma": best})
    return out


# -- rv_forecast.csv -----------------------------------------------------


def write_rv_forecast(path, blocks: Dict) -> None:
    """One block of (date, day_index, sigma_daily) rows per pricing date."""
    import csv

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["date", "day_index", "sigma_daily"])
        for date in sorted(blocks):
            traj = blocks[date]
            for i, s in enumerate(traj.daily_sigma):
                w.writerow([date.isoformat(), i, repr(float(s))])


def read_rv_forecast(path) -> Dict:
    import csv
    import datetime as dt

    blocks: Dict = {}
    rows_by_date: Dict = {}
    with open(path, newline="") as fh:
        rd = csv.DictReader(fh)
        required = {"date", "day_index", "sigma_daily"}
        if rd.fieldnames is None or not required.issubset(rd.fieldnames):
            raise DataError(f"{path}: expected columns {sorted(required)}")
        for row in rd:
            d = dt.date.fromisoformat(row["date"])
            rows_by_date.setdefault(d, []).append(
                (int(row["day_index"]), float(row["sigma_daily"])))
    for d, pairs in rows_by_date.items():
        pairs.sort()
        ids = [i for i, _ in pairs]
        if ids != list(range(len(ids))):
            raise DataError(f"{path}: day_index for {d} must be 0..D-1 without gaps")
        blocks[d] = VolTrajectory(np.array([s for _, s in pairs]))
    return blocks
