"""Sentiment features from daily forum aggregates, moneyness buckets,
and dataset assembly with a day-level random split.

Each trading day contributes bullish/bearish title counts plus activity
totals; from these we build exponentially weighted indicators with
half-life decay. At-the-money contracts read short-horizon indicators,
out-of-the-money contracts read medium-horizon indicators plus extreme
event flags, and in-the-money contracts get a zero vector (their
sentiment channel is disabled end to end).
"""

from __future__ import annotations

import csv
import datetime as dt
import json
import logging
import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import DataError
from .market import TRADING_DAYS_PER_YEAR, VolTrajectory
from .nets import SENTIMENT_LAYOUT

log = logging.getLogger(__name__)

EPS = 1e-8
BURN_IN_DAYS = 30
EXTREME_Z_THRESHOLD = 2.0
VOLSHOCK_Z_THRESHOLD = 1.5


@dataclass
class GubaDaily:
    """One day of forum-title aggregates."""

    date: dt.date
    n_bull: int
    n_bear: int
    posts_count: int
    views_sum: int
    comments_sum: int

    def __post_init__(self) -> None:
        counts = (self.n_bull, self.n_bear, self.posts_count,
                  self.views_sum, self.comments_sum)
        if any(c < 0 for c in counts):
            raise DataError(f"negative count in forum aggregates on {self.date}")
        if self.n_bull + self.n_bear > self.posts_count:
            raise DataError(f"bull+bear exceeds posts_count on {self.date}")


@dataclass
class OptionContract:
    """One cleaned quote: settlement price as the supervision label."""

    date: dt.date
    kind: str            # call | put
    strike: float
    underlying: float
    tau_days: int
    label: float

    def __post_init__(self) -> None:
        if self.kind not in ("call", "put"):
            raise DataError(f"bad option kind {self.kind!r}")
        if self.strike <= 0 or self.underlying <= 0:
            raise DataError("strike and underlying must be positive")
        if self.tau_days < 1:
            raise DataError("expiration-day rows are excluded (tau_days >= 1)")
        if self.label < 0:
            raise DataError("negative settlement price")

    @property
    def tau_years(self) -> float:
        return self.tau_days / TRADING_DAYS_PER_YEAR


def classify_moneyness(underlying: float, strike: float, kind: str) -> str:
    """ATM on the closed band 0.97 <= X/K <= 1.03; ITM/OTM by type."""
    if underlying <= 0 or strike <= 0:
        raise DataError("underlying and strike must be positive")
    m = underlying / strike
    if 0.97 <= m <= 1.03:
        return "ATM"
    if kind == "call":
        return "ITM" if m > 1.03 else "OTM"
    return "ITM" if m < 0.97 else "OTM"


def ewm(series: Sequence[float], half_life: float) -> np.ndarray:
    """Exponentially weighted mean with half-life decay, seeded at x0."""
    if len(series) == 0:
        raise DataError("ewm needs a nonempty series")
    if half_life <= 0:
        raise DataError("half_life must be > 0")
    alpha = 1.0 - 2.0 ** (-1.0 / half_life)
    out = np.empty(len(series))
    out[0] = series[0]
    for i in range(1, len(series)):
        out[i] = alpha * series[i] + (1.0 - alpha) * out[i - 1]
    return out


def ewm_std(series: Sequence[float], half_life: float) -> np.ndarray:
    """Deviation scale: smoothed squared deviation from the running mean,
    seeded at zero so constant series report exactly zero."""
    if len(series) == 0:
        raise DataError("ewm_std needs a nonempty series")
    alpha = 1.0 - 2.0 ** (-1.0 / half_life)
    mean = ewm(series, half_life)
    var = np.empty(len(series))
    var[0] = 0.0
    for i in range(1, len(series)):
        dev = series[i] - mean[i]
        var[i] = alpha * dev * dev + (1.0 - alpha) * var[i - 1]
    return np.sqrt(var)


def _activity(g: GubaDaily) -> float:
    return (math.log1p(g.posts_count) + math.log1p(g.views_sum)
            + math.log1p(g.comments_sum))


def _entropy(p: float) -> float:
    if p <= 0.0 or p >= 1.0:
        return 0.0
    return -(p * math.log(p) + (1.0 - p) * math.log(1.0 - p))


def sentiment_features(history: Sequence[GubaDaily], date: dt.date,
                       moneyness: str) -> np.ndarray:
    """Five gated sentiment inputs for one pricing date and bucket.

    Only history rows on or before `date` are consulted, so the output
    cannot depend on later data. Missing days carry the latest available
    features forward with a logged gap; inside the 30-calendar-day
    burn-in the event flags are forced to zero.
    """
    if moneyness == "ITM":
        return np.zeros(5)
    usable = sorted((g for g in history if g.date <= date), key=lambda g: g.date)
    if not usable:
        raise DataError(f"no forum history on or before {date}")
    if usable[-1].date != date:
        log.warning("sentiment gap: no forum data on %s, carrying %s forward",
                    date, usable[-1].date)

    net = [(g.n_bull - g.n_bear) / (g.posts_count + EPS) for g in usable]
    act = [_activity(g) for g in usable]

    net_now = net[-1]
    z_act = (act[-1] - ewm(act, 10)[-1]) / (ewm_std(act, 10)[-1] + EPS)
    burn_in = (date - usable[0].date).days < BURN_IN_DAYS

    if moneyness == "ATM":
        g_now = usable[-1]
        p_bull = g_now.n_bull / (g_now.posts_count + EPS)
        return np.array([
            net_now,
            net_now - ewm(net, 3)[-1],
            ewm_std(net, 3)[-1],
            z_act,
            _entropy(p_bull),
        ])
    if moneyness == "OTM":
        z30 = (net_now - ewm(net, 30)[-1]) / (ewm_std(net, 30)[-1] + EPS)
        extreme = 0.0 if burn_in else float(abs(z30) > EXTREME_Z_THRESHOLD)
        shock = 0.0 if burn_in else float(z_act > VOLSHOCK_Z_THRESHOLD)
        return np.array([
            net_now - ewm(net, 5)[-1],
            ewm_std(net, 5)[-1],
            extreme,
            shock,
            ewm(net, 5)[-1],
        ])
    raise DataError(f"unknown moneyness class {moneyness!r}")


def split_dataset(contracts: Sequence[OptionContract],
                  seed: int) -> Tuple[List[OptionContract], List[OptionContract],
                                      List[OptionContract]]:
    """Shuffle distinct trading days, partition 70/20/10 by day count.

    All contracts of a day land in the same partition.
    """
    dates = sorted({c.date for c in contracts})
    if len(dates) < 10:
        raise DataError(f"need at least 10 distinct dates, got {len(dates)}")
    rng = np.random.Generator(np.random.PCG64(seed))
    order = rng.permutation(len(dates))
    shuffled = [dates[i] for i in order]
    n_train = int(0.7 * len(dates))
    n_val = int(0.2 * len(dates))
    train_days = set(shuffled[:n_train])
    val_days = set(shuffled[n_train:n_train + n_val])
    train, val, test = [], [], []
    for c in contracts:
        if c.date in train_days:
            train.append(c)
        elif c.date in val_days:
            val.append(c)
        else:
            test.append(c)
    return train, val, test


# -- dataset assembly ------------------------------------------------------


@dataclass
class DatasetRow:
    """A contract joined with its volatility trajectory and sentiment."""

    contract: OptionContract
    moneyness: str
    sentiment: np.ndarray   # (5,)
    traj: VolTrajectory


def build_rows(contracts: Sequence[OptionContract],
               rv_blocks: Dict[dt.date, VolTrajectory],
               guba_history: Optional[Sequence[GubaDaily]] = None) -> List[DatasetRow]:
    """Join contracts with aligned volatility forecasts and sentiment.

    The forecast block for the pricing date is trimmed to the contract's
    remaining days; a too-short block is padded with its last value
    (logged). Without forum history the sentiment vector is zero.
    """
    rows = []
    for c in contracts:
        if c.date not in rv_blocks:
            raise DataError(f"no volatility forecast block for pricing date {c.date}")
        daily = rv_blocks[c.date].daily_sigma
        if daily.size < c.tau_days:
            log.warning("forecast block on %s has %d days < tau %d; padding "
                        "with last value", c.date, daily.size, c.tau_days)
            daily = np.concatenate([daily, np.full(c.tau_days - daily.size, daily[-1])])
        traj = VolTrajectory(daily[:c.tau_days])
        cls = classify_moneyness(c.underlying, c.strike, c.kind)
        if guba_history is None or cls == "ITM":
            e = np.zeros(5)
        else:
            e = sentiment_features(guba_history, c.date, cls)
        rows.append(DatasetRow(contract=c, moneyness=cls, sentiment=e, traj=traj))
    return rows


# -- file formats ----------------------------------------------------------

_KIND_TO_CODE = {"call": "C", "put": "P"}
_CODE_TO_KIND = {"C": "call", "P": "put"}


def write_options(path, contracts: Sequence[OptionContract]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["date", "type", "strike", "underlying", "tau_days", "settlement"])
        for c in contracts:
            w.writerow([c.date.isoformat(), _KIND_TO_CODE[c.kind], repr(c.strike),
                        repr(c.underlying), c.tau_days, repr(c.label)])


def load_options(path) -> List[OptionContract]:
    """Read quotes and apply the cleaning rules: expiration-day rows and
    settlements below 0.01 are dropped."""
    out: List[OptionContract] = []
    dropped = 0
    with open(path, newline="") as fh:
        rd = csv.DictReader(fh)
        required = {"date", "type", "strike", "underlying", "tau_days", "settlement"}
        if rd.fieldnames is None or not required.issubset(rd.fieldnames):
            raise DataError(f"{path}: expected columns {sorted(required)}")
        for row in rd:
            code = row["type"].strip().upper()
            if code not in _CODE_TO_KIND:
                raise DataError(f"{path}: bad option type {row['type']!r}")
            label = float(row["settlement"])
            tau_days = int(row["tau_days"])
            if label < 0.01 or tau_days < 1:
                dropped += 1
                continue
            out.append(OptionContract(
                date=dt.date.fromisoformat(row["date"]),
                kind=_CODE_TO_KIND[code],
                strike=float(row["strike"]),
                underlying=float(row["underlying"]),
                tau_days=tau_days,
                label=label,
            ))
    if dropped:
        log.info("%s: dropped %d rows in cleaning", path, dropped)
    if not out:
        raise DataError(f"{path}: no usable rows after cleaning")
    return out


def write_guba(path, rows: Sequence[GubaDaily]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["date", "n_bull", "n_bear", "posts_count", "views_sum",
                    "comments_sum"])
        for g in rows:
            w.writerow([g.date.isoformat(), g.n_bull, g.n_bear, g.posts_count,
                        g.views_sum, g.comments_sum])


def load_guba(path) -> List[GubaDaily]:
    out: List[GubaDaily] = []
    with open(path, newline="") as fh:
        rd = csv.DictReader(fh)
        required = {"date", "n_bull", "n_bear", "posts_count", "views_sum",
                    "comments_sum"}
        if rd.fieldnames is None or not required.issubset(rd.fieldnames):
            raise DataError(f"{path}: expected columns {sorted(required)}")
        for row in rd:
            out.append(GubaDaily(
                date=dt.date.fromisoformat(row["date"]),
                n_bull=int(row["n_bull"]),
                n_bear=int(row["n_bear"]),
                posts_count=int(row["posts_count"]),
                views_sum=int(row["views_sum"]),
                comments_sum=int(row["comments_sum"]),
            ))
    return sorted(out, key=lambda g: g.date)


def write_feature_manifest(path) -> None:
    """Record the sentiment vector layout and indicator parameters."""
    manifest = {
        "layout": {k: list(v) for k, v in SENTIMENT_LAYOUT.items()},
        "half_lives": {"surprise_atm": 3, "surprise_otm": 5, "activity": 10,
                       "extreme_baseline": 30},
        "eps": EPS,
        "burn_in_days": BURN_IN_DAYS,
        "flag_thresholds": {"extreme": EXTREME_Z_THRESHOLD,
                            "vol_shock": VOLSHOCK_Z_THRESHOLD},
    }
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
