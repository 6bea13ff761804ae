"""Weekly two-dimensional signal from outlet-day conditional moments.

Each outlet-day contributes its mean relative to the outlet's overall mean
and its coefficient of variation.  Both are averaged per outlet and 7-day
block, then averaged with equal weight over the outlets active that week, and
finally log-transformed.
"""

from __future__ import annotations

import numpy as np
import pandas as pd

SIGNAL_COLUMNS = ["week_index", "week_start", "log_rel_mean", "log_cv", "n_outlets"]
MOMENT_COLUMNS = ["outlet_id", "day", "mu", "sigma", "outlet_mean"]


def relative_mean(mu, outlet_mean):
    mu = np.asarray(mu, dtype=float)
    outlet_mean = np.asarray(outlet_mean, dtype=float)
    if np.any(~(mu > 0)) or np.any(~(outlet_mean > 0)):
        raise ValueError("mu and outlet_mean must be positive")
    out = mu / outlet_mean
    return out.item() if out.ndim == 0 else out


def coefficient_of_variation(sigma, mu):
    sigma = np.asarray(sigma, dtype=float)
    mu = np.asarray(mu, dtype=float)
    if np.any(~(mu > 0)):
        raise ValueError("mu must be positive")
    if np.any(~(sigma >= 0)):
        raise ValueError("sigma must be nonnegative")
    out = sigma / mu
    return out.item() if out.ndim == 0 else out


def _day(values) -> pd.DatetimeIndex:
    d = pd.DatetimeIndex(pd.to_datetime(values))
    if d.tz is not None:
        d = d.tz_convert("UTC").tz_localize(None)
    return d.normalize()


def n_weeks(start, end) -> int:
    """Number of 7-day blocks covering [start, end)."""
    days = (pd.Timestamp(end) - pd.Timestamp(start)).days
    if days <= 0:
        raise ValueError("study window is empty")
    return -(-days // 7)


def build_weekly_signal(moments: pd.DataFrame, start, end) -> pd.DataFrame:
    """Aggregate outlet-day moments into the weekly log signal over [start, end).

    Weeks without any contributing outlet are kept with NaN values and
    ``n_outlets = 0``.
    """
    missing = [c for c in MOMENT_COLUMNS if c not in moments.columns]
    if missing:
        raise ValueError(f"moments lack column(s) {missing}")
    start = pd.Timestamp(start).normalize()
    end = pd.Timestamp(end).normalize()
    if start.tzinfo is not None:
        start, end = start.tz_localize(None), end.tz_localize(None)
    w = n_weeks(start, end)
    day = _day(moments["day"])
    offset = (day - start).days.to_numpy()
    bad = (offset < 0) | (day >= end)
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        row = moments.iloc[i]
        raise ValueError(f"day {row['day']} of outlet {row['outlet_id']!r} lies outside the study window")
    frame = pd.DataFrame({
        "outlet_id": moments["outlet_id"].to_numpy(),
        "week_index": offset // 7,
        "rel": relative_mean(moments["mu"].to_numpy(), moments["outlet_mean"].to_numpy()),
        "cv": coefficient_of_variation(moments["sigma"].to_numpy(), moments["mu"].to_numpy()),
    })
    per_outlet = frame.groupby(["week_index", "outlet_id"], sort=True)[["rel", "cv"]].mean()
    weekly = per_outlet.groupby(level="week_index").agg(
        rel=("rel", "mean"), cv=("cv", "mean"), n_outlets=("rel", "size"))
    weekly = weekly.reindex(np.arange(w))
    out = pd.DataFrame({
        "week_index": np.arange(w),
        "week_start": [start + pd.Timedelta(days=7 * k) for k in range(w)],
        "log_rel_mean": np.log(weekly["rel"].to_numpy()),
        "log_cv": np.log(weekly["cv"].to_numpy()),
        "n_outlets": weekly["n_outlets"].fillna(0).astype(int).to_numpy(),
    })
    return out


def write_signal(signal: pd.DataFrame, path) -> None:
    out = signal[SIGNAL_COLUMNS].copy()
    out["week_start"] = pd.to_datetime(out["week_start"]).dt.strftime("%Y-%m-%d")
    out.to_csv(path, index=False, lineterminator="\n", float_format="%.17g")


def read_signal(path) -> pd.DataFrame:
    df = pd.read_csv(path, float_precision="round_trip")
    missing = [c for c in SIGNAL_COLUMNS if c not in df.columns]
    if missing:
        raise ValueError(f"signal file lacks column(s) {missing}")
    df["week_start"] = pd.to_datetime(df["week_start"])
    idx = df["week_index"].to_numpy()
    if not np.array_equal(idx, np.arange(idx.size)):
        raise ValueError("week_index must be contiguous from 0")
    return df
