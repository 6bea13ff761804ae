"""Consensus changepoints from many independent sampler runs."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from numpy.lib.stride_tricks import sliding_window_view
from scipy.signal import find_peaks


@dataclass
class ConsensusConfig:
    k: int = 1000
    l: int = 2
    p_min: float = 0.5

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be at least 1")
        if self.l < 0:
            raise ValueError("l must be nonnegative")
        if not 0 < self.p_min <= 1:
            raise ValueError("p_min must lie in (0, 1]")


def smooth_posterior(p, l: int) -> np.ndarray:
    """Probability of at least one changepoint within +-l weeks, window truncated at the ends."""
    p = np.asarray(p, dtype=float)
    if np.any((p < 0) | (p > 1)):
        raise ValueError("probabilities must lie in [0, 1]")
    if l == 0:
        return p.copy()
    q = np.pad(1.0 - p, l, constant_values=1.0)
    return 1.0 - sliding_window_view(q, 2 * l + 1).prod(axis=1)


@dataclass
class Changepoint:
    index: int
    timestamp: pd.Timestamp
    lower: int
    upper: int
    lower_date: pd.Timestamp
    upper_date: pd.Timestamp
    height: float


@dataclass
class ChangepointSet:
    points: list
    posterior: np.ndarray
    config: ConsensusConfig
    calendar: pd.DatetimeIndex
    n_runs: int
    meta: dict = field(default_factory=dict)

    @property
    def indices(self) -> list:
        return [c.index for c in self.points]

    def __len__(self) -> int:
        return len(self.points)

    def to_dict(self) -> dict:
        fmt = "%Y-%m-%d"
        return {
            "format": "engshift.changepoints", "version": 1,
            "config": {"k": self.config.k, "l": self.config.l, "p_min": self.config.p_min},
            "n_runs": self.n_runs,
            "changepoints": [
                {"index": c.index, "timestamp": c.timestamp.strftime(fmt),
                 "lower_bound": c.lower_date.strftime(fmt), "upper_bound": c.upper_date.strftime(fmt),
                 "lower_index": c.lower, "upper_index": c.upper, "height": round(float(c.height), 12)}
                for c in self.points],
            "calendar_start": self.calendar[0].strftime(fmt),
            "n_weeks": int(self.posterior.size),
            "meta": self.meta,
        }

    def posterior_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"week_index": np.arange(self.posterior.size),
                             "week_start": self.calendar.strftime("%Y-%m-%d"),
                             "posterior": self.posterior})

    @classmethod
    def from_dict(cls, d: dict, posterior: np.ndarray | None = None) -> "ChangepointSet":
        cfg = ConsensusConfig(**d["config"])
        cal = pd.date_range(d["calendar_start"], periods=d["n_weeks"], freq="7D")
        pts = [Changepoint(c["index"], pd.Timestamp(c["timestamp"]), c["lower_index"], c["upper_index"],
                           pd.Timestamp(c["lower_bound"]), pd.Timestamp(c["upper_bound"]), c["height"])
               for c in d["changepoints"]]
        post = np.full(d["n_weeks"], np.nan) if posterior is None else np.asarray(posterior, float)
        return cls(pts, post, cfg, cal, d["n_runs"], d.get("meta", {}))

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=1)


def _interval(avg: np.ndarray, peak: int) -> tuple:
    half = avg[peak] / 2.0
    lo = peak
    while lo > 0 and avg[lo - 1] >= half:
        lo -= 1
    hi = peak
    while hi < avg.size - 1 and avg[hi + 1] >= half:
        hi += 1
    return lo, hi


def average_smoothed(runs, l: int) -> np.ndarray:
    runs = [np.asarray(r, dtype=float) for r in runs]
    if not runs:
        raise ValueError("no sampler runs given")
    w = runs[0].size
    if any(r.size != w for r in runs):
        raise ValueError("sampler runs differ in length")
    # sorted summation keeps the average independent of run order
    smoothed = np.sort(np.vstack([smooth_posterior(r, l) for r in runs]), axis=0)
    return smoothed.sum(axis=0) / len(runs)


def consensus(runs, cfg: ConsensusConfig, calendar=None) -> ChangepointSet:
    """Smooth each run, average over runs and keep separated peaks above p_min."""
    avg = average_smoothed(runs, cfg.l)
    w = avg.size
    if calendar is None:
        calendar = pd.date_range("1970-01-05", periods=w, freq="7D")
    calendar = pd.DatetimeIndex(calendar)
    if len(calendar) != w:
        raise ValueError("calendar length differs from the posterior length")
    # a pad of zeros lets peaks at the edges be detected
    padded = np.concatenate([[0.0], avg, [0.0]])
    peaks, _ = find_peaks(padded, height=cfg.p_min, distance=2 * cfg.l + 1)
    peaks = np.sort(peaks - 1)
    points = []
    for pk in peaks:
        lo, hi = _interval(avg, int(pk))
        points.append(Changepoint(int(pk), calendar[pk], lo, hi, calendar[lo], calendar[hi], float(avg[pk])))
    idx = np.array([c.index for c in points])
    assert np.all(np.diff(idx) > 2 * cfg.l)
    assert all(c.height >= cfg.p_min and c.lower <= c.index <= c.upper for c in points)
    return ChangepointSet(points, avg, cfg, calendar, len(runs))


@dataclass
class EpochPartition:
    """Left-closed epochs: epoch k starts on the date of changepoint k (epoch 0 at the window start)."""

    start: pd.Timestamp
    end: pd.Timestamp
    boundaries: list

    @property
    def n_epochs(self) -> int:
        return len(self.boundaries) + 1

    def epoch_of(self, dates) -> np.ndarray:
        d = pd.DatetimeIndex(pd.to_datetime(dates))
        if d.tz is not None:
            d = d.tz_convert("UTC").tz_localize(None)
        if ((d < self.start) | (d >= self.end)).any():
            raise ValueError("date outside the study window")
        b = pd.DatetimeIndex(self.boundaries).as_unit("ns").asi8
        return np.searchsorted(b, d.as_unit("ns").asi8, side="right")

    def table(self) -> pd.DataFrame:
        starts = [self.start] + list(self.boundaries)
        ends = list(self.boundaries) + [self.end]
        return pd.DataFrame({"epoch": np.arange(self.n_epochs),
                             "start": [s.strftime("%Y-%m-%d") for s in starts],
                             "end": [e.strftime("%Y-%m-%d") for e in ends]})

    def to_dict(self) -> dict:
        return {"start": self.start.strftime("%Y-%m-%d"), "end": self.end.strftime("%Y-%m-%d"),
                "boundaries": [b.strftime("%Y-%m-%d") for b in self.boundaries]}

    @classmethod
    def from_dict(cls, d: dict) -> "EpochPartition":
        return cls(pd.Timestamp(d["start"]), pd.Timestamp(d["end"]), [pd.Timestamp(b) for b in d["boundaries"]])


def partition_epochs(cps, start, end) -> EpochPartition:
    """Epochs from a ChangepointSet (or plain dates) over the window [start, end)."""
    start, end = pd.Timestamp(start), pd.Timestamp(end)
    if start.tzinfo is not None:
        start, end = start.tz_convert("UTC").tz_localize(None), end.tz_convert("UTC").tz_localize(None)
    dates = [c.timestamp for c in cps.points] if isinstance(cps, ChangepointSet) else list(cps)
    dates = sorted(pd.Timestamp(x) for x in dates)
    for x in dates:
        if not start < x < end:
            raise ValueError(f"changepoint {x.date()} lies outside the window")
    return EpochPartition(start, end, dates)
