"""Synthetic panels and signals with known ground truth.

Random streams: one ``numpy.random.SeedSequence(seed)`` is spawned into
``n_outlets + 1`` children.  Child 0 drives the shared day effects and each
further child drives one outlet (its random effects, posting volume and
counts), so outlets can be generated independently and in any order.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np
import pandas as pd

from .ingestion import POST_COLUMNS
from .nb import Parametrization, size_prob
from .signal import SIGNAL_COLUMNS

NEWS_TIERS = ("low", "medium", "high")


@dataclass
class PanelTruth:
    groups: list = field(default_factory=lambda: ["low", "medium", "high", "non_news"])
    log_means: list = field(default_factory=lambda: [[5.0, 6.0, 5.5, 6.5]])   # epoch x group
    start: str = "2016-01-04"
    end: str = "2016-04-04"
    changepoints: list = field(default_factory=list)    # epoch start dates after the first
    sd_outlet: float = 1.1
    sd_outlet_epoch: float = 0.0
    sd_day: float = 0.0
    dispersion: float = 2.0
    parametrization: str = "nb1"
    did_effects: dict = field(default_factory=dict)     # epoch -> log effect on news groups
    posts_per_day: float = 3.0
    views_per_reaction: float = 50.0
    views_noise_sd: float = 500.0
    missing_reactions: float = 0.0
    seed: int = 0

    def __post_init__(self):
        self.log_means = np.asarray(self.log_means, dtype=float).tolist()
        self.did_effects = {int(k): float(v) for k, v in self.did_effects.items()}
        for name in ("sd_outlet", "sd_outlet_epoch", "sd_day"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if len(self.log_means) != len(self.changepoints) + 1:
            raise ValueError("log_means needs one row per epoch")
        if any(len(row) != len(self.groups) for row in self.log_means):
            raise ValueError("log_means needs one column per group")

    @property
    def n_epochs(self) -> int:
        return len(self.changepoints) + 1

    def cell_log_mean(self, epoch: int, group: str) -> float:
        """Fixed-effect log mean of an epoch x group cell, including any injected effect."""
        value = self.log_means[epoch][self.groups.index(group)]
        if group != "non_news":
            value += self.did_effects.get(epoch, 0.0)
        return value

    def epoch_starts(self) -> list:
        return [pd.Timestamp(self.start)] + [pd.Timestamp(c) for c in self.changepoints]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["did_effects"] = {str(k): v for k, v in self.did_effects.items()}
        return d

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=1)

    @classmethod
    def from_dict(cls, d: dict) -> "PanelTruth":
        return cls(**d)


@dataclass
class Panel:
    posts: pd.DataFrame
    outlets: pd.DataFrame
    truth: PanelTruth
    outlet_effects: dict
    day_effects: pd.Series
    hidden_reactions: pd.Series


def _days(truth: PanelTruth) -> pd.DatetimeIndex:
    days = pd.date_range(truth.start, truth.end, freq="D", inclusive="left")
    if len(days) == 0:
        raise ValueError("empty study window")
    starts = truth.epoch_starts()
    bounds = starts[1:] + [pd.Timestamp(truth.end)]
    for k, (a, b) in enumerate(zip(starts, bounds)):
        if not a < b:
            raise ValueError(f"epoch {k} contains no days")
    return days


def generate_panel(truth: PanelTruth, n_outlets: int, days=None) -> Panel:
    """Draw a post table from the mixed model described by ``truth``."""
    if n_outlets < 2:
        raise ValueError("need at least 2 outlets")
    if days is not None:
        truth = PanelTruth(**{**truth.to_dict(), "end": str((pd.Timestamp(truth.start)
                                                              + pd.Timedelta(days=int(days))).date())})
    day_index = _days(truth)
    n_days = len(day_index)
    par = Parametrization.parse(truth.parametrization)
    bounds = np.array([pd.Timestamp(c).value for c in truth.changepoints], dtype=np.int64)
    day_epoch = np.searchsorted(bounds, day_index.asi8, side="right")

    children = np.random.SeedSequence(truth.seed).spawn(n_outlets + 1)
    g0 = np.random.default_rng(children[0])
    day_eff = g0.normal(0.0, truth.sd_day, n_days) if truth.sd_day > 0 else np.zeros(n_days)

    outlet_rows, frames, effects = [], [], {}
    width = len(str(n_outlets - 1))
    for i in range(n_outlets):
        rng = np.random.default_rng(children[i + 1])
        oid = f"o{i:0{width}d}"
        group = truth.groups[i % len(truth.groups)]
        u = rng.normal(0.0, truth.sd_outlet) if truth.sd_outlet > 0 else 0.0
        ue = (rng.normal(0.0, truth.sd_outlet_epoch, truth.n_epochs) if truth.sd_outlet_epoch > 0
              else np.zeros(truth.n_epochs))
        rate = truth.posts_per_day * rng.uniform(0.5, 1.5)
        effects[oid] = {"outlet": float(u), "outlet_epoch": ue.tolist()}
        n_posts = rng.poisson(rate, n_days)
        d_idx = np.repeat(np.arange(n_days), n_posts)
        ep = day_epoch[d_idx]
        base = np.array([truth.cell_log_mean(e, group) for e in range(truth.n_epochs)])
        log_mu = base[ep] + u + ue[ep] + day_eff[d_idx]
        mu = np.exp(log_mu)
        size, prob = size_prob(mu, np.full_like(mu, truth.dispersion), par)
        reactions = rng.negative_binomial(size, prob)
        m = reactions.size
        seconds = rng.integers(0, 86400, m)
        stamps = day_index[d_idx] + pd.to_timedelta(seconds, unit="s")
        ptype = rng.choice(["status", "link", "photo", "video"], size=m, p=[0.2, 0.4, 0.3, 0.1])
        comments = rng.poisson(0.1 * reactions + 0.5)
        views = np.maximum(np.round(truth.views_per_reaction * reactions
                                    + rng.normal(0.0, truth.views_noise_sd, m)), 0).astype(np.int64)
        frames.append(pd.DataFrame({
            "post_id": [f"{oid}-{k:06d}" for k in range(m)],
            "outlet_id": oid,
            "published_at": stamps.tz_localize("UTC"),
            "post_type": ptype,
            "author_is_page": True,
            "text": [f"{oid} story {k}" for k in range(m)],
            "reactions": reactions, "comments": comments, "views": views,
            "source": "primary_feed",
        }))
        sector = "non_news" if group == "non_news" else "news"
        outlet_rows.append({"outlet_id": oid, "name": f"Outlet {i}", "sector": sector,
                            "quality": group, "mean_posts": rate})
    posts = pd.concat(frames, ignore_index=True)[POST_COLUMNS]
    posts = _typed(posts)
    hidden = pd.Series(dtype="Int64")
    if truth.missing_reactions > 0:
        mask = g0.random(len(posts)) < truth.missing_reactions
        hidden = posts.loc[mask, "reactions"].copy()
        posts.loc[mask, "reactions"] = pd.NA
    return Panel(posts=posts, outlets=pd.DataFrame(outlet_rows), truth=truth,
                 outlet_effects=effects,
                 day_effects=pd.Series(day_eff, index=day_index, name="day_effect"),
                 hidden_reactions=hidden)


def _typed(df: pd.DataFrame) -> pd.DataFrame:
    df = df.copy()
    for c in ("reactions", "comments", "views"):
        df[c] = df[c].astype("Int64")
    df["author_is_page"] = df["author_is_page"].astype(bool)
    return df.reset_index(drop=True)


def generate_piecewise_signal(changepoints, levels, noise_sd=(0.1, 0.1), w: int = 450, seed: int = 0,
                              slopes=None, outliers=None, min_separation: int = 13,
                              start: str = "2016-01-04") -> pd.DataFrame:
    """Two-dimensional piecewise level/trend series with shared breakpoints.

    ``levels`` and ``slopes`` (per week) have one row per segment and one
    column per dimension; segment ``s`` starts at changepoint ``s - 1``.
    ``outliers`` maps week -> offset in noise SDs added to both dimensions.
    """
    cps = [int(c) for c in changepoints]
    if cps != sorted(cps) or any(b - a < min_separation for a, b in zip(cps, cps[1:])):
        raise ValueError(f"changepoints must be sorted and at least {min_separation} weeks apart")
    if cps and (cps[0] <= 0 or cps[-1] >= w):
        raise ValueError("changepoints must lie strictly inside the series")
    levels = np.atleast_2d(np.asarray(levels, dtype=float))
    if levels.shape[0] != len(cps) + 1:
        raise ValueError("need one level row per segment")
    slopes = np.zeros_like(levels) if slopes is None else np.atleast_2d(np.asarray(slopes, dtype=float))
    noise_sd = np.broadcast_to(np.asarray(noise_sd, dtype=float), (levels.shape[1],))
    starts = np.array([0] + cps)
    t = np.arange(w)
    seg = np.searchsorted(np.array(cps, dtype=int), t, side="right")
    values = levels[seg] + slopes[seg] * (t - starts[seg])[:, None]
    rng = np.random.default_rng(seed)
    values = values + rng.normal(size=values.shape) * noise_sd
    for week, size in (outliers or {}).items():
        values[int(week)] += size * noise_sd
    return pd.DataFrame({
        "week_index": t,
        "week_start": pd.date_range(start, periods=w, freq="7D"),
        "log_rel_mean": values[:, 0],
        "log_cv": values[:, 1] if values.shape[1] > 1 else np.zeros(w),
        "n_outlets": 1,
    })[SIGNAL_COLUMNS]
