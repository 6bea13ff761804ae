"""Epoch models, marginal means, contrasts and difference-in-difference ratios.

All estimates live on the log scale as one joint Gaussian vector
(:class:`JointEstimates`).  Contrasts are linear maps of the log marginal
means of a single fit, so their covariances, and the covariances between
news and non-news contrasts, follow exactly from the fixed-effect
covariance.  Random-effect variances are treated as known.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np
import pandas as pd
from scipy import stats
from scipy.stats import qmc

from .changepoint.consensus import EpochPartition
from .design import natural_sort
from .glmm import FitOptions, FormulaSpec, GlmmFit, fit_nb_glmm
from .ingestion import InsufficientDataError

NEWS_TIERS = ["low", "medium", "high"]
NON_NEWS = "non_news"
SCOPES = ("news_only", "news_and_nonnews")
QMC_TOLERANCE = 1e-3

NEWS_ONLY_SPEC = FormulaSpec(
    mean="quality*epoch + (1|outlet) + (1|outlet:epoch) + (1+quality|year:month:day)",
    dispersion="quality*epoch + (1|outlet) + (1|outlet:epoch)",
    parametrization="nb1",
)
NEWS_AND_NONNEWS_SPEC = FormulaSpec(
    mean="quality*epoch + (1|outlet) + (1|outlet:epoch) + (1|year:month:day)",
    dispersion="1 + (1|outlet) + (1|outlet:epoch)",
    parametrization="nb1",
)


class NotConvergedError(RuntimeError):
    pass


class EstimabilityError(ValueError):
    pass


# ------------------------------------------------------------ joint vectors

@dataclass
class JointEstimates:
    """Log-scale estimates with their joint asymptotic covariance.

    ``weights`` maps ``base`` estimates onto these ones when both come from
    the same fit; it lets later contrasts combine covariances exactly.
    """

    names: list
    estimate: np.ndarray
    cov: np.ndarray
    base: "JointEstimates | None" = None
    weights: np.ndarray | None = None

    def __post_init__(self):
        self.estimate = np.asarray(self.estimate, dtype=float).reshape(-1)
        self.cov = np.asarray(self.cov, dtype=float).reshape(self.estimate.size, self.estimate.size)
        if len(self.names) != self.estimate.size:
            raise ValueError("one name per estimate required")
        if not np.allclose(self.cov, self.cov.T, rtol=1e-10, atol=1e-14):
            raise ValueError("covariance must be symmetric")
        self.cov = 0.5 * (self.cov + self.cov.T)

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.cov), 0.0, None))

    def root(self) -> "JointEstimates":
        return self if self.base is None else self.base

    def root_weights(self) -> np.ndarray:
        return np.eye(self.estimate.size) if self.base is None else self.weights

    def linear(self, W, names) -> "JointEstimates":
        W = np.atleast_2d(np.asarray(W, dtype=float))
        base = self.root()
        full = W @ self.root_weights()
        return JointEstimates(list(names), full @ base.estimate, full @ base.cov @ full.T, base, full)

    def subset(self, names) -> "JointEstimates":
        idx = [self.names.index(n) for n in names]
        W = np.zeros((len(idx), self.estimate.size))
        W[np.arange(len(idx)), idx] = 1.0
        return self.linear(W, names)


def _stack(a: JointEstimates, b: JointEstimates, sign: float = 1.0) -> JointEstimates:
    """a + sign*b, using shared covariance when both come from the same fit."""
    if a.root() is b.root():
        W = a.root_weights() + sign * b.root_weights()
        base = a.root()
        return JointEstimates(list(a.names), W @ base.estimate, W @ base.cov @ W.T, base, W)
    return JointEstimates(list(a.names), a.estimate + sign * b.estimate, a.cov + b.cov)


# -------------------------------------------------------- family adjustment

@dataclass
class FamilyAdjustment:
    p_raw: np.ndarray
    p_adjusted: np.ndarray
    critical: float
    alpha: float
    n_points: int


def _merge_correlated(corr: np.ndarray, tol: float = 1e-10) -> list:
    keep = []
    for j in range(corr.shape[0]):
        if not any(abs(abs(corr[i, j]) - 1.0) < tol for i in keep):
            keep.append(j)
    return keep


def _max_abs_draws(corr: np.ndarray, n_points: int, seed: int) -> np.ndarray:
    w, V = np.linalg.eigh(corr)
    root = V * np.sqrt(np.clip(w, 0.0, None))
    engine = qmc.MultivariateNormalQMC(np.zeros(corr.shape[0]), cov_root=root.T, rng=seed)
    out = np.empty(n_points)
    chunk = 1 << 16
    for s in range(0, n_points, chunk):
        m = min(chunk, n_points - s)
        out[s:s + m] = np.abs(engine.random(m)).max(axis=1)
    return out


def adjust_family(estimates: JointEstimates, alpha: float = 0.05, null: float = 0.0,
                  n_points: int = 1 << 20, seed: int = 0) -> FamilyAdjustment:
    """Single-step max-|z| adjustment under the joint Gaussian.

    The tail probability of max |Z| is integrated with scrambled Sobol
    points (absolute error well below ``QMC_TOLERANCE`` at the default
    size); the draws are reused for the equicoordinate quantile.
    """
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    se = estimates.se
    if np.any(se <= 0):
        raise ValueError("every estimate in a family needs a positive standard error")
    z = (estimates.estimate - null) / se
    p_raw = 2.0 * stats.norm.sf(np.abs(z))
    corr = estimates.cov / np.outer(se, se)
    w = np.linalg.eigvalsh(corr)
    if w.min() < -1e-8 * max(w.max(), 1.0):
        raise ValueError("covariance is not positive semidefinite")
    keep = _merge_correlated(corr)
    if len(keep) == 1:
        return FamilyAdjustment(p_raw, p_raw.copy(), float(stats.norm.isf(alpha / 2)), alpha, 0)
    m = _max_abs_draws(corr[np.ix_(keep, keep)], n_points, seed)
    m.sort()
    tail = 1.0 - np.searchsorted(m, np.abs(z), side="left") / m.size
    # the exact tail of a maximum is never below a marginal tail
    p_adj = np.clip(np.maximum(tail, p_raw), 0.0, 1.0)
    crit = float(np.quantile(m, 1.0 - alpha))
    return FamilyAdjustment(p_raw, p_adj, crit, alpha, n_points)


# ----------------------------------------------------------------- EMM cells

@dataclass
class EmmCell:
    epoch: str
    group: str
    emm: float
    log_emm: float
    se_log: float

    def __post_init__(self):
        if not self.se_log > 0:
            raise ValueError(f"nonpositive standard error for cell {self.group}@{self.epoch}")


@dataclass
class EmmTable:
    cells: list
    joint: JointEstimates
    alpha: float = 0.05

    def cell(self, group, epoch) -> EmmCell:
        for c in self.cells:
            if c.group == str(group) and c.epoch == str(epoch):
                return c
        raise KeyError(f"no cell {group}@{epoch}")

    @property
    def groups(self) -> list:
        return list(dict.fromkeys(c.group for c in self.cells))

    def epochs(self, group) -> list:
        return natural_sort(c.epoch for c in self.cells if c.group == str(group))

    def log_vector(self, group, epochs=None) -> JointEstimates:
        epochs = self.epochs(group) if epochs is None else [str(e) for e in epochs]
        return self.joint.subset([_key(group, e) for e in epochs])

    def frame(self) -> pd.DataFrame:
        q = stats.norm.isf(self.alpha / 2)
        rows = [{"group": c.group, "epoch": c.epoch, "mean": c.emm,
                 "ci_low": float(np.exp(c.log_emm - q * c.se_log)),
                 "ci_high": float(np.exp(c.log_emm + q * c.se_log)),
                 "log_mean": c.log_emm, "se_log": c.se_log} for c in self.cells]
        return pd.DataFrame(rows)


def _key(group, epoch) -> str:
    return f"{group}@{epoch}"


def _marginal_variance(fit: GlmmFit, cells: pd.DataFrame, marginalize) -> np.ndarray:
    out = np.zeros(len(cells))
    for name, info in fit.re_cov.items():
        if info["row"] != "mean":
            continue
        group = info["group"].split(":")
        if not any(g in marginalize for g in group):
            continue
        Z = fit.recipes[name].build(cells)
        S = np.asarray(info["cov"], dtype=float)
        out += np.einsum("nk,kl,nl->n", Z, S, Z)
    return out


def emm(fit: GlmmFit, grid: pd.DataFrame, group: str = "quality", epoch: str = "epoch",
        marginalize=("outlet",), overall: dict | None = None, alpha: float = 0.05) -> EmmTable:
    """Marginal means over outlet-level effects at a typical (zero-effect) day.

    ``grid`` rows are the cells; they must have been observed in the fit.
    ``overall`` maps a new group name to member groups whose log means are
    averaged uniformly per epoch.
    """
    if not fit.converged:
        raise NotConvergedError("refusing marginal means from an unconverged fit")
    grid = grid.reset_index(drop=True)
    X = fit.recipes["mean"].build(grid)
    log_emm = X @ fit.beta + 0.5 * _marginal_variance(fit, grid, set(marginalize))
    names = [_key(g, e) for g, e in zip(grid[group].astype(str), grid[epoch].astype(str))]
    if len(set(names)) != len(names):
        raise ValueError("grid cells must be unique")
    joint = JointEstimates(names, log_emm, X @ fit.vcov_beta @ X.T)
    if overall:
        W, extra = [], []
        for new, members in overall.items():
            members = [str(m) for m in members]
            for e in natural_sort({n.split("@", 1)[1] for n in names}):
                keys = [_key(m, e) for m in members]
                if all(k in names for k in keys):
                    row = np.zeros(len(names))
                    row[[names.index(k) for k in keys]] = 1.0 / len(keys)
                    W.append(row)
                    extra.append(_key(new, e))
        if W:
            W = np.vstack([np.eye(len(names)), np.array(W)])
            joint = joint.linear(W, names + extra)
    cells = []
    for n, v, s in zip(joint.names, joint.estimate, joint.se):
        g, e = n.split("@", 1)
        cells.append(EmmCell(epoch=e, group=g, emm=float(np.exp(v)), log_emm=float(v), se_log=float(s)))
    return EmmTable(cells, joint, alpha)


# ----------------------------------------------------------------- contrasts

@dataclass
class ContrastEstimate:
    kind: str
    group: str
    label: str
    ratio: float
    ci_low: float
    ci_high: float
    z: float
    p_raw: float
    p_adjusted: float

    def __post_init__(self):
        if not self.ci_low <= self.ratio <= self.ci_high:
            raise ValueError("ratio must lie inside its interval")
        if not (0 <= self.p_raw <= 1 and 0 <= self.p_adjusted <= 1):
            raise ValueError("p-values must lie in [0, 1]")


@dataclass
class ContrastSet:
    """One family of log-ratio contrasts sharing a kind and a group."""

    kind: str
    group: str
    labels: list
    joint: JointEstimates
    alpha: float = 0.05
    adjustment: FamilyAdjustment | None = None

    @property
    def ratios(self) -> np.ndarray:
        return np.exp(self.joint.estimate)

    def adjusted(self, alpha: float | None = None, seed: int = 0) -> "ContrastSet":
        alpha = self.alpha if alpha is None else alpha
        return replace(self, alpha=alpha, adjustment=adjust_family(self.joint, alpha, seed=seed))

    def estimates(self) -> list:
        est, se = self.joint.estimate, self.joint.se
        with np.errstate(divide="ignore", invalid="ignore"):
            z = np.where(se > 0, est / np.where(se > 0, se, 1.0), 0.0)
        p = 2.0 * stats.norm.sf(np.abs(z))
        if self.adjustment is not None:
            q, p_adj = self.adjustment.critical, self.adjustment.p_adjusted
        else:
            q, p_adj = stats.norm.isf(self.alpha / 2), p
        out = []
        for j, lab in enumerate(self.labels):
            out.append(ContrastEstimate(
                kind=self.kind, group=self.group, label=str(lab), ratio=float(np.exp(est[j])),
                ci_low=float(np.exp(est[j] - q * se[j])), ci_high=float(np.exp(est[j] + q * se[j])),
                z=float(z[j]), p_raw=float(p[j]), p_adjusted=float(p_adj[j])))
        return out

    def frame(self) -> pd.DataFrame:
        rows = [{"kind": c.kind, "group": c.group, "contrast": c.label, "ratio": c.ratio,
                 "ci_low": c.ci_low, "ci_high": c.ci_high, "z": c.z, "p": c.p_raw,
                 "p_adjusted": c.p_adjusted} for c in self.estimates()]
        return pd.DataFrame(rows)


def _epochs_of(cells: EmmTable, group) -> list:
    eps = cells.epochs(group)
    if not eps:
        raise KeyError(f"no cells for group {group!r}")
    return eps


def contrast_sequential(cells: EmmTable, group, alpha: float = 0.05) -> ContrastSet:
    """Each epoch against the preceding one: mu(t) / mu(t-1)."""
    eps = _epochs_of(cells, group)
    if len(eps) < 2:
        raise ValueError("sequential contrasts need at least 2 epochs")
    v = cells.log_vector(group, eps)
    n = len(eps)
    W = np.zeros((n - 1, n))
    W[np.arange(n - 1), np.arange(1, n)] = 1.0
    W[np.arange(n - 1), np.arange(n - 1)] = -1.0
    labels = [f"{b} vs {a}" for a, b in zip(eps, eps[1:])]
    return ContrastSet("sequential", str(group), labels, v.linear(W, labels), alpha)


def contrast_effect_coding(cells: EmmTable, group, baseline_epochs=None, alpha: float = 0.05) -> ContrastSet:
    """Each epoch against the geometric mean over the baseline epochs (all when unset)."""
    eps = _epochs_of(cells, group)
    base = eps if baseline_epochs is None else [str(e) for e in baseline_epochs]
    if not base:
        raise ValueError("baseline epoch set is empty")
    missing = [e for e in base if e not in eps]
    if missing:
        raise KeyError(f"baseline epochs {missing} have no cells for group {group!r}")
    v = cells.log_vector(group, eps)
    n = len(eps)
    W = np.eye(n)
    W[:, [eps.index(e) for e in base]] -= 1.0 / len(base)
    label_base = "all" if baseline_epochs is None else "+".join(base)
    labels = [f"{e} vs mean({label_base})" for e in eps]
    kind = "effect_coding"
    return ContrastSet(kind, str(group), labels, v.linear(W, labels), alpha)


def did_estimate(news: ContrastSet, nonnews: ContrastSet, alpha: float | None = None) -> ContrastSet:
    """Ratio of matched contrasts; covariance comes from the shared fit when available."""
    if news.kind != nonnews.kind:
        raise ValueError("contrast kinds differ")
    if list(news.labels) != list(nonnews.labels):
        raise ValueError("contrast epoch sets differ")
    kind = {"sequential": "did", "effect_coding": "cumulative_did"}.get(news.kind, news.kind)
    joint = _stack(news.joint, nonnews.joint, -1.0)
    return ContrastSet(kind, f"{news.group}/{nonnews.group}", list(news.labels), joint,
                       news.alpha if alpha is None else alpha)


@dataclass
class ChiSquareTest:
    statistic: float
    df: int
    p: float
    singular: bool
    labels: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"statistic": self.statistic, "df": self.df, "p": self.p,
                "singular": self.singular, "labels": list(self.labels)}


def parallel_trends_test(taus: JointEstimates, rcond: float = 1e-10) -> ChiSquareTest:
    """Wald test that every log ratio is zero; pseudo-inverse with rank df when singular."""
    t = taus.estimate
    if t.size == 0:
        raise ValueError("no estimates to test")
    w = np.linalg.eigvalsh(taus.cov)
    rank = int(np.sum(w > rcond * max(w.max(), 0.0))) if w.max() > 0 else 0
    if rank == 0:
        raise ValueError("covariance has rank zero")
    singular = rank < t.size
    inv = np.linalg.pinv(taus.cov, rcond=rcond, hermitian=True) if singular else np.linalg.inv(taus.cov)
    T = float(t @ inv @ t)
    return ChiSquareTest(T, rank, float(stats.chi2.sf(T, rank)), singular, list(taus.names))


def total_effect(cells: EmmTable, epoch_a, epoch_b, groups=None, reference=None,
                 average_over=None, alpha: float = 0.05) -> ContrastSet:
    """mu(b)/mu(a) per group; with a reference group, also each ratio over the reference ratio.

    Tier-versus-average ratios compare each group in ``average_over``
    (default ``groups``) with the geometric mean ratio over those groups.
    """
    a, b = str(epoch_a), str(epoch_b)
    groups = [g for g in (groups or cells.groups) if g != reference]
    names, rows = [], []
    base = cells.joint
    idx = {n: i for i, n in enumerate(base.names)}

    def row(g):
        for e in (a, b):
            if _key(g, e) not in idx:
                raise KeyError(f"no cell {g}@{e}")
        r = np.zeros(len(base.names))
        r[idx[_key(g, b)]] += 1.0
        r[idx[_key(g, a)]] -= 1.0
        return r

    per = {g: row(g) for g in groups}
    for g in groups:
        names.append(f"{g}: {b} vs {a}")
        rows.append(per[g])
    if reference is not None:
        ref = row(reference)
        names.append(f"{reference}: {b} vs {a}")
        rows.append(ref)
        for g in groups:
            names.append(f"{g}/{reference}: {b} vs {a}")
            rows.append(per[g] - ref)
    avg = list(groups if average_over is None else average_over)
    if len(avg) > 1:
        mean_row = np.mean([per[g] for g in avg], axis=0)
        for g in avg:
            names.append(f"{g}/average: {b} vs {a}")
            rows.append(per[g] - mean_row)
    return ContrastSet("total_effect", "all", names, base.linear(np.array(rows), names), alpha)


# ----------------------------------------------------------- epoch modelling

@dataclass
class EpochModel:
    fit: GlmmFit
    scope: str
    partition: EpochPartition
    cells: pd.DataFrame            # included quality x epoch cells with post counts
    excluded: pd.DataFrame         # cells below the floor
    groups: list
    dropped_rows: dict

    def grid(self) -> pd.DataFrame:
        return self.cells[["quality", "epoch"]].astype(str).reset_index(drop=True)

    def emm(self, alpha: float = 0.05) -> EmmTable:
        tiers = [g for g in self.groups if g != NON_NEWS]
        overall = {"news": tiers} if len(tiers) > 1 else None
        return emm(self.fit, self.grid(), overall=overall, alpha=alpha)

    def exclusion_report(self) -> dict:
        return {"excluded_cells": self.excluded.to_dict(orient="records"), **self.dropped_rows}

    def to_dict(self) -> dict:
        return {"format": "engshift.epoch_model", "version": 1, "scope": self.scope,
                "partition": self.partition.to_dict(), "groups": list(self.groups),
                "cells": self.cells.to_dict(orient="records"),
                "excluded": self.excluded.to_dict(orient="records"),
                "dropped_rows": dict(self.dropped_rows), "fit": self.fit.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "EpochModel":
        if d.get("format") != "engshift.epoch_model":
            raise ValueError("not a serialized epoch model")
        cols = ["quality", "epoch", "n_posts"]
        return cls(GlmmFit.from_dict(d["fit"]), d["scope"], EpochPartition.from_dict(d["partition"]),
                   pd.DataFrame(d["cells"], columns=cols), pd.DataFrame(d["excluded"], columns=cols),
                   list(d["groups"]), dict(d["dropped_rows"]))


def model_frame(posts: pd.DataFrame, outlets: pd.DataFrame | None, partition: EpochPartition,
                scope: str = "news_only") -> tuple:
    """Model columns (reactions, outlet, quality, epoch, year, month, day); returns (frame, dropped)."""
    if scope not in SCOPES:
        raise ValueError(f"scope must be one of {SCOPES}")
    df = posts
    if outlets is not None:
        meta = outlets[["outlet_id", "sector", "quality"]]
        df = posts.drop(columns=[c for c in ("sector", "quality") if c in posts.columns])
        df = df.merge(meta, on="outlet_id", how="left", validate="many_to_one")
    for c in ("sector", "quality"):
        if c not in df.columns:
            raise ValueError(f"posts lack outlet {c!r}; pass the outlet table")
    if df["sector"].isna().any():
        missing = sorted(df.loc[df["sector"].isna(), "outlet_id"].astype(str).unique())
        raise ValueError(f"outlets without metadata: {missing[:5]}")
    dropped = {"missing_reactions": int(df["reactions"].isna().sum())}
    df = df[df["reactions"].notna()]
    sector = df["sector"].astype(str)
    if scope == "news_only":
        dropped["non_news"] = int((sector != "news").sum())
        df = df[sector == "news"]
        quality = df["quality"].astype(str)
    else:
        quality = np.where(sector == "news", df["quality"].astype(str), NON_NEWS)
    ts = pd.DatetimeIndex(pd.to_datetime(df["published_at"], utc=True)).tz_convert("UTC").tz_localize(None)
    inside = (ts >= partition.start) & (ts < partition.end)
    dropped["outside_window"] = int((~inside).sum())
    df, ts, quality = df[inside], ts[inside], np.asarray(quality)[inside]
    epochs = partition.epoch_of(ts)
    order = [q for q in NEWS_TIERS + [NON_NEWS] if q in set(quality)]
    order += natural_sort(set(quality) - set(order))
    frame = pd.DataFrame({
        "reactions": df["reactions"].astype("int64").to_numpy(),
        "outlet": df["outlet_id"].astype(str).to_numpy(),
        "quality": pd.Categorical(quality, categories=order),
        "epoch": pd.Categorical(epochs.astype(str),
                                categories=[str(k) for k in range(partition.n_epochs)]),
        "year": ts.strftime("%Y"), "month": ts.strftime("%m"), "day": ts.strftime("%d"),
    })
    return frame, dropped


def _collapse_spec(spec: FormulaSpec, single_epoch: bool, single_group: bool) -> FormulaSpec:
    def fix(text):
        terms = [t.strip() for t in _split_plus(text)]
        out = []
        for t in terms:
            if single_epoch and t.replace(" ", "") in ("(1|outlet:epoch)",):
                continue
            if single_group and t.replace(" ", "").startswith("(1+quality|"):
                t = "(1|" + t.split("|", 1)[1]
            out.append(t)
        return " + ".join(out)
    return FormulaSpec(fix(spec.mean), fix(spec.dispersion), spec.parametrization)


def _split_plus(text: str) -> list:
    parts, depth, cur = [], 0, ""
    for ch in text:
        depth += (ch == "(") - (ch == ")")
        if ch == "+" and depth == 0:
            parts.append(cur)
            cur = ""
        else:
            cur += ch
    parts.append(cur)
    return parts


def fit_epoch_model(posts: pd.DataFrame, epochs: EpochPartition, scope: str = "news_only",
                    outlets: pd.DataFrame | None = None, floor: int = 20,
                    spec: FormulaSpec | None = None, options: FitOptions | None = None) -> EpochModel:
    """Fit the epoch x quality NB1 mixed model after excluding sparse cells."""
    frame, dropped = model_frame(posts, outlets, epochs, scope)
    counts = frame.groupby(["quality", "epoch"], observed=True).size().rename("n_posts").reset_index()
    small = counts[counts["n_posts"] < floor]
    keep = counts[counts["n_posts"] >= floor]
    if keep.empty:
        raise InsufficientDataError(f"no quality x epoch cell reaches the floor of {floor} posts")
    key = frame["quality"].astype(str) + "@" + frame["epoch"].astype(str)
    ok = set(keep["quality"].astype(str) + "@" + keep["epoch"].astype(str))
    frame = frame[key.isin(ok).to_numpy()].copy()
    dropped["below_floor"] = int(small["n_posts"].sum())
    for c in ("quality", "epoch"):
        frame[c] = frame[c].cat.remove_unused_categories()
    groups = [str(g) for g in frame["quality"].cat.categories]
    if scope == "news_and_nonnews" and NON_NEWS not in groups:
        raise InsufficientDataError("no non-news cells left for the comparison model")
    base = spec or (NEWS_ONLY_SPEC if scope == "news_only" else NEWS_AND_NONNEWS_SPEC)
    use = _collapse_spec(base, frame["epoch"].nunique() == 1, frame["quality"].nunique() == 1)
    fit = fit_nb_glmm(frame, use, options)
    keep = keep.assign(quality=keep["quality"].astype(str), epoch=keep["epoch"].astype(str))
    small = small.assign(quality=small["quality"].astype(str), epoch=small["epoch"].astype(str))
    return EpochModel(fit, scope, epochs, keep.reset_index(drop=True), small.reset_index(drop=True),
                      groups, dropped)


# ----------------------------------------------------------- full inference

@dataclass
class InferenceReport:
    emm: EmmTable
    contrasts: list
    tests: dict
    meta: dict = field(default_factory=dict)

    def contrast_frame(self) -> pd.DataFrame:
        frames = [c.frame() for c in self.contrasts]
        return pd.concat(frames, ignore_index=True) if frames else pd.DataFrame()

    def to_dict(self) -> dict:
        return {
            "format": "engshift.inference", "version": 1,
            "emm": self.emm.frame().to_dict(orient="records"),
            "contrasts": self.contrast_frame().to_dict(orient="records"),
            "tests": {k: v.to_dict() for k, v in self.tests.items()},
            "meta": self.meta,
        }

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=1)


def run_inference(model: EpochModel, alpha: float = 0.05, baseline_epochs=(0, 1, 2, 3, 4),
                  post_epochs=None, total=None, seed: int = 0) -> InferenceReport:
    """Marginal means, per-group contrast families, DiD ratios and trend tests."""
    table = model.emm(alpha)
    groups = table.groups
    all_eps = natural_sort({c.epoch for c in table.cells})
    baseline = [str(e) for e in baseline_epochs if str(e) in all_eps] or None
    contrasts, seq, eff = [], {}, {}
    for g in groups:
        eps = table.epochs(g)
        if len(eps) < 2:
            continue
        seq[g] = contrast_sequential(table, g, alpha)
        base_g = [e for e in (baseline or []) if e in eps] or None
        eff[g] = contrast_effect_coding(table, g, base_g, alpha)
    # each contrast kind within a group is its own family
    for d in (seq, eff):
        for g in d:
            d[g] = d[g].adjusted(alpha, seed=seed)
            contrasts.append(d[g])
    tests = {}
    if NON_NEWS in seq:
        news = "news" if "news" in seq else next((g for g in groups if g != NON_NEWS and g in seq), None)
        if news is not None and table.epochs(news) == table.epochs(NON_NEWS):
            did = did_estimate(seq[news], seq[NON_NEWS]).adjusted(alpha, seed=seed)
            contrasts.append(did)
            if eff[news].labels == eff[NON_NEWS].labels:
                contrasts.append(did_estimate(eff[news], eff[NON_NEWS]).adjusted(alpha, seed=seed))
            ends = [lab.split(" vs ")[0] for lab in did.labels]
            pre = [lab for lab, e in zip(did.labels, ends) if baseline and e in baseline]
            chosen = [str(e) for e in post_epochs] if post_epochs is not None else None
            post = [lab for lab, e in zip(did.labels, ends)
                    if (e in chosen if chosen is not None else not (baseline and e in baseline))]
            if pre:
                tests["parallel_trends_pre"] = parallel_trends_test(did.joint.subset(pre))
            if post:
                tests["parallel_trends_post"] = parallel_trends_test(did.joint.subset(post))
    if total is not None:
        a, b = total
    else:
        a, b = _default_total_epochs(table, baseline)
    if a is not None and a != b:
        ref = NON_NEWS if NON_NEWS in groups else None
        try:
            shown = [g for g in groups if g != NON_NEWS]
            tiers = [g for g in model.groups if g != NON_NEWS]
            contrasts.append(total_effect(table, a, b, shown, ref, tiers, alpha).adjusted(alpha, seed=seed))
        except KeyError:
            pass
    meta = {"alpha": alpha, "baseline_epochs": baseline, "scope": model.scope,
            "total_effect_epochs": [a, b], "qmc_tolerance": QMC_TOLERANCE}
    return InferenceReport(table, contrasts, tests, meta)


def _default_total_epochs(table: EmmTable, baseline):
    """Peak baseline epoch of the news average and the lowest later epoch."""
    g = "news" if "news" in table.groups else next((x for x in table.groups if x != NON_NEWS), None)
    if g is None or not baseline:
        return None, None
    eps = table.epochs(g)
    pre = [e for e in eps if e in baseline]
    later = [e for e in eps if e not in baseline]
    if not pre or not later:
        return None, None
    a = max(pre, key=lambda e: table.cell(g, e).log_emm)
    b = min(later, key=lambda e: table.cell(g, e).log_emm)
    return a, b
