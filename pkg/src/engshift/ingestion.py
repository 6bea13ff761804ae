"""Parsing, cleaning, deduplication and imputation of raw post tables.

A post table is a :class:`pandas.DataFrame` with the columns in
:data:`POST_COLUMNS`.  Counts are nullable integers (``pd.NA`` = missing) and
``published_at`` is a timezone-aware UTC timestamp.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
import pandas as pd
from scipy import stats

POST_COLUMNS = ["post_id", "outlet_id", "published_at", "post_type", "author_is_page", "text",
                "reactions", "comments", "views", "source"]
REQUIRED_COLUMNS = ["post_id", "outlet_id", "published_at", "post_type", "reactions"]
COUNT_COLUMNS = ["reactions", "comments", "views"]
OPTIONAL_DEFAULTS = {"author_is_page": "true", "text": "", "comments": "", "views": "",
                     "source": "primary_feed"}
OUTLET_COLUMNS = ["outlet_id", "name", "sector", "quality", "mean_posts"]


class PostType(str, Enum):
    STATUS = "status"
    LINK = "link"
    PHOTO = "photo"
    VIDEO = "video"
    EVENT = "event"
    MUSIC = "music"
    UNKNOWN = "unknown"


class Source(str, Enum):
    PRIMARY_FEED = "primary_feed"
    LIBRARY = "library"


class Sector(str, Enum):
    NEWS = "news"
    NON_NEWS = "non_news"


class Quality(str, Enum):
    LOW = "low"
    MEDIUM = "medium"
    HIGH = "high"
    NON_NEWS = "non_news"


class SchemaError(ValueError):
    pass


class InsufficientDataError(ValueError):
    pass


class SingularDesignError(ValueError):
    pass


_TRUE = {"true", "1", "yes", "t", "y"}
_FALSE = {"false", "0", "no", "f", "n"}


@dataclass
class ParseResult:
    table: pd.DataFrame
    rejects: pd.DataFrame


def _parse_count(raw: str):
    raw = raw.strip()
    if raw == "":
        return pd.NA, None
    try:
        value = float(raw)
    except ValueError:
        return None, f"non-numeric count {raw!r}"
    if not math.isfinite(value) or value != math.floor(value):
        return None, f"non-integer count {raw!r}"
    if value < 0:
        return None, f"negative count {raw!r}"
    return int(value), None


def _parse_timestamp(raw: str):
    try:
        ts = pd.Timestamp(raw.strip())
    except (ValueError, TypeError):
        return None
    if ts is pd.NaT:
        return None
    return ts.tz_localize("UTC") if ts.tzinfo is None else ts.tz_convert("UTC")


def empty_table() -> pd.DataFrame:
    return _to_frame([])


def _to_frame(records: list) -> pd.DataFrame:
    df = pd.DataFrame.from_records(records, columns=POST_COLUMNS)
    df["published_at"] = pd.to_datetime(df["published_at"], utc=True)
    for c in COUNT_COLUMNS:
        df[c] = pd.array(df[c].tolist(), dtype="Int64")
    df["author_is_page"] = df["author_is_page"].astype(bool)
    for c in ("post_id", "outlet_id", "post_type", "text", "source"):
        df[c] = df[c].astype(object)
    return df.reset_index(drop=True)


def parse_posts(stream, schema: dict | None = None, delimiter: str = ",") -> ParseResult:
    """Read a delimited post table.

    ``schema`` maps canonical column names to the names used in the input
    header.  Malformed rows are collected with a reason instead of dropped.
    """
    schema = schema or {}
    if isinstance(stream, (str, bytes)) and not isinstance(stream, io.IOBase):
        stream = open(stream, newline="", encoding="utf-8")
        close = True
    else:
        close = False
    try:
        reader = csv.DictReader(stream, delimiter=delimiter)
        header = reader.fieldnames or []
        colmap = {c: schema.get(c, c) for c in POST_COLUMNS}
        missing = [c for c in REQUIRED_COLUMNS if colmap[c] not in header]
        if missing:
            raise SchemaError(f"missing mandatory column(s): {missing}")
        records, rejects, seen = [], [], set()
        for lineno, row in enumerate(reader, start=2):
            raw = {c: (row.get(colmap[c]) if colmap[c] in header else OPTIONAL_DEFAULTS[c]) for c in POST_COLUMNS}
            raw = {c: ("" if v is None else v) for c, v in raw.items()}
            reason = None
            post_id = raw["post_id"].strip()
            outlet_id = raw["outlet_id"].strip()
            if not post_id:
                reason = "missing post_id"
            elif post_id in seen:
                reason = f"duplicate post_id {post_id!r}"
            elif not outlet_id:
                reason = "missing outlet_id"
            ts = _parse_timestamp(raw["published_at"]) if reason is None else None
            if reason is None and ts is None:
                reason = f"unparseable timestamp {raw['published_at']!r}"
            ptype = raw["post_type"].strip().lower()
            if reason is None and ptype not in {p.value for p in PostType}:
                reason = f"unknown post_type {raw['post_type']!r}"
            page = raw["author_is_page"].strip().lower()
            if reason is None and page not in _TRUE | _FALSE:
                reason = f"invalid author_is_page {raw['author_is_page']!r}"
            source = raw["source"].strip().lower() or Source.PRIMARY_FEED.value
            if reason is None and source not in {s.value for s in Source}:
                reason = f"unknown source {raw['source']!r}"
            counts = {}
            for c in COUNT_COLUMNS:
                if reason is not None:
                    break
                value, err = _parse_count(raw[c])
                if err:
                    reason = f"{c}: {err}"
                counts[c] = value
            if reason is not None:
                rejects.append({"line": lineno, "post_id": post_id, "reason": reason,
                                "raw": delimiter.join(raw[c] for c in POST_COLUMNS)})
                continue
            seen.add(post_id)
            records.append({"post_id": post_id, "outlet_id": outlet_id, "published_at": ts,
                            "post_type": ptype, "author_is_page": page in _TRUE,
                            "text": raw["text"], **counts, "source": source})
    finally:
        if close:
            stream.close()
    return ParseResult(_to_frame(records), pd.DataFrame(rejects, columns=["line", "post_id", "reason", "raw"]))


def write_posts(table: pd.DataFrame, path, extra_columns=()) -> None:
    out = table[POST_COLUMNS + [c for c in extra_columns if c in table.columns]].copy()
    out["published_at"] = out["published_at"].dt.strftime("%Y-%m-%dT%H:%M:%SZ")
    out["author_is_page"] = out["author_is_page"].map({True: "true", False: "false"})
    out.to_csv(path, index=False, quoting=csv.QUOTE_MINIMAL, lineterminator="\n")


def read_outlets(stream) -> pd.DataFrame:
    """Read and validate outlet metadata."""
    df = pd.read_csv(stream, dtype=str, keep_default_na=False)
    missing = [c for c in OUTLET_COLUMNS if c not in df.columns]
    if missing:
        raise SchemaError(f"missing outlet column(s): {missing}")
    df = df[OUTLET_COLUMNS].copy()
    df["mean_posts"] = pd.to_numeric(df["mean_posts"], errors="raise")
    validate_outlets(df)
    return df


def validate_outlets(df: pd.DataFrame) -> None:
    sectors = {s.value for s in Sector}
    qualities = {q.value for q in Quality}
    for row in df.itertuples(index=False):
        if row.sector not in sectors or row.quality not in qualities:
            raise SchemaError(f"outlet {row.outlet_id!r}: invalid sector/quality")
        if (row.sector == Sector.NON_NEWS.value) != (row.quality == Quality.NON_NEWS.value):
            raise SchemaError(f"outlet {row.outlet_id!r}: sector and quality disagree")
        if not row.mean_posts > 0:
            raise SchemaError(f"outlet {row.outlet_id!r}: mean_posts must be positive")
    if df["outlet_id"].duplicated().any():
        raise SchemaError("duplicate outlet_id in outlet metadata")


# ------------------------------------------------------------ deduplication

def normalize_text(text: str) -> str:
    """Lowercase and keep only alphanumeric code points (idempotent)."""
    return "".join(ch for ch in str(text).lower() if ch.isalnum())


def deduplicate(table: pd.DataFrame):
    """Collapse records sharing (outlet, normalized text, timestamp); returns (table, report).

    Across sources the primary-feed record wins; within a source the one with
    more reactions, then the smaller post_id.
    """
    if table.empty:
        return table.copy(), {"removed": 0}
    df = table.copy()
    key = pd.DataFrame({
        "outlet": df["outlet_id"].astype(str),
        "text": df["text"].map(normalize_text),
        "ts": df["published_at"],
    })
    order = pd.DataFrame({
        "src": (df["source"] != Source.PRIMARY_FEED.value).astype(int),
        "neg_reactions": -df["reactions"].astype("float64").fillna(-1.0),
        "post_id": df["post_id"].astype(str),
    })
    ranked = pd.concat([key, order], axis=1).sort_values(
        ["outlet", "text", "ts", "src", "neg_reactions", "post_id"], kind="mergesort")
    keep = ~ranked.duplicated(["outlet", "text", "ts"], keep="first")
    kept_index = ranked.index[keep.to_numpy()]
    out = df.loc[sorted(kept_index)].reset_index(drop=True)
    return out, {"removed": int(len(df) - len(out))}


# ---------------------------------------------------------------- cleaning

@dataclass
class CleaningConfig:
    allowed_types: tuple = ("status", "link", "photo", "video")
    window_start: pd.Timestamp | str | None = None
    window_end: pd.Timestamp | str | None = None   # exclusive
    require_page_author: bool = True

    def bounds(self):
        def ts(v):
            if v is None:
                return None
            t = pd.Timestamp(v)
            return t.tz_localize("UTC") if t.tzinfo is None else t.tz_convert("UTC")
        return ts(self.window_start), ts(self.window_end)


REMOVAL_REASONS = ("not_page_author", "disallowed_type", "outside_window")


def filter_valid(table: pd.DataFrame, rules: CleaningConfig):
    """Drop non-page authors, disallowed types and out-of-window posts; returns (table, report).

    Each removed row is attributed to the first failing rule in
    :data:`REMOVAL_REASONS` order, so the counts sum to the rows removed.
    """
    start, end = rules.bounds()
    reason = pd.Series([None] * len(table), index=table.index, dtype=object)
    if rules.require_page_author:
        reason[~table["author_is_page"].astype(bool)] = "not_page_author"
    bad_type = ~table["post_type"].isin(list(rules.allowed_types))
    reason[bad_type & reason.isna()] = "disallowed_type"
    outside = pd.Series(False, index=table.index)
    if start is not None:
        outside |= table["published_at"] < start
    if end is not None:
        outside |= table["published_at"] >= end
    reason[outside & reason.isna()] = "outside_window"
    report = {r: int((reason == r).sum()) for r in REMOVAL_REASONS}
    return table[reason.isna()].reset_index(drop=True), report


# ---------------------------------------------------------- views proxy

@dataclass
class OlsResult:
    coef: np.ndarray
    se: np.ndarray
    r2: float
    adjusted_r2: float
    n: int
    sigma2: float


def ols(X: np.ndarray, y: np.ndarray) -> OlsResult:
    n, p = X.shape
    if n <= p:
        raise InsufficientDataError(f"{n} rows cannot identify {p} coefficients")
    Q, R = np.linalg.qr(X)
    diag = np.abs(np.diag(R))
    if diag.min() <= 1e-10 * max(diag.max(), 1.0):
        raise SingularDesignError("design matrix is rank deficient")
    coef = np.linalg.solve(R, Q.T @ y)
    resid = y - X @ coef
    rss = float(resid @ resid)
    tss = float(((y - y.mean()) ** 2).sum())
    sigma2 = rss / (n - p)
    Rinv = np.linalg.inv(R)
    se = np.sqrt(sigma2 * np.sum(Rinv**2, axis=1))
    r2 = 1.0 - rss / tss if tss > 0 else 1.0
    adj = 1.0 - (1.0 - r2) * (n - 1) / (n - p) if tss > 0 else 1.0
    return OlsResult(coef, se, r2, adj, n, sigma2)


@dataclass
class ProxyFit:
    intercept: float
    slope_reactions: float
    slope_comments: float | None
    adjusted_r2: float
    se: dict
    n: int
    corr_views_reactions: float
    corr_views_comments: float | None

    def confint(self, name: str, level: float = 0.95):
        value = {"intercept": self.intercept, "reactions": self.slope_reactions,
                 "comments": self.slope_comments}[name]
        q = stats.t.ppf(0.5 + level / 2, self.n - len(self.se))
        return value - q * self.se[name], value + q * self.se[name]

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def fit_views_proxy(table: pd.DataFrame, include_comments: bool = False) -> ProxyFit:
    """Least-squares regression of views on reactions (and optionally comments)."""
    cols = ["views", "reactions"] + (["comments"] if include_comments else [])
    sub = table[cols].dropna()
    if len(sub) < 3:
        raise InsufficientDataError("need at least 3 rows with views and reactions")
    y = sub["views"].to_numpy(float)
    preds = [sub[c].to_numpy(float) for c in cols[1:]]
    for name, x in zip(cols[1:], preds):
        if np.ptp(x) == 0:
            raise SingularDesignError(f"predictor {name!r} has zero variance")
    X = np.column_stack([np.ones(len(sub))] + preds)
    res = ols(X, y)
    se = {"intercept": float(res.se[0]), "reactions": float(res.se[1])}
    if include_comments:
        se["comments"] = float(res.se[2])

    def corr(a):
        if a not in table.columns:
            return None
        both = table[["views", a]].dropna().to_numpy(float)
        if len(both) < 3 or np.ptp(both[:, 0]) == 0 or np.ptp(both[:, 1]) == 0:
            return None
        return float(np.corrcoef(both[:, 0], both[:, 1])[0, 1])

    return ProxyFit(
        intercept=float(res.coef[0]), slope_reactions=float(res.coef[1]),
        slope_comments=float(res.coef[2]) if include_comments else None,
        adjusted_r2=float(res.adjusted_r2), se=se, n=res.n,
        corr_views_reactions=corr("reactions"), corr_views_comments=corr("comments"))


# -------------------------------------------------------------- imputation

@dataclass
class ImputationFit:
    """Linear model of reactions on views with per-outlet offsets and slopes.

    Prediction for outlet ``o``: ``intercept + offsets[o] + (views_slope +
    interactions[o]) * views + video * is_video``.  The reference outlet has
    zero offset and interaction.
    """

    intercept: float
    views_slope: float
    offsets: dict
    interactions: dict
    video: float
    r2: float
    se: dict
    reference: str
    pooled_slope: float
    unidentifiable: list = field(default_factory=list)
    n: int = 0

    def slope(self, outlet: str) -> float:
        return self.views_slope + self.interactions[outlet]

    def predict(self, outlet, views, is_video):
        outlet = np.asarray(outlet, dtype=object)
        off = np.array([self.offsets.get(o, np.nan) for o in outlet], dtype=float)
        inter = np.array([self.interactions.get(o, np.nan) for o in outlet], dtype=float)
        return (self.intercept + off + (self.views_slope + inter) * np.asarray(views, float)
                + self.video * np.asarray(is_video, float))

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def fit_imputation(table: pd.DataFrame) -> ImputationFit:
    """Fit reactions ~ views * outlet + video on rows with both counts observed.

    Outlets with fewer than two complete rows (or constant views) cannot
    identify their own slope; they get the pooled common slope instead and
    are listed in ``unidentifiable``.
    """
    sub = table.dropna(subset=["reactions", "views"])
    outlets = sorted(sub["outlet_id"].astype(str).unique())
    if len(outlets) < 1 or len(sub) < 3:
        raise InsufficientDataError("need complete rows from at least one outlet")
    o = sub["outlet_id"].astype(str).to_numpy()
    y = sub["reactions"].to_numpy(float)
    v = sub["views"].to_numpy(float)
    video = (sub["post_type"] == PostType.VIDEO.value).to_numpy(float)
    has_video = 0 < video.sum() < len(video)

    ident = []
    for out in outlets:
        vv = v[o == out]
        if vv.size >= 2 and np.ptp(vv) > 0:
            ident.append(out)
    unident = [out for out in outlets if out not in ident]
    if not ident:
        raise InsufficientDataError("no outlet has enough complete rows to identify a slope")
    ref = ident[0]

    # common-slope fit supplies the fallback slope
    base = [np.ones_like(y), v] + [(o == out).astype(float) for out in outlets[1:]]
    if has_video:
        base.append(video)
    pooled = _lstsq(np.column_stack(base), y)[0][1]

    fixed = np.where(np.isin(o, unident), pooled * v, 0.0)
    cols = [np.ones_like(y), v * (~np.isin(o, unident))]
    names = ["intercept", "views"]
    for out in outlets:
        if out != ref:
            cols.append((o == out).astype(float))
            names.append(f"offset:{out}")
    for out in ident[1:]:
        cols.append(v * (o == out))
        names.append(f"views:{out}")
    if has_video:
        cols.append(video)
        names.append("video")
    X = np.column_stack(cols)
    coef, se = _lstsq(X, y - fixed)
    est = dict(zip(names, coef))
    ses = dict(zip(names, se))
    fitted = X @ coef + fixed
    tss = float(((y - y.mean()) ** 2).sum())
    r2 = 1.0 - float(((y - fitted) ** 2).sum()) / tss if tss > 0 else 1.0
    offsets = {out: (0.0 if out == ref else float(est[f"offset:{out}"])) for out in outlets}
    interactions = {}
    for out in outlets:
        if out == ref:
            interactions[out] = 0.0
        elif out in unident:
            interactions[out] = float(pooled - est["views"])
        else:
            interactions[out] = float(est[f"views:{out}"])
    return ImputationFit(
        intercept=float(est["intercept"]), views_slope=float(est["views"]), offsets=offsets,
        interactions=interactions, video=float(est.get("video", 0.0)), r2=float(r2),
        se={k: float(s) for k, s in ses.items()}, reference=ref, pooled_slope=float(pooled),
        unidentifiable=unident, n=int(len(y)))


def _lstsq(X, y):
    coef, *_ = np.linalg.lstsq(X, y, rcond=None)
    resid = y - X @ coef
    dof = max(X.shape[0] - X.shape[1], 1)
    sigma2 = float(resid @ resid) / dof
    cov = sigma2 * np.linalg.pinv(X.T @ X)
    return coef, np.sqrt(np.clip(np.diag(cov), 0, None))


def round_half_up(x):
    return np.floor(np.asarray(x, dtype=float) + 0.5)


def impute_reactions(table: pd.DataFrame, fit: ImputationFit) -> pd.DataFrame:
    """Fill missing reactions from views; adds ``imputed_flag`` and ``unimputable`` columns."""
    df = table.copy()
    missing = df["reactions"].isna().to_numpy()
    known_outlet = df["outlet_id"].astype(str).isin(list(fit.offsets)).to_numpy()
    has_views = df["views"].notna().to_numpy()
    todo = missing & has_views & known_outlet
    imputed = np.zeros(len(df), dtype=bool)
    if todo.any():
        rows = df[todo]
        pred = fit.predict(rows["outlet_id"].astype(str).to_numpy(), rows["views"].to_numpy(float),
                           (rows["post_type"] == PostType.VIDEO.value).to_numpy())
        values = np.maximum(round_half_up(pred), 0.0).astype(np.int64)
        reactions = df["reactions"].copy()
        reactions[todo] = values
        df["reactions"] = reactions.astype("Int64")
        imputed = todo
    df["imputed_flag"] = imputed
    df["unimputable"] = missing & ~todo
    return df
