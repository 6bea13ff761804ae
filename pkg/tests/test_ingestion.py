import io

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from engshift.ingestion import (
    CleaningConfig,
    InsufficientDataError,
    SchemaError,
    SingularDesignError,
    deduplicate,
    filter_valid,
    fit_imputation,
    fit_views_proxy,
    impute_reactions,
    normalize_text,
    parse_posts,
    read_outlets,
    round_half_up,
    write_posts,
)

HEADER = "post_id,outlet_id,published_at,post_type,author_is_page,text,reactions,comments,views,source\n"


def parse(body, **kw):
    return parse_posts(io.StringIO(HEADER + body), **kw)


def table(rows):
    body = "".join(",".join(str(v) for v in r) + "\n" for r in rows)
    return parse(body).table


def test_three_good_rows():
    res = parse("a,o1,2016-01-05T10:00:00Z,link,true,hi,3,1,100,primary_feed\n"
                "b,o1,2016-01-05T11:00:00Z,photo,true,,0,,,library\n"
                "c,o2,2016-01-06 09:30:00,video,false,x,7,0,5,\n")
    assert len(res.table) == 3 and len(res.rejects) == 0
    t = res.table
    assert t["published_at"].dt.tz is not None
    assert t.loc[1, "comments"] is pd.NA
    assert t.loc[2, "source"] == "primary_feed"
    assert t["reactions"].dtype == "Int64"


def test_negative_count_rejected():
    res = parse("a,o1,2016-01-05T10:00:00Z,link,true,hi,-5,1,100,primary_feed\n")
    assert len(res.table) == 0
    assert "negative" in res.rejects.loc[0, "reason"]


def test_ten_rows_two_malformed():
    good = [f"p{i},o1,2016-02-0{i % 9 + 1}T00:00:00Z,status,true,t{i},{i},0,{10 * i},primary_feed\n"
            for i in range(8)]
    bad = ["p8,o1,yesterday,status,true,t,1,0,1,primary_feed\n",
           "p9,o1,2016-02-01T00:00:00Z,status,true,t,1.5,0,1,primary_feed\n"]
    res = parse("".join(good[:4] + bad[:1] + good[4:] + bad[1:]))
    assert len(res.table) == 8
    assert len(res.rejects) == 2
    assert res.rejects["line"].tolist() == [6, 11]
    assert "timestamp" in res.rejects.loc[0, "reason"]
    assert "non-integer" in res.rejects.loc[1, "reason"]


def test_missing_mandatory_column():
    with pytest.raises(SchemaError):
        parse_posts(io.StringIO("post_id,outlet_id,post_type,reactions\n"))


def test_schema_mapping_and_delimiter():
    text = "id;page;time;kind;likes\nx;o1;2016-01-05T00:00:00Z;LINK;4\n"
    res = parse_posts(io.StringIO(text), schema={"post_id": "id", "outlet_id": "page", "published_at": "time",
                                                 "post_type": "kind", "reactions": "likes"}, delimiter=";")
    assert res.table.loc[0, "post_type"] == "link"
    assert res.table.loc[0, "reactions"] == 4
    assert bool(res.table.loc[0, "author_is_page"])


def test_duplicate_post_id_rejected():
    res = parse("a,o1,2016-01-05T10:00:00Z,link,true,hi,3,1,100,primary_feed\n"
                "a,o1,2016-01-05T10:00:00Z,link,true,hi,3,1,100,primary_feed\n")
    assert len(res.table) == 1 and "duplicate" in res.rejects.loc[0, "reason"]


def test_write_round_trip(tmp_path):
    t = table([("a", "o1", "2016-01-05T10:00:00Z", "link", "true", "x", 3, "", 100, "library")])
    path = tmp_path / "p.csv"
    write_posts(t, path)
    back = parse_posts(str(path)).table
    pd.testing.assert_frame_equal(back, t)


def test_outlets_validation():
    good = "outlet_id,name,sector,quality,mean_posts\no1,A,news,low,2.5\no2,B,non_news,non_news,1\n"
    assert len(read_outlets(io.StringIO(good))) == 2
    with pytest.raises(SchemaError):
        read_outlets(io.StringIO("outlet_id,name,sector,quality,mean_posts\no1,A,news,non_news,2\n"))
    with pytest.raises(SchemaError):
        read_outlets(io.StringIO("outlet_id,name,sector,quality,mean_posts\no1,A,news,low,0\n"))


# ------------------------------------------------------------ deduplication

def test_primary_feed_wins_across_sources():
    t = table([("a", "o1", "2016-01-05T10:00:00Z", "link", "true", "Same story", 3, 0, 1, "library"),
               ("b", "o1", "2016-01-05T10:00:00Z", "link", "true", "Same story", 2, 0, 1, "primary_feed")])
    out, rep = deduplicate(t)
    assert out["post_id"].tolist() == ["b"]
    assert rep["removed"] == 1


def test_unique_keys_unchanged():
    t = table([("a", "o1", "2016-01-05T10:00:00Z", "link", "true", "one", 3, 0, 1, "primary_feed"),
               ("b", "o1", "2016-01-05T10:00:00Z", "link", "true", "two", 2, 0, 1, "primary_feed")])
    out, rep = deduplicate(t)
    pd.testing.assert_frame_equal(out, t)
    assert rep["removed"] == 0


def test_punctuation_duplicates():
    ts = "2016-01-05T10:00:00Z"
    t = table([("a", "o1", ts, "link", "true", "Hello, world!", 3, 0, 1, "primary_feed"),
               ("b", "o1", ts, "link", "true", "hello world", 5, 0, 1, "primary_feed"),
               ("c", "o1", ts, "link", "true", "Breaking: news", 1, 0, 1, "primary_feed"),
               ("d", "o1", ts, "link", "true", "BREAKING news.", 1, 0, 1, "primary_feed"),
               ("e", "o1", ts, "link", "true", "other", 1, 0, 1, "primary_feed")])
    out, _ = deduplicate(t)
    # larger reactions wins, then the smaller post_id
    assert out["post_id"].tolist() == ["b", "c", "e"]


def test_normalize_text_unicode():
    assert normalize_text("Ça va? Très-bien!") == "çavatrèsbien"


@settings(max_examples=200, deadline=None)
@given(st.text(max_size=40))
def test_property_normalization_idempotent(s):
    assert normalize_text(normalize_text(s)) == normalize_text(s)


@st.composite
def post_tables(draw):
    n = draw(st.integers(1, 12))
    rows = []
    for i in range(n):
        rows.append((f"p{i}", draw(st.sampled_from(["o1", "o2"])),
                     f"2016-01-0{draw(st.integers(4, 6))}T00:00:00Z",
                     draw(st.sampled_from(["link", "event", "video", "unknown"])),
                     draw(st.sampled_from(["true", "false"])),
                     draw(st.sampled_from(["a", "A!", "b", "B.", "c"])),
                     draw(st.sampled_from(["", "0", "3", "9"])), "", draw(st.sampled_from(["", "10", "50"])),
                     draw(st.sampled_from(["primary_feed", "library"]))))
    return table(rows)


@settings(max_examples=100, deadline=None)
@given(post_tables())
def test_property_dedup_idempotent_and_unique(t):
    once, _ = deduplicate(t)
    twice, rep = deduplicate(once)
    pd.testing.assert_frame_equal(once, twice)
    assert rep["removed"] == 0
    keys = list(zip(once["outlet_id"], once["text"].map(normalize_text), once["published_at"]))
    assert len(keys) == len(set(keys))


@settings(max_examples=100, deadline=None)
@given(post_tables())
def test_property_filter_counts_add_up(t):
    rules = CleaningConfig(window_start="2016-01-05", window_end="2016-01-06")
    out, rep = filter_valid(t, rules)
    assert len(out) <= len(t)
    assert sum(rep.values()) == len(t) - len(out)
    assert out["author_is_page"].all()
    assert out["post_type"].isin(rules.allowed_types).all()


# ---------------------------------------------------------------- cleaning

def test_filter_reasons():
    t = table([("a", "o1", "2016-01-05T10:00:00Z", "event", "true", "", 1, 0, 1, "primary_feed"),
               ("b", "o1", "1975-06-01T10:00:00Z", "status", "true", "", 1, 0, 1, "primary_feed"),
               ("c", "o1", "2016-01-05T10:00:00Z", "link", "false", "", 1, 0, 1, "primary_feed"),
               ("d", "o1", "2016-01-05T10:00:00Z", "music", "true", "", 1, 0, 1, "primary_feed"),
               ("e", "o1", "2016-01-05T10:00:00Z", "photo", "true", "", 1, 0, 1, "primary_feed")])
    out, rep = filter_valid(t, CleaningConfig(window_start="2016-01-01", window_end="2022-01-01"))
    assert out["post_id"].tolist() == ["e"]
    assert rep == {"not_page_author": 1, "disallowed_type": 2, "outside_window": 1}


def test_filter_conforming_unchanged():
    t = table([("e", "o1", "2016-01-05T10:00:00Z", "photo", "true", "", 1, 0, 1, "primary_feed")])
    out, rep = filter_valid(t, CleaningConfig())
    pd.testing.assert_frame_equal(out, t)
    assert sum(rep.values()) == 0


# ----------------------------------------------------------- views proxy

def synthetic_views(n=2000, slope=50.0, intercept=300.0, seed=0):
    rng = np.random.default_rng(seed)
    reactions = rng.poisson(40, n)
    comments = rng.poisson(5, n)
    views = np.round(intercept + slope * reactions + rng.normal(0, 200, n)).astype(int)
    return pd.DataFrame({"reactions": pd.array(reactions, dtype="Int64"),
                         "comments": pd.array(comments, dtype="Int64"),
                         "views": pd.array(views, dtype="Int64")})


def test_proxy_recovers_slope():
    fit = fit_views_proxy(synthetic_views())
    assert abs(fit.slope_reactions - 50.0) < 2 * fit.se["reactions"] + 0.05
    assert fit.adjusted_r2 <= 1 and all(s > 0 for s in fit.se.values())
    assert fit.corr_views_reactions > 0.8
    lo, hi = fit.confint("reactions")
    assert lo < fit.slope_reactions < hi


def test_proxy_exact_line():
    r = np.arange(1, 20)
    df = pd.DataFrame({"reactions": r, "views": r})
    fit = fit_views_proxy(df)
    assert fit.slope_reactions == pytest.approx(1.0)
    assert fit.intercept == pytest.approx(0.0, abs=1e-9)
    assert fit.adjusted_r2 == pytest.approx(1.0)


def test_proxy_with_comments_matches_lstsq():
    df = synthetic_views(seed=1)
    fit = fit_views_proxy(df, include_comments=True)
    X = np.column_stack([np.ones(len(df)), df["reactions"].to_numpy(float), df["comments"].to_numpy(float)])
    coef = np.linalg.lstsq(X, df["views"].to_numpy(float), rcond=None)[0]
    np.testing.assert_allclose([fit.intercept, fit.slope_reactions, fit.slope_comments], coef, rtol=1e-9)


def test_proxy_errors():
    with pytest.raises(InsufficientDataError):
        fit_views_proxy(pd.DataFrame({"reactions": [1, 2], "views": [1, 2]}))
    with pytest.raises(SingularDesignError):
        fit_views_proxy(pd.DataFrame({"reactions": [1, 1, 1, 1], "views": [1, 2, 3, 4]}))


def test_proxy_interval_coverage():
    rng = np.random.default_rng(7)
    hits = 0
    reps = 500
    x = rng.poisson(30, 60).astype(float)
    for _ in range(reps):
        y = 20.0 + 3.0 * x + rng.normal(0, 10, x.size)
        fit = fit_views_proxy(pd.DataFrame({"reactions": x, "views": y}))
        lo, hi = fit.confint("reactions")
        a_lo, a_hi = fit.confint("intercept")
        hits += (lo <= 3.0 <= hi) and (a_lo <= 20.0 <= a_hi)
    # joint coverage of two 95% intervals lies between 0.90 and 0.95
    assert 0.87 <= hits / reps <= 0.97


# ------------------------------------------------------------ imputation

def two_outlet_table(seed=0, n=400):
    rng = np.random.default_rng(seed)
    rows = []
    for outlet, slope in (("o1", 10.0), ("o2", 20.0)):
        views = rng.uniform(0, 100, n)
        video = rng.random(n) < 0.3
        reactions = np.round(5 + slope * views + rng.normal(0, 30, n))
        rows.append(pd.DataFrame({"outlet_id": outlet, "views": views.round(),
                                  "post_type": np.where(video, "video", "link"), "reactions": reactions}))
    df = pd.concat(rows, ignore_index=True)
    df["reactions"] = df["reactions"].astype("Int64")
    df["views"] = df["views"].astype("Int64")
    return df


def test_imputation_recovers_two_slopes_and_null_video():
    fit = fit_imputation(two_outlet_table())
    assert abs(fit.slope("o1") - 10.0) < 2 * fit.se["views"] + 0.01
    assert abs(fit.slope("o2") - 20.0) < 2 * (fit.se["views"] + fit.se["views:o2"])
    assert abs(fit.video) < 1.96 * fit.se["video"] * 1.5
    assert set(fit.offsets) == set(fit.interactions) == {"o1", "o2"}


def test_imputation_single_outlet_exact():
    df = pd.DataFrame({"outlet_id": "o1", "views": pd.array([1, 2, 3, 4, 5], dtype="Int64"),
                       "post_type": "link", "reactions": pd.array([3, 5, 7, 9, 11], dtype="Int64")})
    fit = fit_imputation(df)
    assert fit.interactions == {"o1": 0.0}
    assert fit.r2 == pytest.approx(1.0)
    assert fit.slope("o1") == pytest.approx(2.0)


def test_imputation_unidentifiable_outlet_uses_pooled_slope():
    df = two_outlet_table()
    lone = pd.DataFrame({"outlet_id": ["o3"], "views": pd.array([40], dtype="Int64"),
                         "post_type": ["link"], "reactions": pd.array([600], dtype="Int64")})
    fit = fit_imputation(pd.concat([df, lone], ignore_index=True))
    assert fit.unidentifiable == ["o3"]
    assert fit.slope("o3") == pytest.approx(fit.pooled_slope)


def test_impute_clamps_rounds_and_flags():
    fit = fit_imputation(two_outlet_table())
    df = pd.DataFrame({"outlet_id": ["o1", "o1", "o2", "o9"],
                       "views": pd.array([0, 50, pd.NA, 10], dtype="Int64"),
                       "post_type": "link",
                       "reactions": pd.array([pd.NA, pd.NA, pd.NA, 4], dtype="Int64")})
    fit.intercept = -3.2 - fit.offsets["o1"]
    out = impute_reactions(df, fit)
    assert out.loc[0, "reactions"] == 0
    assert out.loc[1, "reactions"] == int(round_half_up(fit.predict(["o1"], [50], [False])[0]))
    assert out["imputed_flag"].tolist() == [True, True, False, False]
    assert out["unimputable"].tolist() == [False, False, True, False]
    assert out.loc[3, "reactions"] == 4


def test_impute_no_missing_is_identity():
    df = two_outlet_table()
    out = impute_reactions(df, fit_imputation(df))
    pd.testing.assert_series_equal(out["reactions"], df["reactions"])
    assert not out["imputed_flag"].any()


def test_round_half_up():
    np.testing.assert_array_equal(round_half_up([0.5, 1.5, 2.5, -0.5, 2.49]), [1, 2, 3, 0, 2])


def test_masking_experiment_correlation():
    from engshift.synthetic import PanelTruth, generate_panel
    truth = PanelTruth(missing_reactions=0.1, seed=3, views_noise_sd=300.0)
    panel = generate_panel(truth, 6)
    fit = fit_imputation(panel.posts)
    out = impute_reactions(panel.posts, fit)
    imputed = out.loc[panel.hidden_reactions.index, "reactions"].to_numpy(float)
    truth_vals = panel.hidden_reactions.to_numpy(float)
    assert np.corrcoef(imputed, truth_vals)[0, 1] > 0.8


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10_000), frac=st.floats(0.0, 0.6))
def test_property_imputation_preserves_observed(seed, frac):
    df = two_outlet_table(seed=seed, n=30)
    rng = np.random.default_rng(seed)
    mask = rng.random(len(df)) < frac
    df.loc[mask, "reactions"] = pd.NA
    if df["reactions"].notna().sum() < 6:
        return
    out = impute_reactions(df, fit_imputation(df))
    obs = ~mask
    assert (out.loc[obs, "reactions"] == df.loc[obs, "reactions"]).all()
    filled = out.loc[mask, "reactions"].to_numpy()
    assert (filled >= 0).all()
    assert out["reactions"].dtype == "Int64"
