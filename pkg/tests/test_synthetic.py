import numpy as np
import pandas as pd
import pytest

from engshift.ingestion import POST_COLUMNS
from engshift.synthetic import PanelTruth, generate_panel, generate_piecewise_signal


def small_truth(**kw):
    base = dict(groups=["low", "high", "non_news"], log_means=[[3.0, 3.5, 3.2], [3.4, 3.1, 3.2]],
                start="2016-01-04", end="2016-03-07", changepoints=["2016-02-01"], sd_outlet=0.5, seed=2)
    return PanelTruth(**{**base, **kw})


def test_panel_shape_and_determinism():
    a = generate_panel(small_truth(), 6)
    b = generate_panel(small_truth(), 6)
    pd.testing.assert_frame_equal(a.posts, b.posts)
    assert list(a.posts.columns) == POST_COLUMNS
    assert a.posts["post_id"].is_unique
    assert a.outlets["quality"].tolist() == ["low", "high", "non_news"] * 2
    assert set(a.outlets["sector"]) == {"news", "non_news"}
    ts = pd.DatetimeIndex(a.posts["published_at"])
    assert ts.min() >= pd.Timestamp("2016-01-04", tz="UTC")
    assert ts.max() < pd.Timestamp("2016-03-07", tz="UTC")


def test_outlet_streams_do_not_depend_on_panel_size():
    a = generate_panel(small_truth(), 4).posts
    b = generate_panel(small_truth(), 7).posts
    one = lambda p: p[p.outlet_id.str.endswith("2")].reset_index(drop=True)
    np.testing.assert_array_equal(one(a).reactions, one(b).reactions)


def test_cell_means_follow_truth():
    truth = small_truth(sd_outlet=0.0, posts_per_day=30.0, dispersion=0.5, did_effects={1: 0.4})
    panel = generate_panel(truth, 3)
    posts = panel.posts.merge(panel.outlets[["outlet_id", "quality"]], on="outlet_id")
    epoch = (pd.DatetimeIndex(posts.published_at) >= pd.Timestamp("2016-02-01", tz="UTC")).astype(int)
    means = posts.groupby([posts.quality, epoch])["reactions"].mean()
    for (g, e), m in means.items():
        assert np.log(float(m)) == pytest.approx(truth.cell_log_mean(e, g), abs=0.05)
    assert truth.cell_log_mean(1, "low") == pytest.approx(3.8)
    assert truth.cell_log_mean(1, "non_news") == pytest.approx(3.2)


def test_hidden_reactions():
    panel = generate_panel(small_truth(missing_reactions=0.2), 4)
    missing = panel.posts.reactions.isna()
    assert 0.1 < missing.mean() < 0.3
    assert panel.hidden_reactions.index.equals(panel.posts.index[missing])


def test_truth_validation_and_round_trip(tmp_path):
    with pytest.raises(ValueError):
        small_truth(log_means=[[1.0, 2.0, 3.0]])
    with pytest.raises(ValueError):
        small_truth(sd_day=-1.0)
    with pytest.raises(ValueError):
        generate_panel(small_truth(changepoints=["2016-01-04"], log_means=[[1, 1, 1], [1, 1, 1]]), 4)
    t = small_truth(did_effects={1: 0.2})
    assert PanelTruth.from_dict(t.to_dict()) == t


def test_piecewise_signal_levels_and_slopes():
    s = generate_piecewise_signal([20], [[0.0, 1.0], [2.0, -1.0]], noise_sd=0.0, w=40,
                                  slopes=[[0.1, 0.0], [0.0, 0.05]], outliers={30: 5.0})
    v = s[["log_rel_mean", "log_cv"]].to_numpy()
    assert v[19, 0] == pytest.approx(1.9)
    assert v[20, 0] == pytest.approx(2.0)
    assert v[25, 1] == pytest.approx(-0.75)
    # zero noise makes the outlier offset vanish as well
    assert v[30, 0] == pytest.approx(2.0)
    assert s["week_start"].iloc[1] - s["week_start"].iloc[0] == pd.Timedelta(days=7)


@pytest.mark.parametrize("cps", [[10, 15], [0], [5, 3]])
def test_piecewise_signal_rejects_bad_changepoints(cps):
    with pytest.raises(ValueError):
        generate_piecewise_signal(cps, np.zeros((len(cps) + 1, 2)), w=40)
