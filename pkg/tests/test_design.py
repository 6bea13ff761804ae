import numpy as np
import pandas as pd
import patsy
import pytest

from engshift.design import (
    FormulaError,
    build_recipe,
    drop_aliased,
    group_codes,
    natural_sort,
    parse_formula,
    recipe_from_dict,
    recipe_to_dict,
)


def frame(n=60, seed=0):
    rng = np.random.default_rng(seed)
    return pd.DataFrame({
        "quality": pd.Categorical(rng.choice(["low", "medium", "high"], n), categories=["low", "medium", "high"]),
        "epoch": pd.Categorical(rng.choice(["0", "1", "2", "10"], n), categories=["0", "1", "2", "10"]),
        "outlet": rng.choice(["a", "b", "c"], n),
        "posts": rng.uniform(0.5, 3.0, n),
    })


def same_columns(A, B):
    # equal as multisets of columns
    key = lambda M: sorted(map(tuple, np.round(M.T, 12)))
    return A.shape == B.shape and key(A) == key(B)


def test_parse_structure():
    f = parse_formula("quality*epoch + (1|outlet) + (1|outlet:epoch) + (1+quality|year:month:day)")
    assert f.has_intercept
    assert len(f.terms) == 4
    assert [str(r) for r in f.random] == ["(1|outlet)", "(1|outlet:epoch)", "(1+quality|year:month:day)"]
    assert f.random[2].group == ("year", "month", "day")


def test_parse_intercept_removal_and_log():
    f = parse_formula("~ 0 + log(posts)")
    assert not f.has_intercept
    assert f.terms[0][0].label == "log(posts)"
    assert not parse_formula("quality - 1").has_intercept
    assert str(parse_formula("(0 + quality|outlet)").random[0]) == "(0+quality|outlet)"


@pytest.mark.parametrize("bad", ["quality + (1|(1|a))", "a + -b", "(1|)", "a + b$"])
def test_parse_errors(bad):
    with pytest.raises(FormulaError):
        parse_formula(bad)


@pytest.mark.parametrize("ours,theirs", [
    ("quality*epoch", "C(quality, levels=['low','medium','high'])*C(epoch, levels=['0','1','2','10'])"),
    ("quality + log(posts)", "C(quality, levels=['low','medium','high']) + np.log(posts)"),
    ("0 + quality", "0 + C(quality, levels=['low','medium','high'])"),
    ("quality:posts", "C(quality, levels=['low','medium','high']):posts"),
])
def test_design_matches_patsy(ours, theirs):
    df = frame()
    rec = build_recipe(parse_formula(ours).terms, df)
    X = rec.build(df)
    Y = np.asarray(patsy.dmatrix(theirs, df, eval_env=0))
    assert same_columns(X, Y)
    assert len(rec.names) == X.shape[1]


def test_level_order_is_natural_and_names():
    df = frame().assign(epoch=lambda d: d.epoch.astype(str))
    rec = build_recipe(parse_formula("epoch").terms, df)
    assert rec.names == ["(Intercept)", "epoch[1]", "epoch[2]", "epoch[10]"]
    assert natural_sort(["10", "2", "1"]) == ["1", "2", "10"]
    assert natural_sort(["b", "a"]) == ["a", "b"]


def test_recipe_round_trip_and_unseen_levels():
    df = frame()
    rec = build_recipe(parse_formula("quality*posts").terms, df)
    back = recipe_from_dict(recipe_to_dict(rec))
    np.testing.assert_array_equal(back.build(df), rec.build(df))
    new = df.head(3).assign(quality=pd.Categorical(["low", "low", "unknown"]))
    with pytest.raises(FormulaError, match="unseen"):
        rec.build(new)


def test_unknown_column_and_nonpositive_log():
    df = frame()
    with pytest.raises(FormulaError):
        build_recipe(parse_formula("nope").terms, df)
    rec = build_recipe(parse_formula("log(posts)").terms, df)
    with pytest.raises(FormulaError):
        rec.build(df.assign(posts=0.0))


def test_drop_aliased():
    x = np.arange(6.0)
    X = np.column_stack([np.ones(6), x, 2 * x, np.zeros(6)])
    with pytest.warns(UserWarning):
        Xk, keep, dropped = drop_aliased(X, ["a", "b", "c", "d"])
    assert Xk.shape[1] == 2 and len(dropped) == 2
    assert "d" in dropped
    assert np.linalg.matrix_rank(Xk) == 2


def test_group_codes():
    df = pd.DataFrame({"y": ["2016", "2016", "2017"], "d": ["1", "2", "1"]})
    codes, levels = group_codes(df, ("y", "d"))
    assert levels == ["2016:1", "2016:2", "2017:1"]
    assert codes.tolist() == [0, 1, 2]
    with pytest.raises(FormulaError):
        group_codes(df.head(1), ("y",))
    with pytest.raises(FormulaError, match="unseen"):
        group_codes(df, ("y",), levels=["2016"])
