"""Formula mini-language and design matrices for mixed models.

Grammar (whitespace-insensitive)::

    formula  := term ('+' term)*
    term     := '(' effects '|' group ')' | product | '1' | '0' | '-1'
    product  := atom (('*' | ':') atom)*
    atom     := name | 'log(' name ')'
    group    := name (':' name)*

``a*b`` expands to ``a + b + a:b``.  Columns of string, boolean or categorical
dtype are factors (treatment coding, reference = first level); numeric
columns are continuous.  A factor gets full dummy coding inside a term only
when the term obtained by removing it is absent from the model, which
reproduces the usual full-rank coding of R model formulas.

Example: ``quality*epoch + (1|outlet) + (1|outlet:epoch) + (1+quality|year:month:day)``.
"""

from __future__ import annotations

import re
import warnings
from dataclasses import dataclass, field
from itertools import combinations

import numpy as np
import pandas as pd
from scipy.linalg import qr


class FormulaError(ValueError):
    pass


@dataclass(frozen=True)
class Variable:
    name: str
    transform: str | None = None

    @property
    def label(self) -> str:
        return f"{self.transform}({self.name})" if self.transform else self.name


Term = tuple  # tuple[Variable, ...]; the empty tuple is the intercept


@dataclass
class RandomTerm:
    terms: list          # list[Term], may include () for the intercept
    group: tuple         # grouping column names

    @property
    def group_label(self) -> str:
        return ":".join(self.group)

    def expr_label(self) -> str:
        parts = ["1" if not t else ":".join(v.label for v in t) for t in self.terms]
        if () not in self.terms:
            parts.insert(0, "0")
        return "+".join(parts)

    def __str__(self) -> str:
        return f"({self.expr_label()}|{self.group_label})"


@dataclass
class Formula:
    terms: list = field(default_factory=list)        # fixed terms, () = intercept
    random: list = field(default_factory=list)       # list[RandomTerm]
    text: str = ""

    @property
    def has_intercept(self) -> bool:
        return () in self.terms

    def __str__(self) -> str:
        return self.text


_NAME = re.compile(r"^[A-Za-z_][\w.]*$")
_ATOM = re.compile(r"^(?:(log)\(\s*([A-Za-z_][\w.]*)\s*\)|([A-Za-z_][\w.]*))$")


def _split_top(text: str, sep: str) -> list[str]:
    out, depth, cur = [], 0, []
    for ch in text:
        if ch == "(":
            depth += 1
        elif ch == ")":
            depth -= 1
        if ch == sep and depth == 0:
            out.append("".join(cur))
            cur = []
        else:
            cur.append(ch)
    out.append("".join(cur))
    return [s.strip() for s in out]


def _parse_atom(text: str) -> Variable:
    m = _ATOM.match(text.strip())
    if not m:
        raise FormulaError(f"cannot parse term component {text!r}")
    if m.group(1):
        return Variable(m.group(2), m.group(1))
    return Variable(m.group(3))


def _expand_product(text: str) -> list:
    """Expand ``a*b:c`` into the list of terms it denotes."""
    factors = []
    for chunk in _split_top(text, "*"):
        factors.append(tuple(_parse_atom(a) for a in _split_top(chunk, ":")))
    terms = []
    for k in range(1, len(factors) + 1):
        for combo in combinations(factors, k):
            merged = []
            for part in combo:
                for v in part:
                    if v not in merged:
                        merged.append(v)
            terms.append(tuple(merged))
    return terms


def _parse_terms(text: str, allow_random: bool):
    terms: list = [()]
    random: list = []
    text = text.strip()
    if not text:
        return terms, random
    pieces = []
    # "a - 1" style intercept removal
    for piece in _split_top(text.replace("-", "+-"), "+"):
        if piece:
            pieces.append(re.sub(r"^-\s+", "-", piece))
    for piece in pieces:
        if piece in ("0", "-1"):
            if () in terms:
                terms.remove(())
            continue
        if piece == "1":
            if () not in terms:
                terms.insert(0, ())
            continue
        if piece.startswith("(") and piece.endswith(")") and "|" in piece:
            if not allow_random:
                raise FormulaError("nested random-effect terms are not allowed")
            inner = piece[1:-1]
            lhs, _, rhs = inner.partition("|")
            sub_terms, _ = _parse_terms(lhs, allow_random=False)
            group = tuple(g.strip() for g in rhs.split(":"))
            if not all(_NAME.match(g) for g in group):
                raise FormulaError(f"invalid grouping factor in {piece!r}")
            random.append(RandomTerm(sub_terms, group))
            continue
        if piece.startswith("-"):
            raise FormulaError(f"term removal is only supported for the intercept: {piece!r}")
        for t in _expand_product(piece):
            if t not in terms:
                terms.append(t)
    return terms, random


def parse_formula(text: str) -> Formula:
    """Parse a model formula (right-hand side only; a leading ``~`` is ignored)."""
    body = text.split("~", 1)[1] if "~" in text else text
    terms, random = _parse_terms(body, allow_random=True)
    return Formula(terms=terms, random=random, text=text.strip())


# ---------------------------------------------------------------- encoding

def is_factor(series: pd.Series) -> bool:
    return not pd.api.types.is_numeric_dtype(series) or pd.api.types.is_bool_dtype(series)


def factor_levels(series: pd.Series) -> list:
    if isinstance(series.dtype, pd.CategoricalDtype):
        return [str(c) for c in series.cat.categories]
    return natural_sort({str(v) for v in series.dropna().unique()})


def natural_sort(values) -> list:
    """Sort labels numerically when they all look like numbers."""
    values = list(values)
    try:
        return sorted(values, key=float)
    except ValueError:
        return sorted(values)


def _continuous(data: pd.DataFrame, var: Variable) -> np.ndarray:
    x = data[var.name].to_numpy(dtype=float)
    if var.transform == "log":
        if np.any(x <= 0):
            raise FormulaError(f"log of nonpositive values in {var.name!r}")
        x = np.log(x)
    return x


@dataclass
class _Component:
    name: str
    kind: str               # "factor" | "continuous"
    transform: str | None
    level: str | None = None


@dataclass
class DesignRecipe:
    """Column recipes able to rebuild a design matrix on new data."""

    columns: list                                  # list[list[_Component]]
    names: list
    factor_levels: dict = field(default_factory=dict)

    def build(self, data: pd.DataFrame) -> np.ndarray:
        n = len(data)
        X = np.ones((n, len(self.columns)))
        cache: dict = {}
        for j, comps in enumerate(self.columns):
            for c in comps:
                if c.kind == "continuous":
                    key = (c.name, c.transform)
                    if key not in cache:
                        cache[key] = _continuous(data, Variable(c.name, c.transform))
                    X[:, j] *= cache[key]
                else:
                    key = (c.name, None, "str")
                    if key not in cache:
                        col = data[c.name].astype(str).to_numpy()
                        known = set(self.factor_levels[c.name])
                        unseen = sorted(set(col) - known)
                        if unseen:
                            raise FormulaError(
                                f"unseen level(s) {unseen} of factor {c.name!r}")
                        cache[key] = col
                    X[:, j] *= cache[key] == c.level
        return X


def recipe_to_dict(recipe: DesignRecipe) -> dict:
    return {
        "names": list(recipe.names),
        "factor_levels": {k: list(v) for k, v in recipe.factor_levels.items()},
        "columns": [[{"name": c.name, "kind": c.kind, "transform": c.transform, "level": c.level}
                     for c in comps] for comps in recipe.columns],
    }


def recipe_from_dict(d: dict) -> DesignRecipe:
    cols = [[_Component(c["name"], c["kind"], c["transform"], level=c["level"]) for c in comps]
            for comps in d["columns"]]
    return DesignRecipe(cols, list(d["names"]), {k: list(v) for k, v in d["factor_levels"].items()})


def subset_recipe(recipe: DesignRecipe, keep: list) -> DesignRecipe:
    return DesignRecipe([recipe.columns[j] for j in keep], [recipe.names[j] for j in keep],
                        dict(recipe.factor_levels))


def _term_columns(term: Term, model_terms: list, data: pd.DataFrame, levels: dict):
    """Return (names, component lists) for one fixed term."""
    cols: list = [[]]
    names: list = [[]]
    present = [set(t) for t in model_terms]
    for var in term:
        if var.name not in data.columns:
            raise FormulaError(f"unknown column {var.name!r}")
        if var.transform is None and is_factor(data[var.name]):
            lv = levels.setdefault(var.name, factor_levels(data[var.name]))
            reduced = set(term) - {var}
            full = reduced not in present
            use = lv if full else lv[1:]
            new_cols, new_names = [], []
            for base_c, base_n in zip(cols, names):
                for level in use:
                    new_cols.append(base_c + [_Component(var.name, "factor", None, level=level)])
                    new_names.append(base_n + [f"{var.name}[{level}]"])
            cols, names = new_cols, new_names
        else:
            for base_c, base_n in zip(cols, names):
                base_c.append(_Component(var.name, "continuous", var.transform))
                base_n.append(var.label)
    return [":".join(n) if n else "(Intercept)" for n in names], cols


def build_recipe(terms: list, data: pd.DataFrame, levels: dict | None = None) -> DesignRecipe:
    levels = {} if levels is None else levels
    all_cols, all_names = [], []
    ordered = sorted(terms, key=len)
    for term in ordered:
        names, cols = _term_columns(term, terms, data, levels)
        all_cols.extend(cols)
        all_names.extend(names)
    return DesignRecipe(all_cols, all_names, dict(levels))


def drop_aliased(X: np.ndarray, names: list, tol: float = 1e-9, label: str = "fixed effects"):
    """Drop linearly dependent columns; returns (X, kept_indices, dropped_names)."""
    if X.shape[1] == 0:
        return X, [], []
    norms = np.linalg.norm(X, axis=0)
    zero = norms == 0
    scale = np.where(zero, 1.0, norms)
    _, R, piv = qr(X / scale, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    rank = int(np.sum(diag > tol * max(diag[0], 1.0))) if diag.size else 0
    keep = sorted(int(j) for j in piv[:rank] if not zero[j])
    dropped = [names[j] for j in range(len(names)) if j not in keep]
    if dropped:
        warnings.warn(f"dropping aliased {label} columns: {dropped}", stacklevel=3)
    return X[:, keep], keep, dropped


# ------------------------------------------------------------- random terms

def group_codes(data: pd.DataFrame, group: tuple, levels: list | None = None):
    """Integer codes of a (possibly interacted) grouping factor."""
    for g in group:
        if g not in data.columns:
            raise FormulaError(f"unknown grouping column {g!r}")
    key = data[list(group)].astype(str).agg(":".join, axis=1).to_numpy() \
        if len(group) > 1 else data[group[0]].astype(str).to_numpy()
    if levels is None:
        levels = natural_sort(set(key))
        if len(levels) < 2:
            raise FormulaError(f"grouping factor {':'.join(group)!r} needs at least 2 levels")
    index = {lv: i for i, lv in enumerate(levels)}
    try:
        codes = np.fromiter((index[k] for k in key), dtype=np.int64, count=len(key))
    except KeyError as exc:
        raise FormulaError(
            f"unseen level {exc.args[0]!r} of grouping factor {':'.join(group)!r}") from None
    return codes, list(levels)
