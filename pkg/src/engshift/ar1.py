"""Group-heteroscedastic regression with a shared AR(1) error process.

Each group ``g`` has its own series ``y_t = a_g + b_g x_t + e_t`` where the
errors follow a stationary AR(1) process with group-specific marginal
variance and one autoregressive coefficient ``phi_ar`` shared by all groups.
The likelihood is exact: the first error keeps its marginal distribution and
later ones are whitened as ``(e_t - phi e_{t-1}) / sqrt(1 - phi^2)``.

For a fixed ``phi_ar`` the group parameters have closed-form GLS solutions,
so ``phi_ar`` is found by a one-dimensional search over ``atanh(phi_ar)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy import optimize, stats


class Ar1Error(ValueError):
    pass


def whiten(e: np.ndarray, phi: float) -> np.ndarray:
    e = np.asarray(e, dtype=float)
    out = np.empty_like(e)
    out[0] = e[0]
    out[1:] = (e[1:] - phi * e[:-1]) / math.sqrt(1.0 - phi * phi)
    return out


def ar1_loglik(e: np.ndarray, phi: float, sigma2: float) -> float:
    """Exact Gaussian log-density of a stationary AR(1) series with marginal variance sigma2."""
    if not -1.0 < phi < 1.0:
        raise Ar1Error("phi_ar must lie in (-1, 1)")
    u = whiten(e, phi)
    n = u.size
    return (-0.5 * n * math.log(2 * math.pi * sigma2) - 0.5 * (u @ u) / sigma2
            - 0.5 * (n - 1) * math.log1p(-phi * phi))


def ar1_covariance(n: int, phi: float, sigma2: float) -> np.ndarray:
    lags = np.abs(np.subtract.outer(np.arange(n), np.arange(n)))
    return sigma2 * phi ** lags


@dataclass
class GroupSeries:
    group: str
    time: np.ndarray
    y: np.ndarray
    x: np.ndarray


@dataclass
class Ar1Fit:
    groups: list
    intercepts: dict
    slopes: dict
    slope_se: dict
    sigma2: dict
    phi_ar: float
    phi_ar_se: float
    loglik: float
    method: str
    vcov: dict
    identifiable: dict
    series: dict = field(repr=False, default_factory=dict)

    def coef_table(self) -> pd.DataFrame:
        rows = []
        for g in self.groups:
            se = self.slope_se[g]
            z = self.slopes[g] / se if se > 0 else np.nan
            rows.append({"group": g, "intercept": self.intercepts[g], "slope": self.slopes[g],
                         "slope_se": se, "z": z, "p": 2 * stats.norm.sf(abs(z)),
                         "sigma2": self.sigma2[g], "identifiable": self.identifiable[g]})
        return pd.DataFrame(rows).set_index("group")

    def to_dict(self) -> dict:
        return {
            "format": "engshift.ar1_fit", "version": 1,
            "groups": list(self.groups),
            "intercepts": self.intercepts, "slopes": self.slopes, "slope_se": self.slope_se,
            "sigma2": self.sigma2, "phi_ar": self.phi_ar, "phi_ar_se": self.phi_ar_se,
            "loglik": self.loglik, "method": self.method, "identifiable": self.identifiable,
            "vcov": {g: np.asarray(v).tolist() for g, v in self.vcov.items()},
        }


def _design(s: GroupSeries) -> np.ndarray:
    return np.column_stack([np.ones_like(s.x), s.x])


def _gls(s: GroupSeries, phi: float, reml: bool = False):
    X = _design(s)
    if np.ptp(s.x) == 0:
        X = X[:, :1]
    Xw = np.column_stack([whiten(X[:, j], phi) for j in range(X.shape[1])])
    yw = whiten(s.y, phi)
    coef, *_ = np.linalg.lstsq(Xw, yw, rcond=None)
    resid = yw - Xw @ coef
    dof = s.y.size - (Xw.shape[1] if reml else 0)
    # an exact fit leaves no residual variance; keep the profile finite
    sigma2 = max(float(resid @ resid) / dof, np.finfo(float).tiny)
    return coef, sigma2, Xw


def _profile(series: list, phi: float, reml: bool = False) -> float:
    """Log-likelihood (or restricted log-likelihood) with group parameters profiled out."""
    total = 0.0
    for s in series:
        coef, sigma2, Xw = _gls(s, phi, reml)
        n = s.y.size - (Xw.shape[1] if reml else 0)
        total += (-0.5 * n * (math.log(2 * math.pi * sigma2) + 1.0)
                  - 0.5 * (s.y.size - 1) * math.log1p(-phi * phi))
        if reml:
            total -= 0.5 * np.linalg.slogdet(Xw.T @ Xw)[1]
    return total


def _validate(data: pd.DataFrame, group: str, time: str, y: str, x: str) -> list:
    series = []
    for g, sub in data.groupby(group, sort=True):
        sub = sub.sort_values(time)
        t = sub[time].to_numpy()
        if t.size < 10:
            raise Ar1Error(f"group {g!r} has fewer than 10 time points")
        if np.any(t != np.round(t)) or np.any(np.diff(t) != 1):
            raise Ar1Error(f"group {g!r} has gaps or a non-integer time index")
        yy, xx = sub[y].to_numpy(float), sub[x].to_numpy(float)
        if not (np.all(np.isfinite(yy)) and np.all(np.isfinite(xx))):
            raise Ar1Error(f"non-finite values in group {g!r}")
        series.append(GroupSeries(str(g), t.astype(int), yy, xx))
    if not series:
        raise Ar1Error("no data")
    return series


def fit_ar1_gaussian(data: pd.DataFrame, group: str = "group", time: str = "week",
                     y: str = "log_reactions", x: str = "log_posts", method: str = "ml") -> Ar1Fit:
    """Fit per-group slopes with shared AR(1) errors.

    ``method="ml"`` maximizes the exact likelihood; ``"reml"`` maximizes the
    restricted likelihood, which removes most of the downward bias of
    ``phi_ar`` that per-group intercepts cause near the unit root.
    """
    if method not in ("ml", "reml"):
        raise ValueError("method must be 'ml' or 'reml'")
    reml = method == "reml"
    series = _validate(data, group, time, y, x)
    identifiable = {s.group: bool(np.ptp(s.x) > 0) for s in series}

    def neg(z):
        return -_profile(series, math.tanh(z), reml)

    # coarse grid guards against the profile's flat tails near |phi| = 1
    grid = np.linspace(-4.0, 4.0, 81)
    vals = [neg(z) for z in grid]
    j = int(np.argmin(vals))
    lo, hi = grid[max(j - 1, 0)], grid[min(j + 1, grid.size - 1)]
    res = optimize.minimize_scalar(neg, bounds=(lo, hi), method="bounded",
                                   options={"xatol": 1e-10})
    z = float(res.x)
    phi = math.tanh(z)

    h = 1e-4
    curv = (neg(z + h) - 2 * neg(z) + neg(z - h)) / h**2
    z_se = 1.0 / math.sqrt(curv) if curv > 0 else float("nan")
    phi_se = (1 - phi * phi) * z_se

    intercepts, slopes, slope_se, sigma2, vcov = {}, {}, {}, {}, {}
    for s in series:
        coef, s2, Xw = _gls(s, phi, reml)
        if identifiable[s.group]:
            cov = s2 * np.linalg.inv(Xw.T @ Xw)
        else:
            cov = np.full((2, 2), np.nan)
        intercepts[s.group] = float(coef[0])
        slopes[s.group] = float(coef[1]) if identifiable[s.group] else float("nan")
        slope_se[s.group] = float(math.sqrt(cov[1, 1])) if identifiable[s.group] else float("nan")
        sigma2[s.group] = s2
        vcov[s.group] = cov
    return Ar1Fit(
        groups=[s.group for s in series], intercepts=intercepts, slopes=slopes,
        slope_se=slope_se, sigma2=sigma2, phi_ar=phi, phi_ar_se=phi_se,
        loglik=-float(res.fun), method=method, vcov=vcov, identifiable=identifiable,
        series={s.group: s for s in series})


def adjusted_correlation(fit: Ar1Fit, group: str):
    """Slope rescaled to a correlation by the group's response/predictor spread; returns (r, p)."""
    if group not in fit.series:
        raise KeyError(f"unknown group {group!r}")
    s = fit.series[group]
    vx, vy = np.var(s.x, ddof=1), np.var(s.y, ddof=1)
    if not fit.identifiable[group] or vx <= 0:
        raise Ar1Error(f"predictor has zero variance in group {group!r}")
    if vy <= 0:
        raise Ar1Error(f"response has zero variance in group {group!r}")
    r = fit.slopes[group] * math.sqrt(vx / vy)
    se = fit.slope_se[group]
    if se > 0:
        p = 2 * stats.norm.sf(abs(fit.slopes[group]) / se)
    else:
        # exact fit: the slope is known without error
        p = 1.0 if fit.slopes[group] == 0 else 0.0
    return float(r), float(p)


def sample_acf(x: np.ndarray, max_lag: int) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if max_lag >= x.size:
        raise ValueError("max_lag must be smaller than the series length")
    d = x - x.mean()
    denom = d @ d
    return np.array([1.0] + [(d[k:] @ d[:-k]) / denom for k in range(1, max_lag + 1)])


def residual_acf(fit: Ar1Fit, max_lag: int, group: str | None = None, whitened: bool = True) -> np.ndarray:
    """Autocorrelations (lags 0..max_lag) of a group's residuals, whitened by default."""
    g = group if group is not None else fit.groups[0]
    s = fit.series[g]
    e = s.y - fit.intercepts[g] - np.nan_to_num(fit.slopes[g]) * s.x
    if whitened:
        e = whiten(e, fit.phi_ar)
    return sample_acf(e, max_lag)
