"""Negative binomial mixed models fitted by Laplace-approximated maximum likelihood.

The model has two linear predictors per observation, the log mean ``eta`` and
the log dispersion ``zeta``; each has fixed effects and any number of
Gaussian random-effect terms ``(expr | group)``.  Random effects are written
as ``u = L b`` with ``b ~ N(0, I)`` and ``L`` the lower Cholesky factor of the
term's covariance, so the conditional modes are found in ``b``-space where the
penalized Hessian ``H = A' W A + I`` is always well scaled, including at the
variance boundary.

Linear algebra exploits one structural fact: all random effects belonging to
the grouping factor with the most levels form a block-diagonal part of ``H``
(one observation touches a single level).  That part is eliminated block by
block and only the Schur complement of the remaining, smaller terms is
factorized densely.  The same partition gives the entries of ``H^-1`` needed
by the analytic gradient of the Laplace objective.
"""

from __future__ import annotations

import json
import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy import linalg, optimize, stats

from .design import (
    DesignRecipe,
    FormulaError,
    build_recipe,
    drop_aliased,
    group_codes,
    parse_formula,
    recipe_from_dict,
    recipe_to_dict,
    subset_recipe,
)
from .nb import Parametrization, loglik_derivatives, loglik_terms, variance

log = logging.getLogger(__name__)

FIT_FORMAT_VERSION = 1
ROWS = ("mean", "disp")
# ways a trial parameter value far from the optimum can break an evaluation
NUMERIC_FAILURES = (ValueError, ZeroDivisionError, FloatingPointError, np.linalg.LinAlgError, linalg.LinAlgError)


@dataclass
class FormulaSpec:
    mean: str
    dispersion: str = "1"
    parametrization: Parametrization = Parametrization.NB1

    def __post_init__(self):
        self.parametrization = Parametrization.parse(self.parametrization)
        if not parse_formula(self.mean).has_intercept:
            raise FormulaError("the mean model needs an intercept")


@dataclass
class FitOptions:
    max_outer: int = 500
    max_inner: int = 50
    gtol: float = 1e-5
    ftol: float = 1e-12         # relative; objectives are O(n), so looser values stop L-BFGS early
    inner_tol: float = 1e-8
    re_sd_start: float = 0.5
    log_sd_bounds: tuple = (-12.0, 4.0)
    boundary_sd: float = 1e-3
    compute_vcov: bool = True
    polish_steps: int = 3
    step_tol: float = 2e-3      # max |H^-1 g| accepted when the raw gradient test fails


class ConvergenceWarning(UserWarning):
    pass


# --------------------------------------------------------------- structure

@dataclass
class ReBlock:
    name: str
    row: int                 # 0 = mean, 1 = dispersion
    group: tuple
    levels: list
    codes: np.ndarray
    Z: np.ndarray            # (n, k)
    recipe: DesignRecipe

    @property
    def k(self) -> int:
        return self.Z.shape[1]

    @property
    def n_levels(self) -> int:
        return len(self.levels)

    @property
    def n_theta(self) -> int:
        return self.k * (self.k + 1) // 2


def _theta_index(k: int):
    """(row, col) of each Cholesky parameter, diagonal entries on log scale."""
    return [(r, c) for r in range(k) for c in range(r + 1)]


def theta_to_L(theta: np.ndarray, k: int) -> np.ndarray:
    L = np.zeros((k, k))
    for t, (r, c) in zip(theta, _theta_index(k)):
        L[r, c] = math.exp(t) if r == c else t
    return L


def L_to_theta(L: np.ndarray) -> np.ndarray:
    k = L.shape[0]
    return np.array([math.log(L[r, c]) if r == c else L[r, c] for r, c in _theta_index(k)])


class LaplaceModel:
    """Laplace-approximated negative log marginal likelihood and its gradient.

    Parameters are packed as ``[beta_mean, beta_disp, theta_1, ..., theta_T]``.
    """

    def __init__(self, y, X_mean, X_disp, blocks, parametrization, max_inner=50, inner_tol=1e-8):
        self.y = np.asarray(y, dtype=float)
        self.n = self.y.shape[0]
        self.X = (np.asarray(X_mean, float), np.asarray(X_disp, float))
        self.blocks = list(blocks)
        self.par = Parametrization.parse(parametrization)
        self.max_inner = max_inner
        self.inner_tol = inner_tol
        self.p_mean = self.X[0].shape[1]
        self.p_disp = self.X[1].shape[1]
        self.n_params = self.p_mean + self.p_disp + sum(b.n_theta for b in self.blocks)
        self._layout()
        self.b = np.zeros(self.q)
        self.indefinite = False

    # ---- layout of b and of the per-observation local columns
    def _layout(self):
        blocks = self.blocks
        if blocks:
            by_group: dict = {}
            for i, blk in enumerate(blocks):
                by_group.setdefault(blk.group, []).append(i)
            d_group = max(by_group, key=lambda g: blocks[by_group[g][0]].n_levels)
            self.d_blocks = by_group[d_group]
        else:
            self.d_blocks = []
        self.r_blocks = [i for i in range(len(blocks)) if i not in self.d_blocks]
        self.kD = sum(blocks[i].k for i in self.d_blocks)
        self.nD = blocks[self.d_blocks[0]].n_levels if self.d_blocks else 0
        self.qD = self.nD * self.kD
        self.offsets = {}
        off = 0
        for i in self.d_blocks:
            self.offsets[i] = off
            off += blocks[i].k
        self.bases = {}
        base = self.qD
        for i in self.r_blocks:
            self.bases[i] = base
            base += blocks[i].n_levels * blocks[i].k
        self.q = base
        self.qR = self.q - self.qD

        n = self.n
        # local columns: D part first then R blocks in order
        self.m = self.kD + sum(blocks[i].k for i in self.r_blocks)
        self.local_slices = {}
        J = np.zeros((n, self.m), dtype=np.int64)
        pos = 0
        if self.d_blocks:
            codesD = blocks[self.d_blocks[0]].codes
            self.codesD = codesD
            for i in self.d_blocks:
                k = blocks[i].k
                J[:, pos:pos + k] = codesD[:, None] * self.kD + self.offsets[i] + np.arange(k)
                self.local_slices[i] = slice(pos, pos + k)
                pos += k
        for i in self.r_blocks:
            k = blocks[i].k
            J[:, pos:pos + k] = self.bases[i] + blocks[i].codes[:, None] * k + np.arange(k)
            self.local_slices[i] = slice(pos, pos + k)
            pos += k
        self.J = J
        self.JR = J[:, self.kD:] - self.qD   # R columns relative to the R part

    # ---- parameters
    def split(self, params):
        params = np.asarray(params, dtype=float)
        beta = params[:self.p_mean]
        beta_d = params[self.p_mean:self.p_mean + self.p_disp]
        thetas, pos = [], self.p_mean + self.p_disp
        for blk in self.blocks:
            thetas.append(params[pos:pos + blk.n_theta])
            pos += blk.n_theta
        return beta, beta_d, thetas

    def theta_slices(self):
        out, pos = [], self.p_mean + self.p_disp
        for blk in self.blocks:
            out.append(slice(pos, pos + blk.n_theta))
            pos += blk.n_theta
        return out

    def _prepare(self, params):
        beta, beta_d, thetas = self.split(params)
        Ls = [theta_to_L(t, blk.k) for t, blk in zip(thetas, self.blocks)]
        fixed = np.column_stack([self.X[0] @ beta, self.X[1] @ beta_d])
        # local A: (n, 2, m)
        A = np.zeros((self.n, 2, self.m))
        for i, (blk, L) in enumerate(zip(self.blocks, Ls)):
            A[:, blk.row, self.local_slices[i]] = blk.Z @ L
        return fixed, Ls, A

    def _b_blocks(self, b):
        """Per-block (n_levels, k) views of a vector in b-space."""
        out = []
        for i, blk in enumerate(self.blocks):
            if i in self.offsets:
                bD = b[:self.qD].reshape(self.nD, self.kD)
                out.append(bD[:, self.offsets[i]:self.offsets[i] + blk.k])
            else:
                out.append(b[self.bases[i]:self.bases[i] + blk.n_levels * blk.k].reshape(blk.n_levels, blk.k))
        return out

    def _linpred(self, fixed, A, b):
        if self.q == 0:
            return fixed.copy()
        return fixed + (A @ b[self.J][:, :, None])[:, :, 0]

    def _At(self, A, x):
        """A' x for x of shape (n, 2)."""
        out = np.zeros(self.q)
        if self.q == 0:
            return out
        contrib = np.einsum("nam,na->nm", A, x)
        out += np.bincount(self.J.ravel(), weights=contrib.ravel(), minlength=self.q)
        return out

    # ---- Hessian assembly and factorization
    def _factor(self, A, W):
        n, kD, qR = self.n, self.kD, self.qR
        At = A.transpose(0, 2, 1)
        loc = At @ W @ A                               # (n, m, m)
        fac = {}
        if kD:
            HD = np.zeros((self.nD, kD, kD))
            flat = loc[:, :kD, :kD].reshape(n, kD * kD)
            for j in range(kD * kD):
                HD.reshape(self.nD, kD * kD)[:, j] = np.bincount(self.codesD, weights=flat[:, j], minlength=self.nD)
            HD += np.eye(kD)
            chol = np.linalg.cholesky(HD)
            eye = np.broadcast_to(np.eye(kD), HD.shape)
            HD_inv = np.linalg.solve(HD, eye)
            fac["HD_inv"] = HD_inv
            fac["logdet"] = 2.0 * np.log(np.diagonal(chol, axis1=1, axis2=2)).sum()
        else:
            fac["logdet"] = 0.0
        if qR:
            JR = self.JR
            RR = loc[:, kD:, kD:]
            idx = (JR[:, :, None] * qR + JR[:, None, :]).ravel()
            HR = np.bincount(idx, weights=RR.ravel(), minlength=qR * qR).reshape(qR, qR)
            HR += np.eye(qR)
            if kD:
                DR = loc[:, :kD, kD:]
                rows = self.codesD[:, None, None] * kD + np.arange(kD)[None, :, None]
                idx = (rows * qR + JR[:, None, :]).ravel()
                HDR = np.bincount(idx, weights=DR.ravel(), minlength=self.qD * qR).reshape(self.nD, kD, qR)
                G = fac["HD_inv"] @ HDR
                S = HR - HDR.reshape(-1, qR).T @ G.reshape(-1, qR)
                fac["G"] = G
            else:
                S = HR
            S = 0.5 * (S + S.T)
            cf = linalg.cho_factor(S, lower=True)
            fac["S"] = cf
            fac["logdet"] += 2.0 * np.log(np.diag(cf[0])).sum()
        return fac

    def _solve(self, fac, r):
        x = np.empty_like(r)
        kD, qD = self.kD, self.qD
        rD = r[:qD].reshape(self.nD, kD) if kD else None
        if self.qR:
            rR = r[qD:].copy()
            if kD:
                rR -= fac["G"].reshape(-1, self.qR).T @ rD.ravel()
            xR = linalg.cho_solve(fac["S"], rR)
            x[qD:] = xR
            if kD:
                xD = (fac["HD_inv"] @ rD[:, :, None])[:, :, 0] - fac["G"] @ xR
                x[:qD] = xD.ravel()
        elif kD:
            x[:qD] = (fac["HD_inv"] @ rD[:, :, None]).ravel()
        return x

    def _selected_inverse(self, fac):
        """Entries of H^-1 on each observation's local columns, shape (n, m, m)."""
        n, m, kD, qR = self.n, self.m, self.kD, self.qR
        out = np.empty((n, m, m))
        if qR:
            S_inv = linalg.cho_solve(fac["S"], np.eye(qR))
            JR = self.JR
            out[:, kD:, kD:] = S_inv[JR[:, :, None], JR[:, None, :]]
        if kD:
            blocks = fac["HD_inv"]
            if qR:
                GS = fac["G"] @ S_inv
                blocks = blocks + GS @ fac["G"].transpose(0, 2, 1)
                sel = -GS[self.codesD[:, None, None], np.arange(kD)[None, :, None], JR[:, None, :]]
                out[:, :kD, kD:] = sel
                out[:, kD:, :kD] = np.transpose(sel, (0, 2, 1))
            out[:, :kD, :kD] = blocks[self.codesD]
        return out

    @staticmethod
    def _clip_psd(W):
        vals, vecs = np.linalg.eigh(W)
        vals = np.clip(vals, 0.0, None)
        return (vecs * vals[:, None, :]) @ vecs.transpose(0, 2, 1)

    def _factor_safe(self, A, W):
        try:
            return self._factor(A, W), False
        except (np.linalg.LinAlgError, linalg.LinAlgError):
            return self._factor(A, self._clip_psd(W)), True

    # ---- inner problem
    def _inner_f(self, fixed, A, b):
        s = self._linpred(fixed, A, b)
        return -loglik_terms(self.y, s[:, 0], s[:, 1], self.par).sum() + 0.5 * b @ b

    def find_mode(self, params, b0=None):
        fixed, Ls, A = self._prepare(params)
        b = (self.b if b0 is None else b0).copy()
        if self.q == 0:
            return fixed, Ls, A, b, True
        try:
            b, converged = self._newton_mode(fixed, A, b)
        except NUMERIC_FAILURES:
            if not np.any(b):
                raise
            # a warm start from a distant parameter value can overflow; restart cold
            b, converged = self._newton_mode(fixed, A, np.zeros_like(b))
        return fixed, Ls, A, b, converged

    def _newton_mode(self, fixed, A, b):
        converged = False
        for _ in range(self.max_inner):
            s = self._linpred(fixed, A, b)
            ll, g, hs, _ = loglik_derivatives(self.y, s[:, 0], s[:, 1], self.par, order=2)
            f = -ll.sum() + 0.5 * b @ b
            grad = self._At(A, -g) + b
            fac, _ = self._factor_safe(A, -hs)
            delta = -self._solve(fac, grad)
            slope = grad @ delta
            if slope >= 0:
                delta, slope = -grad, -(grad @ grad)
            elif -slope < self.inner_tol:
                # Newton decrement below tolerance: the full step is safe and
                # leaves only a quadratically small error in the mode
                b = b + delta
                converged = True
                break
            step = 1.0
            for _ in range(40):
                b_new = b + step * delta
                f_new = self._inner_f(fixed, A, b_new)
                if np.isfinite(f_new) and f_new <= f + 1e-4 * step * slope:
                    break
                step *= 0.5
            else:
                break
            if np.max(np.abs(step * delta)) < 1e-13:
                b = b_new
                converged = True
                break
            b = b_new
        if not np.all(np.isfinite(b)):
            raise ValueError("conditional mode is not finite")
        return b, converged

    # ---- objective and gradient
    def evaluate(self, params, gradient=True, b0=None):
        """Return (objective, gradient or None); updates the warm-start mode."""
        fixed, Ls, A, b, inner_ok = self.find_mode(params, b0)
        self.b = b
        self.inner_converged = inner_ok
        s = self._linpred(fixed, A, b)
        order = 3 if gradient else 2
        ll, g, hs, t = loglik_derivatives(self.y, s[:, 0], s[:, 1], self.par, order=order)
        W = -hs
        if self.q:
            fac, self.indefinite = self._factor_safe(A, W)
            logdet = fac["logdet"]
        else:
            fac, logdet = None, 0.0
        obj = -ll.sum() + 0.5 * b @ b + 0.5 * logdet
        if not gradient:
            return obj, None
        gl = -g
        T = -t
        beta_grad_rows = gl.copy()
        grad = np.zeros(self.n_params)
        if self.q:
            Hinv = self._selected_inverse(fac)
            AH = A @ Hinv                                   # rows of A H^-1 (local)
            C = AH @ A.transpose(0, 2, 1)
            h = 0.5 * (C.reshape(-1, 1, 4) @ T.reshape(-1, 4, 2))[:, 0, :]
            v = self._solve(fac, self._At(A, h))
            Av = (A @ v[self.J][:, :, None])[:, :, 0]
            WAv = (W @ Av[:, :, None])[:, :, 0]
            beta_grad_rows = gl + h - WAv
            # U_i = H^-1_loc A_i' W_i, shape (n, m, 2)
            U = AH.transpose(0, 2, 1) @ W
            b_blk = self._b_blocks(b)
            v_blk = self._b_blocks(v)
            for i, (blk, L, sl) in enumerate(zip(self.blocks, Ls, self.theta_slices())):
                a = blk.row
                codes, k, nl = blk.codes, blk.k, blk.n_levels
                Zg = _scatter(blk.Z * gl[:, a:a + 1], codes, nl)
                Zh = _scatter(blk.Z * h[:, a:a + 1], codes, nl)
                Zw = _scatter(blk.Z * WAv[:, a:a + 1], codes, nl)
                Q = (Zg.T @ b_blk[i] + Zh.T @ b_blk[i]
                     - Zg.T @ v_blk[i] - Zw.T @ b_blk[i])
                Q += blk.Z.T @ U[:, self.local_slices[i], a]
                for j, (r, c) in enumerate(_theta_index(k)):
                    dL = L[r, c] if r == c else 1.0
                    grad[sl.start + j] = dL * Q[r, c]
        grad[:self.p_mean] = self.X[0].T @ beta_grad_rows[:, 0]
        grad[self.p_mean:self.p_mean + self.p_disp] = self.X[1].T @ beta_grad_rows[:, 1]
        return obj, grad

    def objective(self, params):
        return self.evaluate(params, gradient=False)[0]

    def gradient(self, params):
        return self.evaluate(params, gradient=True)[1]

    def conditional_modes(self, params, b=None):
        """Random effects ``u = L b`` per block at the current (or given) mode."""
        _, _, thetas = self.split(params)
        b = self.b if b is None else b
        out = []
        for blk, th, bb in zip(self.blocks, thetas, self._b_blocks(b)):
            L = theta_to_L(th, blk.k)
            out.append(bb @ L.T)
        return out


def _scatter(values, codes, n_levels):
    """Sum rows of ``values`` (n, k) by level code -> (n_levels, k)."""
    k = values.shape[1]
    out = np.empty((n_levels, k))
    for j in range(k):
        out[:, j] = np.bincount(codes, weights=values[:, j], minlength=n_levels)
    return out


# ------------------------------------------------------------------ fitting

def _poisson_start(y, X, iters=50):
    """Dispersion-free (quasi-)Poisson IRLS fit of the mean model."""
    beta = np.zeros(X.shape[1])
    beta[0] = math.log(max(y.mean(), 1e-8))
    for _ in range(iters):
        eta = np.clip(X @ beta, -30, 30)
        mu = np.exp(eta)
        z = eta + (y - mu) / mu
        w = mu
        XtW = X.T * w
        try:
            new = np.linalg.solve(XtW @ X + 1e-10 * np.eye(X.shape[1]), XtW @ z)
        except np.linalg.LinAlgError:
            break
        if np.max(np.abs(new - beta)) < 1e-10:
            beta = new
            break
        beta = new
    return beta


def _moment_dispersion(y, mu, par):
    excess = np.sum((y - mu) ** 2 - mu)
    if par is Parametrization.NB1:
        return max(excess / mu.sum(), 0.05)
    return max(mu @ mu / max(excess, 1e-8), 0.05) if excess > 0 else 100.0


@dataclass
class GlmmFit:
    """Fitted negative binomial mixed model."""

    spec: FormulaSpec
    beta: np.ndarray
    beta_names: list
    vcov_beta: np.ndarray
    disp_beta: np.ndarray
    disp_names: list
    vcov_disp: np.ndarray
    re_cov: dict
    re_modes: dict
    loglik: float
    converged: bool
    n_obs: int
    params: np.ndarray
    vcov_params: np.ndarray | None
    grad_maxnorm: float
    boundary: bool
    iterations: int
    dropped: dict
    recipes: dict
    objective_trace: list = field(default_factory=list)
    messages: list = field(default_factory=list)

    @property
    def parametrization(self) -> Parametrization:
        return self.spec.parametrization

    def coef_table(self, which: str = "mean") -> pd.DataFrame:
        if which == "mean":
            est, cov, names = self.beta, self.vcov_beta, self.beta_names
        else:
            est, cov, names = self.disp_beta, self.vcov_disp, self.disp_names
        se = np.sqrt(np.clip(np.diag(cov), 0, None))
        with np.errstate(divide="ignore", invalid="ignore"):
            z = est / se
        return pd.DataFrame({"estimate": est, "se": se, "z": z,
                             "p": 2 * stats.norm.sf(np.abs(z))}, index=names)

    def re_sd(self, name: str) -> np.ndarray:
        return np.sqrt(np.diag(np.asarray(self.re_cov[name]["cov"])))

    # ---- serialization
    def to_dict(self) -> dict:
        return {
            "format": "engshift.glmm_fit",
            "version": FIT_FORMAT_VERSION,
            "spec": {"mean": self.spec.mean, "dispersion": self.spec.dispersion,
                     "parametrization": self.spec.parametrization.value},
            "beta": dict(zip(self.beta_names, map(float, self.beta))),
            "vcov_beta": np.asarray(self.vcov_beta).tolist(),
            "disp_beta": dict(zip(self.disp_names, map(float, self.disp_beta))),
            "vcov_disp": np.asarray(self.vcov_disp).tolist(),
            "re_cov": {k: {**v, "cov": np.asarray(v["cov"]).tolist()} for k, v in self.re_cov.items()},
            "re_modes": {k: {"levels": list(v["levels"]), "values": np.asarray(v["values"]).tolist()}
                         for k, v in self.re_modes.items()},
            "loglik": float(self.loglik),
            "converged": bool(self.converged),
            "n_obs": int(self.n_obs),
            "params": np.asarray(self.params).tolist(),
            "vcov_params": None if self.vcov_params is None else np.asarray(self.vcov_params).tolist(),
            "grad_maxnorm": float(self.grad_maxnorm),
            "boundary": bool(self.boundary),
            "iterations": int(self.iterations),
            "dropped": self.dropped,
            "recipes": {k: recipe_to_dict(v) for k, v in self.recipes.items()},
            "objective_trace": [float(x) for x in self.objective_trace],
            "messages": list(self.messages),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GlmmFit":
        if d.get("format") != "engshift.glmm_fit":
            raise ValueError("not a serialized GLMM fit")
        if d.get("version") != FIT_FORMAT_VERSION:
            raise ValueError(f"unsupported fit format version {d.get('version')}")
        spec = FormulaSpec(d["spec"]["mean"], d["spec"]["dispersion"], d["spec"]["parametrization"])
        return cls(
            spec=spec,
            beta=np.array(list(d["beta"].values()), dtype=float),
            beta_names=list(d["beta"].keys()),
            vcov_beta=np.array(d["vcov_beta"], dtype=float).reshape(len(d["beta"]), len(d["beta"])),
            disp_beta=np.array(list(d["disp_beta"].values()), dtype=float),
            disp_names=list(d["disp_beta"].keys()),
            vcov_disp=np.array(d["vcov_disp"], dtype=float).reshape(len(d["disp_beta"]), len(d["disp_beta"])),
            re_cov={k: {**v, "cov": np.array(v["cov"], dtype=float)} for k, v in d["re_cov"].items()},
            re_modes={k: {"levels": v["levels"], "values": np.array(v["values"], dtype=float)}
                      for k, v in d["re_modes"].items()},
            loglik=d["loglik"], converged=d["converged"], n_obs=d["n_obs"],
            params=np.array(d["params"], dtype=float),
            vcov_params=None if d["vcov_params"] is None else np.array(d["vcov_params"], dtype=float),
            grad_maxnorm=d["grad_maxnorm"], boundary=d["boundary"], iterations=d["iterations"],
            dropped=d["dropped"],
            recipes={k: recipe_from_dict(v) for k, v in d["recipes"].items()},
            objective_trace=d.get("objective_trace", []),
            messages=d.get("messages", []),
        )

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=1, sort_keys=False)

    @classmethod
    def load(cls, path) -> "GlmmFit":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def build_model(data: pd.DataFrame, spec: FormulaSpec, response: str = "reactions", **kw):
    """Assemble the design of ``spec`` on ``data``; returns (LaplaceModel, recipes, dropped)."""
    if spec.parametrization is Parametrization.GAUSSIAN_AR1:
        raise ValueError("gaussian_ar1 models are fitted with fit_ar1_gaussian")
    y = data[response].to_numpy(dtype=float)
    if np.any(~np.isfinite(y)) or np.any(y < 0):
        raise ValueError("response must be finite nonnegative counts")
    recipes, dropped, Xs, blocks = {}, {}, [], []
    for row, text in enumerate((spec.mean, spec.dispersion)):
        form = parse_formula(text)
        recipe = build_recipe(form.terms, data)
        X = recipe.build(data)
        X, keep, lost = drop_aliased(X, recipe.names, label=f"{ROWS[row]} fixed-effect")
        recipes[ROWS[row]] = subset_recipe(recipe, keep)
        dropped[ROWS[row]] = lost
        Xs.append(X)
        for rt in form.random:
            zrec = build_recipe(rt.terms, data)
            codes, levels = group_codes(data, rt.group)
            name = f"{ROWS[row]}:{rt}"
            blocks.append(ReBlock(name, row, rt.group, levels, codes, zrec.build(data), zrec))
            recipes[name] = zrec
    model = LaplaceModel(y, Xs[0], Xs[1], blocks, spec.parametrization, **kw)
    return model, recipes, dropped


def start_values(model: LaplaceModel, options: FitOptions) -> np.ndarray:
    beta = _poisson_start(model.y, model.X[0])
    mu = np.exp(np.clip(model.X[0] @ beta, -30, 30))
    phi = _moment_dispersion(model.y, mu, model.par)
    beta_d = np.zeros(model.p_disp)
    # first column of an intercept model is the intercept
    beta_d[0] = math.log(phi)
    thetas = []
    for blk in model.blocks:
        thetas.append(L_to_theta(np.eye(blk.k) * options.re_sd_start))
    return np.concatenate([beta, beta_d] + thetas)


def _bounds(model: LaplaceModel, options: FitOptions):
    bounds = [(None, None)] * (model.p_mean + model.p_disp)
    for blk in model.blocks:
        for r, c in _theta_index(blk.k):
            bounds.append(options.log_sd_bounds if r == c else (None, None))
    return bounds


def numeric_hessian(model: LaplaceModel, params: np.ndarray, step: float = 1e-4) -> np.ndarray:
    """Central finite differences of the analytic gradient, symmetrized."""
    p = params.size
    H = np.empty((p, p))
    b_ref = model.b.copy()
    for j in range(p):
        e = np.zeros(p)
        e[j] = step * max(1.0, abs(params[j]))
        _, gp = model.evaluate(params + e, b0=b_ref)
        _, gm = model.evaluate(params - e, b0=b_ref)
        H[:, j] = (gp - gm) / (2 * e[j])
    model.evaluate(params, b0=b_ref)
    return 0.5 * (H + H.T)


def fit_nb_glmm(data: pd.DataFrame, spec: FormulaSpec, options: FitOptions | None = None,
                response: str = "reactions", start: np.ndarray | None = None) -> GlmmFit:
    """Fit a negative binomial GLMM by maximizing the Laplace approximation."""
    options = options or FitOptions()
    model, recipes, dropped = build_model(data, spec, response, max_inner=options.max_inner,
                                          inner_tol=options.inner_tol)
    x0 = start_values(model, options) if start is None else np.asarray(start, float)
    trace: list = []
    messages: list = []

    last: dict = {}

    def fun(x):
        b_prev = model.b.copy()
        try:
            obj, grad = model.evaluate(x)
        except NUMERIC_FAILURES:
            obj, grad = np.inf, None
        if not (np.isfinite(obj) and np.all(np.isfinite(grad))):
            # trial point far outside the data's support: keep the warm start, let the line search back off
            model.b = b_prev
            return 1e300, np.zeros_like(x)
        last["x"], last["obj"] = x.copy(), obj
        return obj, grad

    def callback(xk):
        if "x" in last and np.array_equal(xk, last["x"]):
            trace.append(float(last["obj"]))
        else:
            trace.append(float(model.objective(xk)))

    bounds = _bounds(model, options)
    res = optimize.minimize(fun, x0, jac=True, method="L-BFGS-B", bounds=bounds, callback=callback,
                            options={"maxiter": options.max_outer, "gtol": options.gtol,
                                     "ftol": options.ftol, "maxcor": 20})
    x = res.x
    iterations = int(res.nit)
    obj, grad = model.evaluate(x)
    free = _free_mask(model, x, bounds)
    hess, x_hess = None, x
    for _ in range(options.polish_steps):
        if np.max(np.abs(grad[free])) <= options.gtol:
            break
        if hess is None:
            hess, x_hess = numeric_hessian(model, x), x
        x_new, obj_new, grad_new = _newton_polish(model, x, obj, grad, hess, free, bounds)
        if x_new is None:
            break
        x, obj, grad = x_new, obj_new, grad_new
        trace.append(float(obj))
        free = _free_mask(model, x, bounds)
    # a Hessian from within step_tol of the final point is reused for the covariance
    if hess is not None and np.max(np.abs(x - x_hess)) > options.step_tol:
        hess = None
    boundary_idx = _boundary_params(model, x, options)
    check = free.copy()
    check[boundary_idx] = False
    gmax = float(np.max(np.abs(grad[check]))) if check.any() else 0.0
    converged = gmax <= options.gtol
    if not converged and check.any():
        if hess is None:
            hess = numeric_hessian(model, x)
        step = _newton_step(hess, grad, check)
        if step is not None and step <= options.step_tol:
            converged = True
            messages.append(f"converged on the scaled gradient: max|H^-1 g| = {step:.3g}")
    converged = converged and model.inner_converged
    if not converged:
        messages.append(f"optimizer stopped with max|grad| = {gmax:.3g} ({res.message})")
        warnings.warn(f"GLMM fit did not converge: max|grad| = {gmax:.3g}", ConvergenceWarning,
                      stacklevel=2)
    if model.indefinite:
        messages.append("penalized Hessian was indefinite at the mode; PSD-clipped weights used")

    beta, beta_d, thetas = model.split(x)
    boundary = bool(boundary_idx)
    if boundary:
        messages.append("random-effect covariance at the boundary (singular)")

    vcov = None
    if options.compute_vcov:
        if hess is None:
            hess = numeric_hessian(model, x)
        vcov = _invert_hessian(hess, boundary_idx, messages)
    p0, p1 = model.p_mean, model.p_mean + model.p_disp
    if vcov is None:
        vcov_beta = np.full((p0, p0), np.nan)
        vcov_disp = np.full((p1 - p0, p1 - p0), np.nan)
    else:
        vcov_beta, vcov_disp = vcov[:p0, :p0], vcov[p0:p1, p0:p1]

    re_cov, re_modes = {}, {}
    modes = model.conditional_modes(x)
    for blk, th, u in zip(model.blocks, thetas, modes):
        L = theta_to_L(th, blk.k)
        cov = L @ L.T
        sd = np.sqrt(np.diag(cov))
        with np.errstate(divide="ignore", invalid="ignore"):
            corr = cov / np.outer(sd, sd)
        re_cov[blk.name] = {"row": ROWS[blk.row], "group": ":".join(blk.group),
                            "coef_names": list(blk.recipe.names), "cov": cov,
                            "sd": sd.tolist(), "corr": np.nan_to_num(corr).tolist()}
        re_modes[blk.name] = {"levels": list(blk.levels), "values": u}
    return GlmmFit(
        spec=spec, beta=beta.copy(), beta_names=list(recipes["mean"].names), vcov_beta=vcov_beta,
        disp_beta=beta_d.copy(), disp_names=list(recipes["disp"].names), vcov_disp=vcov_disp,
        re_cov=re_cov, re_modes=re_modes, loglik=-float(obj), converged=bool(converged),
        n_obs=model.n, params=x.copy(), vcov_params=vcov, grad_maxnorm=gmax, boundary=boundary,
        iterations=iterations, dropped=dropped, recipes=recipes, objective_trace=trace,
        messages=messages)


def _free_mask(model, x, bounds):
    free = np.ones(x.size, dtype=bool)
    for j, (lo, hi) in enumerate(bounds):
        if lo is not None and x[j] <= lo + 1e-8:
            free[j] = False
        if hi is not None and x[j] >= hi - 1e-8:
            free[j] = False
    return free


def _newton_step(hess, grad, mask):
    """Largest component of the Newton step over ``mask``; None if the Hessian is not PD there."""
    idx = np.flatnonzero(mask)
    try:
        c = linalg.cho_factor(hess[np.ix_(idx, idx)], lower=True)
    except linalg.LinAlgError:
        return None
    return float(np.max(np.abs(linalg.cho_solve(c, grad[idx]))))


def _newton_polish(model, x, obj, grad, hess, free, bounds):
    idx = np.flatnonzero(free)
    Hs = hess[np.ix_(idx, idx)]
    try:
        vals, vecs = np.linalg.eigh(Hs)
    except np.linalg.LinAlgError:
        return None, None, None
    vals = np.maximum(vals, 1e-8 * max(vals.max(), 1.0))
    step = np.zeros_like(x)
    step[idx] = -(vecs / vals) @ (vecs.T @ grad[idx])
    lo = np.array([-np.inf if b[0] is None else b[0] for b in bounds])
    hi = np.array([np.inf if b[1] is None else b[1] for b in bounds])
    t = 1.0
    for _ in range(20):
        cand = np.clip(x + t * step, lo, hi)
        b_prev = model.b.copy()
        try:
            o, g = model.evaluate(cand)
        except NUMERIC_FAILURES:
            model.b, o = b_prev, np.inf
        if np.isfinite(o) and o <= obj + 1e-10 * abs(obj):
            return cand, o, g
        t *= 0.5
    model.evaluate(x)
    return None, None, None


def _boundary_params(model, x, options):
    out = []
    for sl, blk in zip(model.theta_slices(), model.blocks):
        for j, (r, c) in enumerate(_theta_index(blk.k)):
            if r == c and math.exp(x[sl.start + j]) < options.boundary_sd:
                out.append(sl.start + j)
    return out


def _invert_hessian(hess, boundary_idx, messages):
    p = hess.shape[0]
    keep = np.array([j for j in range(p) if j not in set(boundary_idx)], dtype=int)
    vcov = np.full((p, p), np.nan)
    sub = hess[np.ix_(keep, keep)]
    try:
        c = linalg.cho_factor(sub, lower=True)
        inv = linalg.cho_solve(c, np.eye(keep.size))
    except linalg.LinAlgError:
        messages.append("Hessian not positive definite; pseudo-inverse used for covariance")
        inv = np.linalg.pinv(sub)
    vcov[np.ix_(keep, keep)] = 0.5 * (inv + inv.T)
    return vcov


# --------------------------------------------------------------- prediction

def _block_z(fit: GlmmFit, name: str, cells: pd.DataFrame) -> np.ndarray:
    return fit.recipes[name].build(cells)


def predict_conditional(fit: GlmmFit, cells: pd.DataFrame) -> pd.DataFrame:
    """Conditional mean and standard deviation at the fitted random-effect modes."""
    eta = fit.recipes["mean"].build(cells) @ fit.beta
    zeta = fit.recipes["disp"].build(cells) @ fit.disp_beta
    for name, info in fit.re_modes.items():
        cov = fit.re_cov[name]
        group = tuple(cov["group"].split(":"))
        codes, _ = group_codes(cells, group, levels=info["levels"])
        Z = _block_z(fit, name, cells)
        contrib = np.einsum("nk,nk->n", Z, np.asarray(info["values"])[codes])
        if cov["row"] == "mean":
            eta = eta + contrib
        else:
            zeta = zeta + contrib
    mu = np.exp(eta)
    phi = np.exp(zeta)
    sigma = np.sqrt(variance(mu, phi, fit.parametrization))
    return pd.DataFrame({"mu": mu, "sigma": sigma, "phi": phi}, index=cells.index)
