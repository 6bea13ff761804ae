"""Reversible-jump MCMC for shared changepoints in a multivariate weekly signal.

Model, per signal dimension ``d`` (standardized to zero mean, unit variance
over observed weeks)::

    y_d[t] = x_s(t)' beta_{d,s} + e_d[t],   e_d[t] ~ N(0, sigma2_d / w_d[t])

Knots are shared by all dimensions and split the weeks into segments.  Each
segment has a polynomial order (0 = level, 1 = level + slope in years,
centred in the segment) shared across dimensions.  ``beta ~ N(0, v0 I)`` is
integrated out in every knot and order move; a Gibbs step draws beta and then
``sigma2_d`` from its inverse-gamma full conditional.  ``w_d[t]`` is 1, or
1/100 for weeks flagged as outliers (prior probability 0.01).

Priors: number of knots uniform on ``0..max_knots``; given the count, all
admissible placements (segments at least ``min_separation`` weeks long, no
knot inside a long gap) equally likely; orders uniform.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict

import numba as nb
import numpy as np

MOVE_NAMES = ("birth", "death", "move", "flip", "outlier", "gibbs")


class SignalError(ValueError):
    pass


@dataclass
class McmcConfig:
    burn_in: int = 10000
    samples: int = 2000
    thinning: int = 10


@dataclass
class SamplerConfig:
    trend_min_order: int = 0
    trend_max_order: int = 1
    max_knots: int = 30
    min_knot_separation: int = 13
    outlier_component: bool = True
    delta_time: float = 1.0 / 52.0
    mcmc: McmcConfig = field(default_factory=McmcConfig)
    seed: int = 0
    coef_prior_var: float = 1.0
    sigma_prior_shape: float = 0.01
    sigma_prior_rate: float = 0.01
    outlier_prob: float = 0.01
    outlier_scale: float = 100.0
    move_probs: tuple = (0.2, 0.2, 0.2, 0.1, 0.1, 0.2)

    def __post_init__(self):
        if isinstance(self.mcmc, dict):
            self.mcmc = McmcConfig(**self.mcmc)
        if not 0 <= self.trend_min_order <= self.trend_max_order <= 1:
            raise ValueError("orders must satisfy 0 <= min <= max <= 1")
        if self.max_knots < 0:
            raise ValueError("max_knots must be nonnegative")
        if self.min_knot_separation < 1:
            raise ValueError("min_knot_separation must be at least 1")
        if len(self.move_probs) != 6 or abs(sum(self.move_probs) - 1) > 1e-9:
            raise ValueError("move_probs must be six probabilities summing to 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["move_probs"] = list(self.move_probs)
        return d


@dataclass
class SamplerResult:
    prob: np.ndarray              # per-week knot probability
    knot_count: np.ndarray        # posterior histogram of the number of knots
    outlier_prob: np.ndarray      # (dims, weeks)
    acceptance: dict
    seed: int


# ----------------------------------------------------------------- helpers

def allowed_positions(observed: np.ndarray, min_sep: int) -> np.ndarray:
    """Weeks that may host a knot: not closer than min_sep to either end, not inside a long gap."""
    w = observed.size
    ok = np.zeros(w, dtype=np.bool_)
    ok[min_sep:w - min_sep + 1] = True
    t = 0
    while t < w:
        if not observed[t]:
            u = t
            while u < w and not observed[u]:
                u += 1
            if u - t > min_sep:
                ok[t:u] = False
            t = u
        else:
            t += 1
    return ok


def log_placement_counts(allowed: np.ndarray, min_sep: int, max_knots: int) -> np.ndarray:
    """log N(m): number of admissible knot sets of each size (-inf if none)."""
    w = allowed.size
    out = np.full(max_knots + 1, -np.inf)
    out[0] = 0.0
    # f[p] = number of sets with current size whose last knot is at p
    f = np.where(allowed, 1.0, 0.0)
    for m in range(1, max_knots + 1):
        total = f.sum()
        if total <= 0:
            break
        out[m] = math.log(total)
        # next size: new knot q with q - p >= min_sep
        csum = np.concatenate([[0.0], np.cumsum(f)])
        g = np.zeros(w)
        q = np.arange(w)
        lim = q - min_sep + 1
        g[lim > 0] = csum[lim[lim > 0]]
        f = np.where(allowed, g, 0.0)
    return out


# ------------------------------------------------------------ numba kernel

@nb.njit(cache=True)
def _seg_stats(y, wt, obs, a, b, dt):
    # returns sw, swt, swtt, swy, swty, swyy, slogw, n with t centred at the midpoint
    c = 0.5 * (a + b - 1)
    sw = swt = swtt = swy = swty = swyy = slogw = 0.0
    n = 0
    for t in range(a, b):
        if obs[t]:
            x = (t - c) * dt
            wv = wt[t]
            sw += wv
            swt += wv * x
            swtt += wv * x * x
            swy += wv * y[t]
            swty += wv * x * y[t]
            swyy += wv * y[t] * y[t]
            slogw += math.log(wv)
            n += 1
    return sw, swt, swtt, swy, swty, swyy, slogw, n


@nb.njit(cache=True)
def _seg_loglik(y, wt, obs, a, b, order, s2, v0, dt):
    sw, swt, swtt, swy, swty, swyy, slogw, n = _seg_stats(y, wt, obs, a, b, dt)
    if n == 0:
        return 0.0
    base = -0.5 * (n * math.log(2 * math.pi * s2) - slogw + swyy / s2)
    if order == 0:
        m00 = sw / s2 + 1.0 / v0
        b0 = swy / s2
        return base + 0.5 * b0 * b0 / m00 - 0.5 * math.log(m00 * v0)
    m00 = sw / s2 + 1.0 / v0
    m01 = swt / s2
    m11 = swtt / s2 + 1.0 / v0
    b0 = swy / s2
    b1 = swty / s2
    det = m00 * m11 - m01 * m01
    quad = (m11 * b0 * b0 - 2 * m01 * b0 * b1 + m00 * b1 * b1) / det
    return base + 0.5 * quad - 0.5 * math.log(det * v0 * v0)


@nb.njit(cache=True)
def _seg_rss_draw(y, wt, obs, a, b, order, s2, v0, dt):
    """Draw beta from its conditional and return (weighted RSS, n)."""
    sw, swt, swtt, swy, swty, swyy, slogw, n = _seg_stats(y, wt, obs, a, b, dt)
    if n == 0:
        return 0.0, 0
    if order == 0:
        m00 = sw / s2 + 1.0 / v0
        mean = (swy / s2) / m00
        beta0 = mean + np.random.normal() / math.sqrt(m00)
        rss = swyy - 2 * beta0 * swy + beta0 * beta0 * sw
        return max(rss, 0.0), n
    m00 = sw / s2 + 1.0 / v0
    m01 = swt / s2
    m11 = swtt / s2 + 1.0 / v0
    b0 = swy / s2
    b1 = swty / s2
    det = m00 * m11 - m01 * m01
    mu0 = (m11 * b0 - m01 * b1) / det
    mu1 = (m00 * b1 - m01 * b0) / det
    # Cholesky of the covariance M^-1
    c00 = m11 / det
    c01 = -m01 / det
    c11 = m00 / det
    l00 = math.sqrt(c00)
    l10 = c01 / l00
    l11 = math.sqrt(max(c11 - l10 * l10, 0.0))
    z0 = np.random.normal()
    z1 = np.random.normal()
    beta0 = mu0 + l00 * z0
    beta1 = mu1 + l10 * z0 + l11 * z1
    rss = (swyy - 2 * beta0 * swy - 2 * beta1 * swty + beta0 * beta0 * sw
           + 2 * beta0 * beta1 * swt + beta1 * beta1 * swtt)
    return max(rss, 0.0), n


@nb.njit(cache=True)
def _free_count(bounds, m, cum_allowed, sep):
    # admissible birth positions: allowed p with p - left >= sep and right - p >= sep
    total = 0
    for i in range(m + 1):
        lo = bounds[i] + sep
        hi = bounds[i + 1] - sep
        if hi >= lo:
            total += cum_allowed[hi + 1] - cum_allowed[lo]
    return total


@nb.njit(cache=True)
def _pick_free(bounds, m, cum_allowed, allowed, sep, r):
    for i in range(m + 1):
        lo = bounds[i] + sep
        hi = bounds[i + 1] - sep
        if hi >= lo:
            cnt = cum_allowed[hi + 1] - cum_allowed[lo]
            if r < cnt:
                for p in range(lo, hi + 1):
                    if allowed[p]:
                        if r == 0:
                            return i, p
                        r -= 1
            else:
                r -= cnt
    return -1, -1


@nb.njit(cache=True)
def _sample(Y, obs, allowed, log_n, seed, burn_in, n_samples, thin, sep, max_knots,
            min_order, max_order, use_outliers, dt, v0, a0, b0, pi_out, out_scale, probs):
    np.random.seed(seed)
    D, w = Y.shape
    cum_allowed = np.zeros(w + 1, dtype=np.int64)
    for t in range(w):
        cum_allowed[t + 1] = cum_allowed[t] + (1 if allowed[t] else 0)
    n_ord = max_order - min_order + 1
    obs_idx = np.empty(w, dtype=np.int64)
    n_obs = 0
    for t in range(w):
        if obs[t]:
            obs_idx[n_obs] = t
            n_obs += 1

    bounds = np.zeros(max_knots + 2, dtype=np.int64)
    orders = np.zeros(max_knots + 1, dtype=np.int64)
    m = 0
    bounds[1] = w
    orders[0] = min_order
    wt = np.ones((D, w))
    outl = np.zeros((D, w), dtype=np.bool_)
    s2 = np.ones(D)
    for d in range(D):
        s2[d] = 0.5
    segll = np.zeros((D, max_knots + 1))
    for d in range(D):
        segll[d, 0] = _seg_loglik(Y[d], wt[d], obs, 0, w, orders[0], s2[d], v0, dt)

    cprob = np.cumsum(probs)
    counts = np.zeros(w)
    kcount = np.zeros(max_knots + 1)
    ocount = np.zeros((D, w))
    tried = np.zeros(6)
    accepted = np.zeros(6)
    log_odds_out = math.log(pi_out / (1.0 - pi_out))
    new_ll = np.zeros((D, 2))

    total = burn_in + n_samples * thin
    for it in range(total):
        u = np.random.random()
        move = 0
        while move < 5 and u >= cprob[move]:
            move += 1
        if move == 3 and n_ord == 1:
            move = 5
        if move == 4 and not use_outliers:
            move = 5
        tried[move] += 1

        if move == 0:  # birth
            if m < max_knots:
                F = _free_count(bounds, m, cum_allowed, sep)
                if F > 0 and log_n[m + 1] > -np.inf:
                    r = np.random.randint(0, F)
                    seg, p = _pick_free(bounds, m, cum_allowed, allowed, sep, r)
                    o1 = min_order + np.random.randint(0, n_ord)
                    o2 = min_order + np.random.randint(0, n_ord)
                    a = bounds[seg]
                    b = bounds[seg + 1]
                    dl = 0.0
                    for d in range(D):
                        new_ll[d, 0] = _seg_loglik(Y[d], wt[d], obs, a, p, o1, s2[d], v0, dt)
                        new_ll[d, 1] = _seg_loglik(Y[d], wt[d], obs, p, b, o2, s2[d], v0, dt)
                        dl += new_ll[d, 0] + new_ll[d, 1] - segll[d, seg]
                    lr = (dl + log_n[m] - log_n[m + 1] - math.log(m + 1.0) + math.log(F)
                          + math.log(probs[1]) - math.log(probs[0]))
                    if math.log(np.random.random()) < lr:
                        for i in range(m + 1, seg, -1):
                            bounds[i + 1] = bounds[i]
                        for i in range(m, seg, -1):
                            orders[i + 1] = orders[i]
                            for d in range(D):
                                segll[d, i + 1] = segll[d, i]
                        bounds[seg + 1] = p
                        orders[seg] = o1
                        orders[seg + 1] = o2
                        for d in range(D):
                            segll[d, seg] = new_ll[d, 0]
                            segll[d, seg + 1] = new_ll[d, 1]
                        m += 1
                        accepted[0] += 1
        elif move == 1:  # death
            if m > 0:
                j = 1 + np.random.randint(0, m)   # knot j separates segments j-1 and j
                a = bounds[j - 1]
                b = bounds[j + 1]
                o = min_order + np.random.randint(0, n_ord)
                dl = 0.0
                for d in range(D):
                    new_ll[d, 0] = _seg_loglik(Y[d], wt[d], obs, a, b, o, s2[d], v0, dt)
                    dl += new_ll[d, 0] - segll[d, j - 1] - segll[d, j]
                # free positions in the state after removal
                saved = bounds[j]
                for i in range(j, m + 1):
                    bounds[i] = bounds[i + 1]
                F = _free_count(bounds, m - 1, cum_allowed, sep)
                for i in range(m, j - 1, -1):
                    bounds[i + 1] = bounds[i]
                bounds[j] = saved
                lr = dl
                lr += log_n[m] - log_n[m - 1] + math.log(float(m)) - math.log(float(F))
                lr += math.log(probs[0]) - math.log(probs[1])
                if math.log(np.random.random()) < lr:
                    for i in range(j, m + 1):
                        bounds[i] = bounds[i + 1]
                    orders[j - 1] = o
                    for d in range(D):
                        segll[d, j - 1] = new_ll[d, 0]
                    for i in range(j, m):
                        orders[i] = orders[i + 1]
                        for d in range(D):
                            segll[d, i] = segll[d, i + 1]
                    m -= 1
                    accepted[1] += 1
        elif move == 2:  # move a knot within its neighbours
            if m > 0:
                j = 1 + np.random.randint(0, m)
                lo = bounds[j - 1] + sep
                hi = bounds[j + 1] - sep
                cnt = cum_allowed[hi + 1] - cum_allowed[lo]
                if cnt > 1:
                    r = np.random.randint(0, cnt)
                    p = lo
                    for q in range(lo, hi + 1):
                        if allowed[q]:
                            if r == 0:
                                p = q
                                break
                            r -= 1
                    if p != bounds[j]:
                        a = bounds[j - 1]
                        b = bounds[j + 1]
                        dl = 0.0
                        for d in range(D):
                            new_ll[d, 0] = _seg_loglik(Y[d], wt[d], obs, a, p, orders[j - 1], s2[d], v0, dt)
                            new_ll[d, 1] = _seg_loglik(Y[d], wt[d], obs, p, b, orders[j], s2[d], v0, dt)
                            dl += new_ll[d, 0] + new_ll[d, 1] - segll[d, j - 1] - segll[d, j]
                        if math.log(np.random.random()) < dl:
                            bounds[j] = p
                            for d in range(D):
                                segll[d, j - 1] = new_ll[d, 0]
                                segll[d, j] = new_ll[d, 1]
                            accepted[2] += 1
        elif move == 3:  # flip the order of one segment
            seg = np.random.randint(0, m + 1)
            o = min_order + max_order - orders[seg]
            dl = 0.0
            for d in range(D):
                new_ll[d, 0] = _seg_loglik(Y[d], wt[d], obs, bounds[seg], bounds[seg + 1], o, s2[d], v0, dt)
                dl += new_ll[d, 0] - segll[d, seg]
            if math.log(np.random.random()) < dl:
                orders[seg] = o
                for d in range(D):
                    segll[d, seg] = new_ll[d, 0]
                accepted[3] += 1
        elif move == 4:  # toggle an outlier flag
            d = np.random.randint(0, D)
            t = obs_idx[np.random.randint(0, n_obs)]
            seg = 0
            while bounds[seg + 1] <= t:
                seg += 1
            outl[d, t] = not outl[d, t]
            wt[d, t] = 1.0 / out_scale if outl[d, t] else 1.0
            ll = _seg_loglik(Y[d], wt[d], obs, bounds[seg], bounds[seg + 1], orders[seg], s2[d], v0, dt)
            lr = ll - segll[d, seg] + (log_odds_out if outl[d, t] else -log_odds_out)
            if math.log(np.random.random()) < lr:
                segll[d, seg] = ll
                accepted[4] += 1
            else:
                outl[d, t] = not outl[d, t]
                wt[d, t] = 1.0 / out_scale if outl[d, t] else 1.0
        else:  # Gibbs: coefficients then noise variances
            for d in range(D):
                rss = 0.0
                n = 0
                for seg in range(m + 1):
                    r_, n_ = _seg_rss_draw(Y[d], wt[d], obs, bounds[seg], bounds[seg + 1], orders[seg], s2[d], v0, dt)
                    rss += r_
                    n += n_
                shape = a0 + 0.5 * n
                rate = b0 + 0.5 * rss
                s2[d] = rate / np.random.gamma(shape, 1.0)
                for seg in range(m + 1):
                    segll[d, seg] = _seg_loglik(Y[d], wt[d], obs, bounds[seg], bounds[seg + 1], orders[seg], s2[d], v0, dt)
            accepted[5] += 1

        if it >= burn_in and (it - burn_in) % thin == thin - 1:
            for i in range(1, m + 1):
                counts[bounds[i]] += 1.0
            kcount[m] += 1.0
            for d in range(D):
                for t in range(w):
                    if outl[d, t]:
                        ocount[d, t] += 1.0
    return counts / n_samples, kcount / n_samples, ocount / n_samples, tried, accepted


def prepare_signal(values: np.ndarray) -> tuple:
    """Standardize each dimension over its observed weeks; returns (Y, observed mask)."""
    Y = np.atleast_2d(np.asarray(values, dtype=float))
    if Y.shape[0] > Y.shape[1]:
        Y = Y.T
    obs = np.all(np.isfinite(Y), axis=0)
    if not obs.any():
        raise SignalError("signal has no observed weeks")
    for d in range(Y.shape[0]):
        if not np.isfinite(Y[d]).any():
            raise SignalError(f"signal dimension {d} is entirely missing")
    Z = np.zeros_like(Y)
    for d in range(Y.shape[0]):
        x = Y[d, obs]
        sd = x.std()
        Z[d, obs] = (x - x.mean()) / (sd if sd > 0 else 1.0)
    return np.ascontiguousarray(Z), obs


def run_sampler(values, cfg: SamplerConfig, seed: int | None = None) -> SamplerResult:
    """Run one chain on a (weeks x dims) or (dims x weeks) array; NaN marks missing weeks."""
    Y, obs = prepare_signal(values)
    w = Y.shape[1]
    sep = cfg.min_knot_separation
    if w < 2 * sep:
        raise SignalError(f"signal too short: {w} weeks < 2 x min separation {sep}")
    seed = cfg.seed if seed is None else seed
    allowed = allowed_positions(obs, sep)
    log_n = log_placement_counts(allowed, sep, cfg.max_knots)
    mc = cfg.mcmc
    # numba seeds a 32-bit Mersenne twister
    chain_seed = int(np.random.SeedSequence(seed).generate_state(1, dtype=np.uint32)[0])
    prob, kc, oc, tried, acc = _sample(
        Y, obs, allowed, log_n, chain_seed, mc.burn_in, mc.samples, mc.thinning, sep,
        cfg.max_knots, cfg.trend_min_order, cfg.trend_max_order, cfg.outlier_component,
        cfg.delta_time, cfg.coef_prior_var, cfg.sigma_prior_shape, cfg.sigma_prior_rate,
        cfg.outlier_prob, cfg.outlier_scale, np.asarray(cfg.move_probs, dtype=float))
    rates = {name: (float(a / t) if t else 0.0) for name, a, t in zip(MOVE_NAMES, acc, tried)}
    return SamplerResult(prob=prob, knot_count=kc, outlier_prob=oc, acceptance=rates, seed=seed)


def run_chains(values, cfg: SamplerConfig, n_runs: int, seed: int | None = None,
               workers: int = 1) -> np.ndarray:
    """Independent chains with seeds spawned from one root; returns (n_runs, weeks)."""
    root = np.random.SeedSequence(cfg.seed if seed is None else seed)
    seeds = [int(s.generate_state(1, dtype=np.uint64)[0]) for s in root.spawn(n_runs)]
    if workers > 1 and n_runs > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(_run_one, [(values, cfg, s) for s in seeds]))
    else:
        results = [_run_one((values, cfg, s)) for s in seeds]
    return np.vstack(results)


def _run_one(args):
    values, cfg, s = args
    return run_sampler(values, cfg, seed=s).prob
