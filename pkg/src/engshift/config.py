"""Pipeline configuration: TOML file, environment and flag overrides, and its hash.

Example::

    seed = 7
    alpha = 0.05

    [paths]
    posts = "posts.csv"
    outlets = "outlets.csv"
    output = "out"

    [cleaning]
    window_start = "2016-01-04"
    window_end = "2024-01-01"

    [consensus]
    k = 1000

Precedence is file < ``ENGSHIFT_SEED`` < command-line flags.  The hash
covers everything except ``paths`` and ``runtime``, which do not change
results.
"""

from __future__ import annotations

import copy
import hashlib
import json
import os
import sys

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

SEED_ENV = "ENGSHIFT_SEED"
UNHASHED = ("paths", "runtime")

DEFAULTS: dict = {
    "seed": 0,
    "alpha": 0.05,
    "paths": {"posts": "", "outlets": "", "output": "engshift-out"},
    "cleaning": {
        "allowed_types": ["status", "link", "photo", "video"],
        "window_start": "",
        "window_end": "",
        "require_page_author": True,
        "delimiter": ",",
    },
    "preliminary": {
        "scope": "news_only",
        "mean": "quality + log(mean_posts) + (1|outlet) + (1+quality|year:month:day)",
        "dispersion": "quality + log(mean_posts) + (1|outlet) + (1+quality|year:month:day)",
        "parametrization": "nb2",
    },
    "sampler": {
        "trend_min_order": 0,
        "trend_max_order": 1,
        "max_knots": 30,
        "min_knot_separation": 13,
        "outlier_component": True,
        "burn_in": 10000,
        "samples": 2000,
        "thinning": 10,
    },
    "consensus": {"k": 1000, "l": 2, "p_min": 0.5},
    "epochs": {
        "scopes": ["news_only", "news_and_nonnews"],
        "floor": 20,
        "news_only": {},
        "news_and_nonnews": {},
    },
    "inference": {
        "baseline_epochs": [0, 1, 2, 3, 4],
        "post_epochs": [],
        "total_effect": [],
    },
    "simulate": {"n_outlets": 12, "truth": {}},
    "runtime": {"workers": 0},
}


class ConfigError(ValueError):
    pass


def _merge(base: dict, extra: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in extra.items():
        path = f"{where}{key}"
        if key not in base:
            # free-form tables
            if where.rstrip(".") in ("simulate.truth", "epochs.news_only", "epochs.news_and_nonnews"):
                out[key] = copy.deepcopy(value)
                continue
            raise ConfigError(f"unknown configuration key {path!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{path!r} must be a table")
            out[key] = _merge(base[key], value, path + ".")
        else:
            out[key] = copy.deepcopy(value)
    return out


def parse_override(text: str) -> tuple:
    """``a.b=value`` with a TOML literal value (bare words are taken as strings)."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    key, raw = text.split("=", 1)
    try:
        value = tomllib.loads(f"v = {raw}")["v"]
    except tomllib.TOMLDecodeError:
        value = raw
    return key.strip(), value


def _nest(key: str, value) -> dict:
    out: dict = {}
    cur = out
    parts = key.split(".")
    for p in parts[:-1]:
        cur = cur.setdefault(p, {})
    cur[parts[-1]] = value
    return out


def load_config(path=None, overrides=(), env=None) -> dict:
    """Resolve the configuration; relative paths are taken against the config file's folder."""
    cfg = copy.deepcopy(DEFAULTS)
    base_dir = "."
    if path is not None:
        try:
            with open(path, "rb") as fh:
                data = tomllib.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"configuration file {path} not found") from None
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from None
        cfg = _merge(cfg, data)
        base_dir = os.path.dirname(os.path.abspath(path))
    env = os.environ if env is None else env
    if env.get(SEED_ENV, "") != "":
        try:
            cfg["seed"] = int(env[SEED_ENV])
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer") from None
    _anchor(cfg, base_dir)
    for item in overrides:
        key, value = item if isinstance(item, tuple) else parse_override(item)
        cfg = _merge(cfg, _nest(key, value))
    # paths given on the command line are relative to the working directory
    _anchor(cfg, os.getcwd())
    validate(cfg)
    return cfg


def _anchor(cfg: dict, base_dir: str) -> None:
    for k, v in cfg["paths"].items():
        if v and not os.path.isabs(v):
            cfg["paths"][k] = os.path.normpath(os.path.join(base_dir, v))


def validate(cfg: dict) -> None:
    if not isinstance(cfg["seed"], int) or cfg["seed"] < 0:
        raise ConfigError("seed must be a nonnegative integer")
    if not 0 < float(cfg["alpha"]) < 1:
        raise ConfigError("alpha must lie in (0, 1)")
    if int(cfg["epochs"]["floor"]) < 0:
        raise ConfigError("epochs.floor must be nonnegative")
    bad = [s for s in cfg["epochs"]["scopes"] if s not in ("news_only", "news_and_nonnews")]
    if bad:
        raise ConfigError(f"unknown epoch scope(s) {bad}")
    c = cfg["consensus"]
    if int(c["k"]) < 1 or int(c["l"]) < 0 or not 0 < float(c["p_min"]) <= 1:
        raise ConfigError("consensus needs k >= 1, l >= 0 and 0 < p_min <= 1")
    te = cfg["inference"]["total_effect"]
    if te and len(te) != 2:
        raise ConfigError("inference.total_effect takes two epochs")


def config_hash(cfg: dict) -> str:
    payload = {k: v for k, v in cfg.items() if k not in UNHASHED}
    text = json.dumps(payload, sort_keys=True, separators=(",", ":"), ensure_ascii=True)
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]
