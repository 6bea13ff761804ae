"""Pipeline stages over on-disk artifacts.

Each stage reads the artifacts of earlier stages from ``<output>/<stage>/``
and writes its own next to a ``manifest.json``.  Every JSON artifact carries
a ``config_hash`` key and every delimited-text artifact starts with a
``#config_hash=<hash>`` line; a stage refuses inputs whose hash differs from
the current configuration.  Manifests also record wall-clock timings, so
they are the only files that differ between identical reruns.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import os
import time
import warnings
from dataclasses import dataclass

import numpy as np
import pandas as pd

from . import __version__
from .changepoint import (ConsensusConfig, EpochPartition, McmcConfig, SamplerConfig,
                          consensus, partition_epochs, run_chains)
from .config import config_hash
from .glmm import FormulaSpec, fit_nb_glmm, predict_conditional
from .inference import NEWS_AND_NONNEWS_SPEC, NEWS_ONLY_SPEC, EpochModel, fit_epoch_model, run_inference
from .ingestion import (CleaningConfig, InsufficientDataError, SingularDesignError, deduplicate,
                        filter_valid, fit_imputation, fit_views_proxy, impute_reactions, parse_posts,
                        read_outlets, write_posts)
from .signal import build_weekly_signal, read_signal, write_signal
from .synthetic import PanelTruth, generate_panel

HASH_PREFIX = "#config_hash="
STAGES = ("simulate", "ingest", "fit-preliminary", "build-signal", "detect", "fit-epochs", "infer",
          "report")
FOLDERS = {"simulate": "simulate", "ingest": "ingest", "fit-preliminary": "preliminary",
           "build-signal": "signal", "detect": "detect", "fit-epochs": "epochs", "infer": "infer",
           "report": "report"}
# stream ids used to derive independent seeds from the configured seed
SEED_STREAMS = {"simulate": 1, "detect": 2}


class DependencyError(RuntimeError):
    pass


class ProvenanceError(RuntimeError):
    pass


def stage_seed(seed: int, stage: str) -> int:
    return int(np.random.SeedSequence([seed, SEED_STREAMS[stage]]).generate_state(1, dtype=np.uint32)[0])


# ------------------------------------------------------------------ artifacts

@dataclass
class Context:
    cfg: dict
    chash: str
    root: str

    @classmethod
    def from_config(cls, cfg: dict) -> "Context":
        return cls(cfg, config_hash(cfg), cfg["paths"]["output"])

    def folder(self, stage: str) -> str:
        return os.path.join(self.root, FOLDERS[stage])

    def path(self, stage: str, name: str) -> str:
        return os.path.join(self.folder(stage), name)

    def need(self, stage: str, name: str) -> str:
        p = self.path(stage, name)
        if not os.path.exists(p):
            raise DependencyError(f"missing artifact {p}; run the {stage!r} stage first")
        return p


def _sha256(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_json(path: str, obj: dict, chash: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump({"config_hash": chash, **obj}, fh, indent=1)
        fh.write("\n")


def read_json(path: str, chash: str | None) -> dict:
    with open(path, encoding="utf-8") as fh:
        d = json.load(fh)
    _check_hash(path, d.get("config_hash"), chash)
    return d


def _check_hash(path, found, expected):
    if expected is not None and found is not None and found != expected:
        raise ProvenanceError(f"{path} was produced under config hash {found}, current is {expected}")
    if expected is not None and found is None:
        raise ProvenanceError(f"{path} carries no config hash")


def write_csv(path: str, frame: pd.DataFrame, chash: str, writer=None) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(f"{HASH_PREFIX}{chash}\n")
        if writer is not None:
            writer(frame, fh)
        else:
            frame.to_csv(fh, index=False, lineterminator="\n", quoting=csv.QUOTE_MINIMAL)


def open_csv(path: str, chash: str | None, required: bool = True) -> io.TextIOBase:
    """Open a delimited artifact positioned after its hash line (when present)."""
    fh = open(path, encoding="utf-8", newline="")
    first = fh.readline()
    if first.startswith(HASH_PREFIX):
        try:
            _check_hash(path, first[len(HASH_PREFIX):].strip(), chash)
        except ProvenanceError:
            fh.close()
            raise
    else:
        if required and chash is not None:
            fh.close()
            raise ProvenanceError(f"{path} carries no config hash")
        fh.seek(0)
    return fh


def read_csv(path: str, chash: str | None, **kw) -> pd.DataFrame:
    with open_csv(path, chash) as fh:
        return pd.read_csv(fh, float_precision="round_trip", **kw)


def _write_manifest(ctx: Context, stage: str, inputs: list, outputs: list, seconds: float, notes=None):
    manifest = {
        "stage": stage, "version": __version__, "config_hash": ctx.chash, "seed": ctx.cfg["seed"],
        "inputs": {os.path.relpath(p, ctx.root): _sha256(p) for p in inputs},
        "outputs": {os.path.relpath(p, ctx.root): _sha256(p) for p in outputs},
        "timings": {"seconds": round(seconds, 3)},
        "notes": notes or {},
    }
    with open(ctx.path(stage, "manifest.json"), "w", encoding="utf-8", newline="\n") as fh:
        json.dump(manifest, fh, indent=1)
        fh.write("\n")
    return manifest


def run_stage(stage: str, cfg: dict) -> dict:
    """Run one stage; returns its manifest."""
    if stage not in STAGES:
        raise ValueError(f"unknown stage {stage!r}")
    ctx = Context.from_config(cfg)
    os.makedirs(ctx.folder(stage), exist_ok=True)
    t0 = time.perf_counter()
    inputs, outputs, notes = _RUNNERS[stage](ctx)
    return _write_manifest(ctx, stage, inputs, outputs, time.perf_counter() - t0, notes)


# --------------------------------------------------------------------- stages

def _simulate(ctx: Context):
    sim = ctx.cfg["simulate"]
    truth = PanelTruth(**{**dict(sim["truth"]), "seed": stage_seed(ctx.cfg["seed"], "simulate")})
    panel = generate_panel(truth, int(sim["n_outlets"]))
    out = [ctx.path("simulate", n) for n in ("posts.csv", "outlets.csv", "truth.json")]
    write_csv(out[0], panel.posts, ctx.chash, writer=write_posts)
    write_csv(out[1], panel.outlets, ctx.chash)
    write_json(out[2], {"truth": truth.to_dict(), "n_outlets": int(sim["n_outlets"]),
                        "outlet_effects": panel.outlet_effects}, ctx.chash)
    return [], out, {"n_posts": int(len(panel.posts))}


def _input_path(ctx: Context, key: str) -> str:
    p = ctx.cfg["paths"][key]
    if not p:
        raise DependencyError(f"paths.{key} is not configured")
    if not os.path.exists(p):
        raise DependencyError(f"input file {p} does not exist")
    return p


def _ingest(ctx: Context):
    posts_path, outlets_path = _input_path(ctx, "posts"), _input_path(ctx, "outlets")
    c = ctx.cfg["cleaning"]
    # raw inputs may lack a hash line; generated ones must match
    with open_csv(posts_path, ctx.chash, required=False) as fh:
        parsed = parse_posts(fh, delimiter=c["delimiter"])
    with open_csv(outlets_path, ctx.chash, required=False) as fh:
        outlets = read_outlets(fh)
    table, dedup = deduplicate(parsed.table)
    rules = CleaningConfig(tuple(c["allowed_types"]), c["window_start"] or None, c["window_end"] or None,
                           bool(c["require_page_author"]))
    table, removed = filter_valid(table, rules)
    unknown = sorted(set(table["outlet_id"].astype(str)) - set(outlets["outlet_id"]))
    if unknown:
        raise InsufficientDataError(f"posts reference outlets without metadata: {unknown[:5]}")
    report = {"n_input": int(len(parsed.table) + len(parsed.rejects)), "rejected": int(len(parsed.rejects)),
              "duplicates_removed": dedup["removed"], "removed": removed}
    try:
        report["views_proxy"] = fit_views_proxy(table).to_dict()
    except (InsufficientDataError, SingularDesignError) as exc:
        report["views_proxy"] = {"skipped": str(exc)}
    if table["reactions"].isna().any():
        imp = fit_imputation(table)
        table = impute_reactions(table, imp)
        report["imputation"] = {"r2": imp.r2, "n_train": imp.n, "unidentifiable": imp.unidentifiable,
                                "imputed": int(table["imputed_flag"].sum()),
                                "unimputable": int(table["unimputable"].sum())}
    else:
        table = table.assign(imputed_flag=False, unimputable=False)
        report["imputation"] = {"imputed": 0, "unimputable": 0}
    report["n_output"] = int(len(table))
    out = [ctx.path("ingest", n) for n in ("posts.csv", "outlets.csv", "rejects.csv", "report.json")]
    write_csv(out[0], table, ctx.chash,
              writer=lambda f, fh: write_posts(f, fh, extra_columns=("imputed_flag", "unimputable")))
    write_csv(out[1], outlets, ctx.chash)
    write_csv(out[2], parsed.rejects, ctx.chash)
    write_json(out[3], report, ctx.chash)
    return [posts_path, outlets_path], out, {}


def _load_clean(ctx: Context):
    pp, op = ctx.need("ingest", "posts.csv"), ctx.need("ingest", "outlets.csv")
    with open_csv(pp, ctx.chash) as fh:
        parsed = parse_posts(fh)
    with open_csv(op, ctx.chash) as fh:
        outlets = read_outlets(fh)
    return parsed.table, outlets, [pp, op]


def _day_columns(ts) -> dict:
    ts = pd.DatetimeIndex(pd.to_datetime(ts, utc=True)).tz_convert("UTC").tz_localize(None)
    return {"date": ts.strftime("%Y-%m-%d"), "year": ts.strftime("%Y"), "month": ts.strftime("%m"),
            "day": ts.strftime("%d")}


def preliminary_frame(posts: pd.DataFrame, outlets: pd.DataFrame, scope: str = "news_only") -> pd.DataFrame:
    df = posts[posts["reactions"].notna()].merge(outlets, on="outlet_id", how="left", validate="many_to_one")
    if scope == "news_only":
        df = df[df["sector"] == "news"]
    if df.empty:
        raise InsufficientDataError("no posts left for the preliminary model")
    order = [q for q in ("low", "medium", "high", "non_news") if q in set(df["quality"])]
    return pd.DataFrame({
        "reactions": df["reactions"].astype("int64").to_numpy(),
        "outlet": df["outlet_id"].astype(str).to_numpy(),
        "quality": pd.Categorical(df["quality"], categories=order),
        "mean_posts": df["mean_posts"].astype(float).to_numpy(),
        **_day_columns(df["published_at"]),
    })


def _fit_preliminary(ctx: Context):
    posts, outlets, inputs = _load_clean(ctx)
    pc = ctx.cfg["preliminary"]
    frame = preliminary_frame(posts, outlets, pc["scope"])
    spec = FormulaSpec(pc["mean"], pc["dispersion"], pc["parametrization"])
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        fit = fit_nb_glmm(frame, spec)
    cells = frame.drop_duplicates(["outlet", "date"]).sort_values(["outlet", "date"]).reset_index(drop=True)
    pred = predict_conditional(fit, cells)
    outlet_mean = frame.groupby("outlet")["reactions"].mean()
    moments = pd.DataFrame({"outlet_id": cells["outlet"], "day": cells["date"], "mu": pred["mu"].to_numpy(),
                            "sigma": pred["sigma"].to_numpy(),
                            "outlet_mean": outlet_mean.reindex(cells["outlet"]).to_numpy()})
    if not (moments["outlet_mean"] > 0).all():
        raise InsufficientDataError("an outlet has zero mean reactions; relative means are undefined")
    out = [ctx.path("fit-preliminary", n) for n in ("fit.json", "moments.csv")]
    write_json(out[0], {"fit": fit.to_dict()}, ctx.chash)
    write_csv(out[1], moments, ctx.chash)
    return inputs, out, {"converged": fit.converged, "n_obs": fit.n_obs}


def _naive(t: pd.Timestamp) -> pd.Timestamp:
    return t.tz_convert("UTC").tz_localize(None) if t.tzinfo is not None else t


def _window(ctx: Context, days) -> tuple:
    c = ctx.cfg["cleaning"]
    d = pd.to_datetime(pd.Series(days))
    start = pd.Timestamp(c["window_start"]) if c["window_start"] else d.min().normalize()
    end = pd.Timestamp(c["window_end"]) if c["window_end"] else d.max().normalize() + pd.Timedelta(days=1)
    return _naive(start), _naive(end)


def _build_signal(ctx: Context):
    mp = ctx.need("fit-preliminary", "moments.csv")
    moments = read_csv(mp, ctx.chash, dtype={"outlet_id": str, "day": str})
    start, end = _window(ctx, moments["day"])
    signal = build_weekly_signal(moments, start, end)
    out = [ctx.path("build-signal", n) for n in ("signal.csv", "window.json")]
    write_csv(out[0], signal, ctx.chash, writer=write_signal)
    write_json(out[1], {"start": start.strftime("%Y-%m-%d"), "end": end.strftime("%Y-%m-%d")}, ctx.chash)
    return [mp], out, {"weeks": int(len(signal))}


def sampler_config(cfg: dict) -> SamplerConfig:
    s = cfg["sampler"]
    return SamplerConfig(trend_min_order=int(s["trend_min_order"]), trend_max_order=int(s["trend_max_order"]),
                         max_knots=int(s["max_knots"]), min_knot_separation=int(s["min_knot_separation"]),
                         outlier_component=bool(s["outlier_component"]),
                         mcmc=McmcConfig(int(s["burn_in"]), int(s["samples"]), int(s["thinning"])),
                         seed=stage_seed(cfg["seed"], "detect"))


def _workers(cfg: dict) -> int:
    w = int(cfg["runtime"]["workers"])
    return w if w > 0 else (os.cpu_count() or 1)


def _detect(ctx: Context):
    sp = ctx.need("build-signal", "signal.csv")
    window = read_json(ctx.need("build-signal", "window.json"), ctx.chash)
    with open_csv(sp, ctx.chash) as fh:
        signal = read_signal(fh)
    values = signal[["log_rel_mean", "log_cv"]].to_numpy(float)
    scfg = sampler_config(ctx.cfg)
    cc = ctx.cfg["consensus"]
    ccfg = ConsensusConfig(int(cc["k"]), int(cc["l"]), float(cc["p_min"]))
    runs = run_chains(values, scfg, ccfg.k, workers=_workers(ctx.cfg))
    cps = consensus(runs, ccfg, calendar=pd.DatetimeIndex(signal["week_start"]))
    cps.meta = {"sampler": scfg.to_dict(), "window": [window["start"], window["end"]]}
    part = partition_epochs(cps, window["start"], window["end"])
    out = [ctx.path("detect", n) for n in ("changepoints.json", "posterior.csv", "epochs.json")]
    write_json(out[0], cps.to_dict(), ctx.chash)
    write_csv(out[1], cps.posterior_frame(), ctx.chash)
    write_json(out[2], {"partition": part.to_dict(), "epochs": part.table().to_dict(orient="records")},
               ctx.chash)
    return [sp, ctx.path("build-signal", "window.json")], out, {"n_changepoints": len(cps), "n_runs": ccfg.k}


def _partition(ctx: Context) -> tuple:
    p = ctx.need("detect", "epochs.json")
    return EpochPartition.from_dict(read_json(p, ctx.chash)["partition"]), p


def _scope_spec(ctx: Context, scope: str) -> FormulaSpec | None:
    over = ctx.cfg["epochs"].get(scope) or {}
    if not over:
        return None
    base = NEWS_ONLY_SPEC if scope == "news_only" else NEWS_AND_NONNEWS_SPEC
    return FormulaSpec(over.get("mean", base.mean), over.get("dispersion", base.dispersion),
                       over.get("parametrization", base.parametrization.value))


def _fit_epochs(ctx: Context):
    posts, outlets, inputs = _load_clean(ctx)
    part, pp = _partition(ctx)
    out, notes = [], {"fitted": [], "skipped": {}}
    for scope in ctx.cfg["epochs"]["scopes"]:
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                model = fit_epoch_model(posts, part, scope, outlets=outlets,
                                        floor=int(ctx.cfg["epochs"]["floor"]), spec=_scope_spec(ctx, scope))
        except InsufficientDataError as exc:
            notes["skipped"][scope] = str(exc)
            continue
        path = ctx.path("fit-epochs", f"model_{scope}.json")
        write_json(path, model.to_dict(), ctx.chash)
        out.append(path)
        notes["fitted"].append(scope)
        notes[scope] = {"converged": model.fit.converged, "n_obs": model.fit.n_obs}
    if not out:
        raise InsufficientDataError(f"no epoch model could be fitted: {notes['skipped']}")
    summary = ctx.path("fit-epochs", "summary.json")
    write_json(summary, notes, ctx.chash)
    return inputs + [pp], out + [summary], notes


def _infer(ctx: Context):
    summary_path = ctx.need("fit-epochs", "summary.json")
    summary = read_json(summary_path, ctx.chash)
    ic = ctx.cfg["inference"]
    inputs, out = [summary_path], []
    for scope in summary["fitted"]:
        mp = ctx.need("fit-epochs", f"model_{scope}.json")
        inputs.append(mp)
        model = EpochModel.from_dict(read_json(mp, ctx.chash))
        rep = run_inference(model, alpha=float(ctx.cfg["alpha"]), baseline_epochs=ic["baseline_epochs"],
                            post_epochs=ic["post_epochs"] or None,
                            total=tuple(str(e) for e in ic["total_effect"]) or None)
        paths = [ctx.path("infer", f"{n}_{scope}.{e}") for n, e in
                 (("inference", "json"), ("emm", "csv"), ("contrasts", "csv"))]
        write_json(paths[0], rep.to_dict(), ctx.chash)
        write_csv(paths[1], rep.emm.frame(), ctx.chash)
        write_csv(paths[2], rep.contrast_frame(), ctx.chash)
        out += paths
    return inputs, out, {"scopes": summary["fitted"]}


# --------------------------------------------------------------------- report

def _fmt(x, digits=2) -> str:
    if x is None or (isinstance(x, float) and not np.isfinite(x)):
        return "NA"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return f"{x:.{digits}f}"


def _pfmt(p) -> str:
    return "<0.001" if p < 0.001 else f"{p:.3f}"


def markdown_table(frame: pd.DataFrame) -> str:
    head = "| " + " | ".join(map(str, frame.columns)) + " |"
    sep = "|" + "|".join("---" for _ in frame.columns) + "|"
    rows = ["| " + " | ".join(map(str, r)) + " |" for r in frame.itertuples(index=False)]
    return "\n".join([head, sep] + rows)


def _report(ctx: Context):
    cp_path = ctx.need("detect", "changepoints.json")
    post_path = ctx.need("detect", "posterior.csv")
    ep_path = ctx.need("detect", "epochs.json")
    inf_manifest = ctx.need("infer", "manifest.json")
    cps = read_json(cp_path, ctx.chash)
    part = EpochPartition.from_dict(read_json(ep_path, ctx.chash)["partition"])
    posterior = read_csv(post_path, ctx.chash)
    with open(inf_manifest, encoding="utf-8") as fh:
        scopes = json.load(fh)["notes"]["scopes"]
    inputs = [cp_path, post_path, ep_path]
    lines = ["# Engagement shift report", "", f"Configuration hash: `{ctx.chash}`", "",
             "## Changepoints", ""]
    cp_rows = pd.DataFrame([{"index": c["index"], "date": c["timestamp"], "lower": c["lower_bound"],
                             "upper": c["upper_bound"], "height": _fmt(c["height"], 3)}
                            for c in cps["changepoints"]], columns=["index", "date", "lower", "upper", "height"])
    lines += [markdown_table(cp_rows) if len(cp_rows) else "No changepoint reached the threshold.", ""]
    epochs = part.table()
    lines += [f"## Epochs ({part.n_epochs})", "", markdown_table(epochs), ""]
    for scope in scopes:
        ip = ctx.need("infer", f"inference_{scope}.json")
        inputs.append(ip)
        rep = read_json(ip, ctx.chash)
        emm = pd.DataFrame(rep["emm"])
        lines += [f"## Estimated marginal means ({scope})", ""]
        t = pd.DataFrame({"group": emm["group"], "epoch": emm["epoch"], "mean": emm["mean"].map(_fmt),
                          "CI": [f"[{_fmt(a)}, {_fmt(b)}]" for a, b in zip(emm["ci_low"], emm["ci_high"])]})
        lines += [markdown_table(t), ""]
        con = pd.DataFrame(rep["contrasts"])
        if len(con):
            for kind, sub in con.groupby("kind", sort=False):
                lines += [f"### Contrasts: {kind} ({scope})", ""]
                t = pd.DataFrame({"group": sub["group"], "contrast": sub["contrast"],
                                  "ratio": sub["ratio"].map(_fmt),
                                  "CI": [f"[{_fmt(a)}, {_fmt(b)}]" for a, b in zip(sub["ci_low"], sub["ci_high"])],
                                  "z": sub["z"].map(_fmt), "p": sub["p_adjusted"].map(_pfmt)})
                lines += [markdown_table(t), ""]
        for name, test in rep["tests"].items():
            flag = " (pseudo-inverse)" if test["singular"] else ""
            lines += [f"- {name}: chi2({test['df']}) = {_fmt(test['statistic'])}, p = {_pfmt(test['p'])}{flag}"]
        if rep["tests"]:
            lines.append("")
    md = "\n".join(lines)
    out = [ctx.path("report", n) for n in ("report.md", "epochs.csv", "posterior_trace.csv")]
    with open(out[0], "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"<!-- config_hash={ctx.chash} -->\n{md}")
    write_csv(out[1], epochs, ctx.chash)
    marks = set(c["index"] for c in cps["changepoints"])
    trace = posterior.assign(changepoint=[int(i in marks) for i in posterior["week_index"]])
    write_csv(out[2], trace, ctx.chash)
    return inputs, out, {"n_epochs": part.n_epochs}


_RUNNERS = {"simulate": _simulate, "ingest": _ingest, "fit-preliminary": _fit_preliminary,
            "build-signal": _build_signal, "detect": _detect, "fit-epochs": _fit_epochs,
            "infer": _infer, "report": _report}
