"""Command-line entry point: ``engshift <stage> --config pipeline.toml``.

On failure a single JSON line ``{"error_class", "exit_code", "message"}``
is written to stderr and the process exits with the class's code.
"""

from __future__ import annotations

import argparse
import json
import sys
import warnings

from .changepoint import SignalError
from .config import ConfigError, load_config
from .design import FormulaError
from .inference import EstimabilityError, NotConvergedError
from .ingestion import InsufficientDataError, SchemaError, SingularDesignError
from .pipeline import STAGES, DependencyError, ProvenanceError, run_stage

EXIT_CODES = (
    (ConfigError, 2),
    (DependencyError, 3),
    (ProvenanceError, 4),
    (SignalError, 5),
    (SchemaError, 5),
    (InsufficientDataError, 5),
    (SingularDesignError, 5),
    (FormulaError, 5),
    (EstimabilityError, 5),
    (NotConvergedError, 6),
)


def exit_code(exc: BaseException) -> int:
    for cls, code in EXIT_CODES:
        if isinstance(exc, cls):
            return code
    return 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="engshift", description="Engagement shift analysis pipeline.")
    sub = parser.add_subparsers(dest="stage", required=True, metavar="stage")
    for stage in STAGES:
        p = sub.add_parser(stage, help=f"run the {stage} stage")
        p.add_argument("--config", "-c", help="TOML configuration file")
        p.add_argument("--output", "-o", help="output folder (overrides paths.output)")
        p.add_argument("--seed", type=int, help="random seed (overrides config and ENGSHIFT_SEED)")
        p.add_argument("--workers", type=int, help="parallel sampler processes (0 = all cores)")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override any configuration key, e.g. consensus.k=200")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        overrides = list(args.set)
        if args.output is not None:
            overrides.append(("paths.output", args.output))
        if args.seed is not None:
            overrides.append(("seed", args.seed))
        if args.workers is not None:
            overrides.append(("runtime.workers", args.workers))
        cfg = load_config(args.config, overrides)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            manifest = run_stage(args.stage, cfg)
    except Exception as exc:  # noqa: BLE001 - every failure becomes a machine-readable line
        code = exit_code(exc)
        print(json.dumps({"error_class": type(exc).__name__, "exit_code": code, "stage": args.stage,
                          "message": str(exc)}), file=sys.stderr)
        return code
    print(json.dumps({"stage": args.stage, "config_hash": manifest["config_hash"],
                      "outputs": sorted(manifest["outputs"]), "notes": manifest["notes"]}))
    return 0


if __name__ == "__main__":
    sys.exit(main())
