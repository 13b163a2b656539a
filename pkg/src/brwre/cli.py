"""Command line: ``brwre <command> [--config FILE] [--set key=value ...]``.

Exit codes: 0 success or check passed, 1 check failed, 2 configuration
error, 3 runtime error.  Errors are reported as one JSON object on stderr.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .checks import CHECKS
from .config import ConfigError, ExperimentConfig
from .engine import PopulationCapExceeded
from . import harness

EXIT_OK, EXIT_FAILED, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2, 3


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="brwre", description=__doc__.splitlines()[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="experiment config (JSON)")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key, dotted for nested keys; repeatable")
    common.add_argument("--out", type=Path, help="output directory (overrides output_dir)")
    common.add_argument("--workers", type=int, help="worker processes (overrides workers)")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("simulate", parents=[common], help="write replica trajectories as JSONL")
    sub.add_parser("estimate-means", parents=[common], help="estimate the mean series")
    sub.add_parser("sigma-tail", parents=[common], help="estimate the hitting-time survival curve")
    sub.add_parser("select", parents=[common], help="select the subsequence from cached estimates")
    v = sub.add_parser("verify", parents=[common], help="run one named check")
    v.add_argument("check", choices=CHECKS)
    sub.add_parser("pipeline", parents=[common], help="run the full chain")
    sub.add_parser("tightness", parents=[common], help="tightness report for the cached selection")
    return p


def _error(kind: str, message: str, **extra) -> None:
    print(json.dumps({"error": kind, "message": message, **extra}, sort_keys=True), file=sys.stderr)


def _emit(doc) -> None:
    print(json.dumps(harness.clean(doc), sort_keys=True))


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    overrides = list(args.overrides)
    if args.out is not None:
        overrides.append(f"output_dir={json.dumps(str(args.out))}")
    if args.workers is not None:
        overrides.append(f"workers={args.workers}")
    try:
        cfg = ExperimentConfig.load(args.config, overrides)
    except ConfigError as exc:
        _error("config", str(exc))
        return EXIT_CONFIG
    out = cfg.output_dir()
    try:
        out.mkdir(parents=True, exist_ok=True)
        cmd = args.command
        if cmd == "simulate":
            _emit(harness.cmd_simulate(cfg, out))
        elif cmd == "estimate-means":
            s = harness.stage_means(cfg, out)
            _emit({"grid": s.grid, "mean": s.mean, "stderr": s.stderr})
        elif cmd == "sigma-tail":
            c = harness.stage_sigma(cfg, out)
            _emit(c.to_dict())
        elif cmd == "select":
            series = harness.load_series(out) if (out / "means.json").exists() else harness.stage_means(cfg, out)
            C1 = harness.load_C1(out) if (out / "survival.json").exists() else harness.stage_sigma(cfg, out).C1_hat
            sel = harness.stage_select(cfg, series, C1, out)
            _emit(sel.final.to_dict())
        elif cmd == "tightness":
            series = harness.load_series(out)
            sel = harness.load_selection(out, series)
            _emit(harness.stage_tightness(cfg, sel, series, out).summary())
        elif cmd == "pipeline":
            _emit(harness.cmd_pipeline(cfg, out))
        elif cmd == "verify":
            res = harness.cmd_verify(cfg, args.check, out)
            _emit(res)
            return EXIT_OK if res["pass"] else EXIT_FAILED
    except PopulationCapExceeded as exc:
        _error("population_cap", str(exc), replica=exc.replica)
        return EXIT_RUNTIME
    except harness.StageError as exc:
        cause = exc.cause
        kind = "population_cap" if isinstance(cause, PopulationCapExceeded) else "runtime"
        _error(kind, str(exc), stage=exc.stage)
        return EXIT_RUNTIME
    except FileNotFoundError as exc:
        _error("missing_artifact", str(exc))
        return EXIT_RUNTIME
    except (OSError, ValueError, RuntimeError) as exc:
        _error("runtime", str(exc))
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
