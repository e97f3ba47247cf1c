"""Command-line entry point: one subcommand per study.

Exit codes: 0 when the study's property holds, 1 on a property failure or a
numerical divergence, 2 on a configuration error.
"""
from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path

from .analysis import write_csv
from .config import PRNG_NAME, STUDIES, ExperimentConfig, load_config
from .errors import ConfigurationError, PicardDivergence, QBSDEJError, StageError
from .studies import StudyResult, run_study

EXIT_PASS, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2


def _u64(text: str) -> int:
    try:
        v = int(text, 0)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="qbsdej", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="study", required=True, metavar="STUDY")
    for name in STUDIES:
        p = sub.add_parser(name, help=f"run the {name} study")
        p.add_argument("--config", required=True, type=Path, metavar="PATH", help="experiment JSON")
        p.add_argument("--out", type=Path, metavar="DIR", help="output directory (default: config output.dir or .)")
        p.add_argument("--seed", type=_u64, metavar="U64", help="override the config seed")
        p.add_argument("--quiet", action="store_true", help="suppress the stdout summary")
    return parser


def _jsonable(v):
    if isinstance(v, float) and not math.isfinite(v):
        return str(v)
    if isinstance(v, dict):
        return {k: _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if hasattr(v, "item"):
        return _jsonable(v.item())
    return v


def _divergence_report(exc: QBSDEJError) -> dict:
    cause = exc.cause if isinstance(exc, StageError) else exc
    out = {"error": type(exc).__name__, "message": str(exc)}
    if isinstance(exc, StageError):
        out["stage"] = exc.stage
    if isinstance(cause, PicardDivergence) and cause.trace is not None:
        out["trace"] = cause.trace.to_dict()
    return out


def write_artifacts(out_dir: Path, cfg: ExperimentConfig, result: StudyResult | None, summary: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    if result is not None:
        write_csv(out_dir / (cfg.output.csv or f"{result.study}.csv"), result.rows, result.columns)
    text = json.dumps(_jsonable(summary), indent=2, sort_keys=True)
    (out_dir / cfg.output.summary).write_text(text + "\n", encoding="utf-8")


def run_experiment(cfg: ExperimentConfig, out_dir: Path) -> tuple[int, dict]:
    base = {"study": cfg.study.kind, "prng": PRNG_NAME, "seed": cfg.seed}
    try:
        result = run_study(cfg)
    except ConfigurationError:
        raise
    except QBSDEJError as exc:
        summary = {**base, "pass": False, "key_metrics": {}, "divergence": _divergence_report(exc)}
        write_artifacts(out_dir, cfg, None, summary)
        return EXIT_FAIL, summary
    summary = {**base, "pass": bool(result.passed), "key_metrics": result.key_metrics}
    write_artifacts(out_dir, cfg, result, summary)
    return (EXIT_PASS if result.passed else EXIT_FAIL), summary


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        if cfg.study.kind != args.study:
            raise ConfigurationError(
                f"study.kind: config declares {cfg.study.kind!r} but subcommand is {args.study!r}"
            )
        if args.seed is not None:
            cfg = cfg.model_copy(update={"seed": args.seed})
        out_dir = args.out or Path(cfg.output.dir or ".")
        code, summary = run_experiment(cfg, out_dir)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"configuration error: cannot write output: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if not args.quiet:
        print(json.dumps(_jsonable(summary), indent=2, sort_keys=True))
    return code


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
