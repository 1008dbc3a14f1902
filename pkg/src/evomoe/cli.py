"""Command line: ``evomoe {run, ablate, verify-checkpoint, gen-data}``.

Exit codes: 0 success, 1 configuration error, 2 runtime failure,
3 a check did not pass (checkpoint mismatch, ``ablate --check``).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import load_config
from .errors import CheckpointError, ConfigError
from .taskgen import generate_stream, save_stream, verify_stream

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_CHECK = 0, 1, 2, 3


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="experiment JSON (defaults apply when omitted)")
    p.add_argument("--seed", type=int, help="override the master seed")
    p.add_argument("--out", help="output directory (overrides the config)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="evomoe", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("run", help="train and evaluate the task stream")
    _common(p)
    p.add_argument("--toggles", help="comma-separated toggles, e.g. no_add,top2")
    p.add_argument("--resume", action="store_true", help="continue from the latest stage checkpoint in --out")

    p = sub.add_parser("ablate", help="run the ablation grid with shared seeds")
    _common(p)
    p.add_argument("--toggles", help="rows to run, e.g. no_add,no_prune,no_lb+top2 (default: full grid)")
    p.add_argument("--check", action="store_true", help="exit 3 unless the full configuration has the best Last")

    p = sub.add_parser("verify-checkpoint", help="reload a checkpoint and reproduce its recorded evaluation")
    p.add_argument("path")

    p = sub.add_parser("gen-data", help="write the task stream as a dataset bundle")
    _common(p)
    return parser


def _load(args):
    cfg = load_config(args.config)
    if args.seed is not None:
        if args.seed < 0:
            raise ConfigError("--seed must be non-negative")
        cfg.seed = args.seed
        cfg.provenance["seed"] = "override"
    if getattr(args, "out", None):
        cfg.out = args.out
        cfg.provenance["out"] = "override"
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.verb == "verify-checkpoint":
            from .experiment import verify_checkpoint

            rep = verify_checkpoint(args.path)
            print(json.dumps(rep.__dict__, indent=2))
            print("checkpoint OK" if rep.ok else "checkpoint MISMATCH")
            return EXIT_OK if rep.ok else EXIT_CHECK

        cfg = _load(args)
        if args.verb == "gen-data":
            stream = generate_stream(**cfg.stream_kwargs())
            out = Path(cfg.out)
            path = out if out.suffix == ".npz" else out / "dataset.npz"
            path.parent.mkdir(parents=True, exist_ok=True)
            save_stream(stream, path)
            report = verify_stream(stream)
            print(json.dumps({"path": str(path), "checks": report.checks, "failures": report.failures}, indent=2))
            return EXIT_OK if report.ok else EXIT_CHECK

        from .experiment import run_ablation, run_experiment

        if args.verb == "run":
            if args.toggles:
                cfg = cfg.with_toggles(args.toggles)
            m = run_experiment(cfg, resume=args.resume)
            print(json.dumps({k: m["metrics"][k]["overall"] for k in ("transfer", "avg", "last")}, indent=2))
            print(f"reports written to {cfg.out}")
            return EXIT_OK

        if args.verb == "ablate":
            from .experiment import parse_rows

            parse_rows(args.toggles)  # reject bad or conflicting toggles before any compute
            rep = run_ablation(cfg, rows=args.toggles)
            for name, r in rep["rows"].items():
                print(f"{name:18s} last {r['last']:.4f}  delta {r['delta_last']:+.4f}")
            if args.check and not rep["full_is_best_last"]:
                print("check failed: an ablated row matches or beats the full configuration's Last", file=sys.stderr)
                return EXIT_CHECK
            return EXIT_OK
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001 - top-level reporter
        logging.getLogger("evomoe").debug("failure", exc_info=True)
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
