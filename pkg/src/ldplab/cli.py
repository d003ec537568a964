"""Command line entry point: ``ldplab run|report|audit``."""

from __future__ import annotations

import argparse
import json
import sys

from .experiments import ConfigError, RunError, dumps, report, run
from .framework import SineSampler, audit_assumptions
from .models import MODEL_REGISTRY, ModelRejected, make_model


def _error(kind: str, message: str, details=()) -> int:
    record = {"error": kind, "message": message, "details": [{"location": k, "message": m} for k, m in details]}
    sys.stderr.write(json.dumps(record, sort_keys=True) + "\n")
    return 2


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="ldplab", description="Small-time large deviation experiments.")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="execute an experiment config (TOML) or a run manifest (JSON)")
    p_run.add_argument("config")
    p_run.add_argument("--output", help="output directory (overrides output.directory)")

    p_rep = sub.add_parser("report", help="summarize a finished run directory")
    p_rep.add_argument("run_dir")

    p_aud = sub.add_parser("audit", help="audit a registered model's assumptions")
    p_aud.add_argument("model", choices=sorted(MODEL_REGISTRY))
    p_aud.add_argument("--n", type=int, default=1000)
    p_aud.add_argument("--seed", type=int, default=0)
    p_aud.add_argument("--amplitude", type=float, default=1.0)

    args = parser.parse_args(argv)
    try:
        if args.command == "run":
            manifest = run(args.config, args.output)
            print(f"{manifest['kind']} run complete: {len(manifest['files'])} files, "
                  f"config {manifest['config_hash'][:12]}")
            return 0
        if args.command == "report":
            text, csv_text = report(args.run_dir)
            print(text, end="")
            print()
            print(csv_text, end="")
            return 0
        model = make_model(args.model)
        rep = audit_assumptions(model, SineSampler(amplitude=args.amplitude), args.n, seed=args.seed)
        print(dumps(rep.to_dict()), end="")
        return 0 if rep.passed else 1
    except ConfigError as err:
        return _error("config", str(err), err.details)
    except ModelRejected as err:
        return _error("model_rejected", str(err))
    except RunError as err:
        return _error("run", str(err))
    except (ValueError, RuntimeError) as err:
        return _error("runtime", f"{type(err).__name__}: {err}")


if __name__ == "__main__":
    sys.exit(main())
