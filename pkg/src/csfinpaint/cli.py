"""
Command-line entry point.

    csfinpaint --config run.yaml --stage train --seed 3 --device cuda:0

Exit codes: 0 success, 1 configuration/manifest validation error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from .config import STAGES, ConfigError, read_manifest, validate_config
from .pipeline import StageError, run_stage

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2
DEVICE_ENV = "CSFINPAINT_DEVICE"


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="csfinpaint", description="3D GAN inpainting of brain MRI.")
    p.add_argument("--config", required=True, help="YAML pipeline configuration")
    p.add_argument("--stage", choices=STAGES, help="stage to run (overrides the config)")
    p.add_argument("--seed", type=int, help="global seed (overrides the config)")
    p.add_argument("--device", help=f"torch device; defaults to ${DEVICE_ENV} or the config value")
    p.add_argument("--overwrite", action="store_true", default=None,
                   help="replace an existing stage output directory")
    p.add_argument("--print-config", action="store_true", help="print the resolved config and exit")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    overrides = {"stage": args.stage, "seed": args.seed, "overwrite": args.overwrite,
                 "device": args.device or os.environ.get(DEVICE_ENV)}
    try:
        cfg = validate_config(args.config, overrides)
        read_manifest(cfg.manifest)
    except ConfigError as exc:
        for e in exc.errors:
            print(f"config error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except ValueError as exc:
        print(f"manifest error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION

    if args.print_config:
        print(json.dumps(cfg.resolved(), indent=2))
        return EXIT_OK
    try:
        artifacts = run_stage(cfg)
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001 - any stage failure maps to the runtime exit code
        logging.getLogger("csfinpaint").debug("stage failed", exc_info=True)
        print(f"error: stage {cfg.stage} failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    print(json.dumps({"stage": cfg.stage, "artifacts": artifacts}, indent=2, default=str))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
