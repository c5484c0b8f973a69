"""Command-line entry point.

Every stage subcommand takes ``--config``, ``--stage-dir`` (overrides the
configured output root) and ``--seed``; ``pipeline`` runs all stages, resuming
completed ones. Logs go to standard error and ``--report`` writes a JSON
summary. Exit codes: 0 success, 2 bad configuration, 3 stage failure,
4 stage directory locked.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .config import ConfigError, PipelineConfig, dump_config, load_config
from .pipeline import STAGES, Locked, StageError, run_pipeline

EXIT_CONFIG = 2
EXIT_STAGE = 3
EXIT_LOCKED = 4


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="crossview", description="Cross-view LiDAR synthesis from annotated scans.")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in (*STAGES, "pipeline"):
        p = sub.add_parser(name, help="run all stages" if name == "pipeline" else f"run the {name} stage")
        p.add_argument("--config", type=Path, help="YAML configuration (defaults apply to missing keys)")
        p.add_argument("--stage-dir", type=Path, help="output root holding one directory per stage")
        p.add_argument("--seed", type=int, help="override the configured seed")
        p.add_argument("--report", type=Path, help="write a JSON run report here")
        p.add_argument("--force", action="store_true", help="re-run even if the stage is up to date")
    cfg = sub.add_parser("config", help="configuration utilities")
    cfg.add_argument("--dump-defaults", action="store_true", help="print the default configuration")
    return parser


def resolve_config(args) -> PipelineConfig:
    cfg = load_config(args.config) if args.config else PipelineConfig()
    if args.stage_dir is not None:
        cfg = replace(cfg, output_root=str(args.stage_dir))
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, stream=sys.stderr,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    log = logging.getLogger("crossview")
    if args.command == "config":
        sys.stdout.write(dump_config(PipelineConfig()))
        return 0
    try:
        cfg = resolve_config(args)
        stages = STAGES if args.command == "pipeline" else (args.command,)
        report = run_pipeline(cfg, stages, force=args.force)
        code = 0
    except ConfigError as exc:
        log.error("configuration error: %s", exc)
        report, code = {"error": f"[config] {exc}"}, EXIT_CONFIG
    except Locked as exc:
        log.error("%s", exc)
        report, code = {"error": str(exc)}, EXIT_LOCKED
    except StageError as exc:
        log.error("%s", exc)
        report, code = {"error": str(exc), "stage": exc.stage}, EXIT_STAGE
    report["exit_code"] = code
    if args.report is not None:
        args.report.parent.mkdir(parents=True, exist_ok=True)
        args.report.write_text(json.dumps(report, indent=1, sort_keys=True) + "\n")
    return code


if __name__ == "__main__":
    raise SystemExit(main())
