"""
Command-line entry point for the ZeroSlide benchmark harness.

    python main.py generate --config plan.cfg --out data/
    python main.py run --config plan.cfg [--out results/] [--workers 4] [--resume]
    python main.py report --out results/
    python main.py validate data/embeddings.zslb data/prototypes.zslp
"""
import argparse
import sys
from pathlib import Path
from typing import List, Optional

from scripts.config import parse_config
from scripts.embedding_io import validate_file
from scripts.error_handling import EXIT_CONFIG, EXIT_OK, check_file_path, handle_error
from scripts.logger import get_logger, setup_logging
from scripts.report import emit_report
from scripts.version import __version__
from scripts.workers import generate_inputs, run_experiment

# Get logger for this module
logger = get_logger(__name__)

LOG_LEVELS = ("DEBUG", "INFO", "WARNING", "ERROR")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="zeroslide-bench",
        description="Lifelong-learning benchmark for bagged slide embeddings",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--log-level", choices=LOG_LEVELS, default="INFO", help="console log level")
    parser.add_argument("--quiet", action="store_true", help="no progress bar")
    verbs = parser.add_subparsers(dest="verb", required=True)

    generate = verbs.add_parser("generate", help="write synthetic ZSLB/ZSLP files")
    generate.add_argument("--config", required=True, help="run configuration file")
    generate.add_argument("--out", required=True, help="directory for the generated files")

    run = verbs.add_parser("run", help="execute every (method, fold, seed) triple of a plan")
    run.add_argument("--config", required=True, help="run configuration file")
    run.add_argument("--out", help="results directory (default: run.output_dir)")
    run.add_argument("--workers", type=int, help="worker processes (default: run.workers)")
    run.add_argument("--resume", action="store_true", help="skip triples already complete and intact")

    report = verbs.add_parser("report", help="summary table and confidence plots")
    report.add_argument("--out", required=True, help="results directory of a finished run")

    validate = verbs.add_parser("validate", help="check ZSLB/ZSLP/ZSLM/ZSLR files")
    validate.add_argument("files", nargs="+", help="files to check")
    return parser


def _config_path(path: str) -> Path:
    ok, message = check_file_path(path, check_exists=True, check_readable=True)
    if not ok:
        raise FileNotFoundError(message)
    return Path(path)


def cmd_generate(args) -> int:
    plan = parse_config(_config_path(args.config))
    embeddings, prototypes = generate_inputs(plan, args.out)
    print(embeddings)
    print(prototypes)
    return EXIT_OK


def cmd_run(args) -> int:
    plan = parse_config(_config_path(args.config))
    if args.workers is not None and args.workers < 1:
        logger.error("--workers must be positive, got %d", args.workers)
        return EXIT_CONFIG
    artifact = run_experiment(plan, args.out, args.workers, resume=args.resume, quiet=args.quiet)
    print(artifact.results_csv)
    return artifact.exit_code


def cmd_report(args) -> int:
    artifact = emit_report(args.out)
    print(artifact.summary.read_text(encoding="utf-8"), end="")
    return EXIT_OK


def cmd_validate(args) -> int:
    worst = EXIT_OK
    for path in args.files:
        try:
            print(validate_file(path))
        except Exception as e:
            worst = max(worst, handle_error(e, path))
    return worst


COMMANDS = {
    "generate": cmd_generate,
    "run": cmd_run,
    "report": cmd_report,
    "validate": cmd_validate,
}


def _log_dir(args) -> Optional[Path]:
    if args.verb == "validate":
        return None
    if args.verb == "run" and not args.out:
        try:
            return Path(parse_config(args.config).output_dir) / "logs"
        except Exception:
            return None
    return Path(args.out) / "logs"


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    setup_logging(_log_dir(args), args.log_level)
    logger.debug("zeroslide-bench %s: %s", __version__, args.verb)
    try:
        return COMMANDS[args.verb](args)
    except FileNotFoundError as e:
        logger.error(str(e))
        return EXIT_CONFIG
    except Exception as e:
        return handle_error(e, args.verb)


if __name__ == "__main__":
    sys.exit(main())
