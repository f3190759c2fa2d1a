import argparse
import json
import sys
from typing import List, Optional

import structlog

from app.cli import dataset, evaluation, sampling, tomography, training
from app.cli.common import summary
from app.core.config import settings
from app.core.logging import setup_logging
from app.models.reports import ErrorResponse
from app.utils.exceptions import RNSDEException

EXIT_OK = 0
EXIT_INTERNAL = 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rnsde",
        description="Limited-angle CT reconstruction with a range-null space rectified mean-reverting SDE",
    )
    parser.add_argument("--version", action="version", version=f"{settings.app_name} {settings.app_version}")
    parser.add_argument("--log-level", default=None, help="Overrides RNSDE_LOG_LEVEL")
    subparsers = parser.add_subparsers(dest="command", required=True)

    # Command routers
    dataset.register(subparsers)
    tomography.register(subparsers)
    training.register(subparsers)
    sampling.register(subparsers)
    evaluation.register(subparsers)
    return parser


def _error_response(exc: RNSDEException) -> ErrorResponse:
    return ErrorResponse(error=exc.message, error_code=exc.error_code, details=exc.details)


def main(argv: Optional[List[str]] = None) -> int:
    """
    Parse, run one command, print its summary as JSON on stdout.

    Exit codes: 0 success, 2 usage, 3 missing dependency (checkpoint, input),
    4 numerical failure, 1 anything unexpected. Errors go to stderr as JSON.
    """
    parser = build_parser()
    args = parser.parse_args(argv)
    setup_logging(level=args.log_level)
    logger = structlog.get_logger()
    logger.info("command_started", command=args.command_name, version=settings.app_version)

    try:
        report = args.handler(args)
    except RNSDEException as exc:
        logger.error(
            "command_failed",
            command=args.command_name,
            error=exc.message,
            error_code=exc.error_code,
            details=exc.details,
        )
        print(_error_response(exc).model_dump_json(), file=sys.stderr)
        return exc.exit_code
    except Exception as exc:
        logger.error("unhandled_exception", command=args.command_name, error=str(exc), exc_info=True)
        payload = ErrorResponse(error="An unexpected error occurred", error_code="INTERNAL_ERROR")
        print(payload.model_dump_json(), file=sys.stderr)
        return EXIT_INTERNAL

    print(json.dumps(summary(report), sort_keys=True, default=str))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
