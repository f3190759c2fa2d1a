import logging
import sys

import structlog

from app.core.config import settings


def _stderr_logger(*args):
    """Logs go to stderr so stdout stays free for machine-readable command output"""
    return structlog.WriteLogger(sys.stderr)


def setup_logging(level: str = None, json_output: bool = None):
    """Configure structured logging"""
    level_name = (level or settings.log_level).upper()
    numeric_level = getattr(logging, level_name, logging.INFO)
    use_json = settings.log_json if json_output is None else json_output

    timestamper = structlog.processors.TimeStamper(fmt="iso")
    renderer = (
        structlog.processors.JSONRenderer()
        if use_json
        else structlog.dev.ConsoleRenderer(colors=False)
    )

    structlog.configure(
        processors=[
            structlog.contextvars.merge_contextvars,
            structlog.processors.add_log_level,
            timestamper,
            structlog.processors.StackInfoRenderer(),
            structlog.processors.format_exc_info,
            renderer,
        ],
        wrapper_class=structlog.make_filtering_bound_logger(numeric_level),
        # stderr is looked up per logger so redirected streams (pytest capture) are honoured
        logger_factory=_stderr_logger,
        cache_logger_on_first_use=False,
    )

    # Configure standard library logging to use structlog
    logging.basicConfig(
        format="%(message)s",
        stream=sys.stderr,
        level=numeric_level,
    )


def bind_run_context(**fields):
    """Attach run-scoped fields (command, run_dir, seed) to every log line"""
    structlog.contextvars.clear_contextvars()
    structlog.contextvars.bind_contextvars(**fields)
