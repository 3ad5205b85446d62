"""
log.py: logging utilities
"""

import logging
import os
import time
import traceback

from collections.abc import Callable
from functools import wraps
from typing import Any, TypeVar
from uuid import uuid4

import numpy as np

R = TypeVar("R")

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


def _describe(a: Any) -> str:
    """
    Short string for a log record: arrays by shape, everything else by str
    """
    if isinstance(a, np.ndarray):
        return f"ndarray{a.shape}"
    text = str(a)
    return text if len(text) <= 200 else text[:197] + "..."


def logged(f: Callable[..., R]) -> Callable[..., R]:
    """
    Decorator that logs start and end/error of function call
    """
    logger = logging.getLogger(f.__module__)

    @wraps(f)
    def wrapper(*args: Any, **kwargs: Any) -> R:
        call_id = str(uuid4())
        details: dict[str, Any] = {
            "couplet": call_id,
            "event": "called",
            "call_args": [_describe(a) for a in args],
            "call_kwargs": {str(k): _describe(v) for k, v in kwargs.items()},
        }
        logger.debug(f"{f.__name__} called", extra=details)
        start = time.perf_counter()
        try:
            result = f(*args, **kwargs)
        except Exception as err:
            details["event"] = "failed"
            details["error"] = f"{type(err).__name__}: {err}"
            details["tb"] = traceback.format_exc()
            logger.info(f"{f.__name__} failed: {details['error']}", extra=details)
            raise
        details["event"] = "returned"
        details["seconds"] = round(time.perf_counter() - start, 6)
        details["result"] = type(result).__name__
        logger.debug(f"{f.__name__} returned {details['result']}", extra=details)
        return result

    return wrapper


def configure_logging(level: str | None = None) -> None:
    """
    Root logger setup for the command line; Sentry joins in when SENTRY_DSN is set
    """
    name = (level or os.getenv("ISEARCH_LOG_LEVEL", "WARNING")).upper()
    logging.basicConfig(level=getattr(logging, name, logging.WARNING), format=LOG_FORMAT)

    sentry_dsn = os.getenv("SENTRY_DSN", "")
    if not sentry_dsn:
        return None

    from sentry_sdk import init as sentry_init
    from sentry_sdk.integrations.logging import LoggingIntegration

    sentry_logging = LoggingIntegration(
        level=logging.INFO,
        event_level=logging.WARNING,
    )
    sentry_init(
        dsn=sentry_dsn,
        integrations=[sentry_logging],
        traces_sample_rate=float(os.getenv("SENTRY_TRACES_SAMPLE_RATE", 1.0)),
        environment=os.getenv("SENTRY_ENVIRONMENT", "isearch"),
    )
    return None
