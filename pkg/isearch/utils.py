"""
utils.py: miscellaneous helpers used across the package

Environment loading, JSON encoding of numpy objects, and the exception
hierarchy raised by the numerical modules.
"""

import json
import logging
import os

from typing import Any

import numpy as np

from dotenv import load_dotenv
from pydantic import BaseModel

from .typed import JSON

TRUES = {"true", "1", "y", "yes"}

INSTALLED_ENV = "~/.isearch/.env"


class IsearchError(Exception):
    """
    Base class for every error raised on purpose by this package
    """

    pass


class InvalidInput(IsearchError, ValueError):
    """
    Input matrix or parameter is unusable (non-finite, out of range, ...)
    """

    pass


class ZeroColumn(InvalidInput):
    """
    A column is too small to be normalised
    """

    def __init__(self, index: int, norm: float = 0.0) -> None:
        self.index = index
        self.norm = norm
        super().__init__(f"Column {index} has norm {norm:.3g}, cannot normalise")


class InvalidSpec(IsearchError, ValueError):
    """
    A data model is infeasible (dimensions do not fit)
    """

    pass


class Unconverged(IsearchError):
    """
    ADMM hit its iteration cap; the last iterate is kept on the exception

    For a single problem `direction`/`objective` are set, for a batch
    `partial` holds the whole DirectionSet and `columns` the failures.
    """

    def __init__(
        self,
        message: str,
        columns: list[int],
        residuals: dict[str, float],
        direction: Any = None,
        objective: float | None = None,
        partial: Any = None,
    ) -> None:
        self.columns = columns
        self.residuals = residuals
        self.direction = direction
        self.objective = objective
        self.partial = partial
        super().__init__(message)


class SizeLimit(IsearchError):
    """
    Problem too large for the exact reference solver
    """

    pass


class RankDeficient(IsearchError):
    """
    Not enough independent columns to span the requested dimension
    """

    def __init__(self, achieved: int, required: int) -> None:
        self.achieved = achieved
        self.required = required
        msg = f"Found only {achieved} independent columns, {required} required"
        super().__init__(msg)


class IsolatedNode(IsearchError):
    """
    A node of the affinity graph has degree zero
    """

    def __init__(self, index: int) -> None:
        self.index = index
        super().__init__(f"Node {index} has no affinity to any other node")


class CustomEncoder(json.JSONEncoder):
    """
    numpy scalars and arrays as plain JSON numbers and lists
    """

    def default(self, obj: Any) -> JSON:
        if isinstance(obj, np.ndarray):
            return obj.tolist()
        if isinstance(obj, np.bool_):
            return bool(obj)
        if isinstance(obj, (np.integer, np.floating)):
            return obj.item()
        if isinstance(obj, BaseModel):
            return obj.model_dump(mode="json")
        fallback: JSON = json.JSONEncoder.default(self, obj)
        return fallback


def load_env() -> None:
    """
    Load .env from ~/.isearch/.env if present, otherwise from current dir/dotenv defaults
    """
    installed_path = os.path.expanduser(INSTALLED_ENV)
    if os.path.isfile(installed_path):
        try:
            load_dotenv(installed_path, override=False)
            logging.debug(f"Loaded .env from {installed_path}")
            return None
        except Exception as err:
            logging.warning(f"Could not load {installed_path}: {err}")
    load_dotenv(override=False)
    return None


def env_float(name: str, default: float) -> float:
    return float(os.getenv(name, default))


def env_int(name: str, default: int) -> int:
    return int(os.getenv(name, default))


def env_flag(name: str, default: bool) -> bool:
    raw = os.getenv(name)
    if raw is None:
        return default
    return raw.strip().lower() in TRUES
