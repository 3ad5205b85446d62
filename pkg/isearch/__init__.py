from .core import run_isearch  # noqa: F401
from .innovation_solver import solve_all  # noqa: F401


__version__ = "0.1.0"
