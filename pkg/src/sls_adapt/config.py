import logging
import os
from pathlib import Path

LP_METHODS = ("highs", "simplex")


def _get_env_var(name: str, default: str) -> str:
    """
    Retrieves an environment variable, returning a default if not set.
    Raises ValueError if the environment variable is set to an empty string.
    """
    value = os.environ.get(name, default)
    if value == "":
        raise ValueError(f"{name} environment variable cannot be an empty string.")
    return value


def get_output_dir() -> Path:
    """
    Returns the default directory that `run` writes traces into.

    - Defaults to "./runs".
    - Can be overridden by the SLS_ADAPT_OUTPUT_DIR environment variable.
    """
    return Path(_get_env_var("SLS_ADAPT_OUTPUT_DIR", "runs"))


def get_lp_method() -> str:
    """
    Returns the LP backend used when a caller does not pick one.

    - Defaults to "highs" (scipy's HiGHS interface).
    - "simplex" selects the built-in two-phase tableau solver.
    - Can be overridden by the SLS_ADAPT_LP_METHOD environment variable.
    """
    method = _get_env_var("SLS_ADAPT_LP_METHOD", "highs").lower()
    if method not in LP_METHODS:
        raise ValueError(
            f"SLS_ADAPT_LP_METHOD must be one of {', '.join(LP_METHODS)}, "
            f"got {method!r}."
        )
    return method


def get_log_level() -> int:
    """
    Returns the numeric log level for the command line.

    - Defaults to "WARNING".
    - Can be overridden by the SLS_ADAPT_LOG_LEVEL environment variable.
    """
    name = _get_env_var("SLS_ADAPT_LOG_LEVEL", "WARNING").upper()
    level = logging.getLevelName(name)
    if not isinstance(level, int):
        raise ValueError(f"SLS_ADAPT_LOG_LEVEL has unknown level {name!r}.")
    return level


def get_workers() -> int:
    """
    Returns the thread count used to solve per-node synthesis problems.

    - Defaults to 1 (sequential).
    - Can be overridden by the SLS_ADAPT_WORKERS environment variable.
    """
    raw = _get_env_var("SLS_ADAPT_WORKERS", "1")
    try:
        workers = int(raw)
    except ValueError as e:
        raise ValueError(f"SLS_ADAPT_WORKERS must be an integer, got {raw!r}.") from e
    if workers < 1:
        raise ValueError("SLS_ADAPT_WORKERS must be at least 1.")
    return workers
