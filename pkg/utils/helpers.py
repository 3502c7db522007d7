"""Utility functions for rigidtrack."""

import logging
import os
from typing import Iterable, List

import numpy as np
import torch

from core.config import LogLevel, get_log_level_name

_LEVELS = {
    LogLevel.ERROR.value: logging.ERROR,
    LogLevel.WARN.value: logging.WARNING,
    LogLevel.INFO.value: logging.INFO,
    LogLevel.DEBUG.value: logging.DEBUG,
}


def setup_logging(level=logging.INFO):
    """
    Set up logging configuration.

    Args:
        level: Logging level
    """
    logging.basicConfig(
        level=level,
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
    )


def log_level_from_env() -> int:
    """
    Map RIGIDTRACK_LOG onto a logging level.

    Returns:
        int: logging level, INFO when the variable is unset or unknown
    """
    raw = os.getenv("RIGIDTRACK_LOG")
    name = get_log_level_name()
    if raw is not None and raw.strip().lower() != name:
        logging.getLogger(__name__).warning(
            "Unknown RIGIDTRACK_LOG value %r, using %s", raw, name)
    return _LEVELS[name]


def format_error_message(operation: str, error: Exception) -> str:
    """
    Format a consistent error message.

    Args:
        operation: Name of the operation that failed
        error: The exception that occurred

    Returns:
        Formatted error message
    """
    return f"Error during {operation}: {str(error)}"


def configure_threads(threads: int, deterministic: bool = True) -> None:
    """
    Set the torch worker-thread count.

    Args:
        threads: Number of intra-op threads
        deterministic: Request deterministic kernels (fixed reduction order)
    """
    torch.set_num_threads(max(1, int(threads)))
    torch.use_deterministic_algorithms(deterministic)


def grid_indices(count: int, rows: int, cols: int) -> np.ndarray:
    """
    Spread rows×cols indices evenly over range(count), row-major.

    Args:
        count: Number of items to pick from
        rows: Grid rows
        cols: Grid columns

    Returns:
        rows×cols integer array
    """
    picks = np.linspace(0, count - 1, rows * cols).round().astype(int)
    return picks.reshape(rows, cols)


def format_table_row(columns: Iterable[str], widths: List[int]) -> str:
    """
    Format a table row with proper column widths.

    Args:
        columns: Column values
        widths: Column widths

    Returns:
        Formatted table row
    """
    columns = list(columns)
    if len(columns) != len(widths):
        raise ValueError("Number of columns must match number of widths")

    formatted_cols = []
    for col, width in zip(columns, widths):
        if len(col) > width:
            col = col[:width-3] + "..."
        formatted_cols.append(col.ljust(width))

    return "| " + " | ".join(formatted_cols) + " |"
