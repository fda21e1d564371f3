"""
Logging configuration for TDANet Desk.
Provides centralized logging setup.
"""

import logging
import os
import sys
from typing import Optional, Union


def _resolve_level(level: Optional[Union[int, str]]) -> int:
    """Turn a level name, number or None (env lookup) into a logging level."""
    if level is None:
        level = os.getenv("TDANET_LOG_LEVEL", logging.INFO)
    if isinstance(level, str):
        if level.isdigit():
            return int(level)
        resolved = logging.getLevelName(level.upper())
        return resolved if isinstance(resolved, int) else logging.INFO
    return int(level)


def setup_logger(name: str = "TDANet-Desk", level: Optional[Union[int, str]] = None) -> logging.Logger:
    """
    Set up and configure the package logger.

    Args:
        name: Logger name
        level: Logging level; defaults to $TDANET_LOG_LEVEL or INFO

    Returns:
        Configured logger instance
    """
    logger = logging.getLogger(name)

    # Avoid adding handlers multiple times
    if logger.handlers:
        return logger

    resolved = _resolve_level(level)
    logger.setLevel(resolved)

    console_handler = logging.StreamHandler(sys.stderr)
    console_handler.setLevel(resolved)

    formatter = logging.Formatter(
        '%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        datefmt='%Y-%m-%d %H:%M:%S'
    )
    console_handler.setFormatter(formatter)
    logger.addHandler(console_handler)

    return logger


def set_verbosity(verbose: bool) -> None:
    """Switch the package logger (and its handlers) between INFO and DEBUG."""
    level = logging.DEBUG if verbose else _resolve_level(None)
    logger.setLevel(level)
    for handler in logger.handlers:
        handler.setLevel(level)


# Create default logger instance
logger = setup_logger()
