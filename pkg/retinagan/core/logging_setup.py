#!/usr/bin/env python3
"""
Logging configuration shared by the CLI and the benchmark runner.
"""

import logging
import os
from typing import Optional

LOG_FORMAT = '%(asctime)s - %(levelname)s - %(message)s'


def setup_logging(log_file: Optional[str] = None, level: str = "INFO") -> logging.Logger:
    """
    Configure root logging with a console handler and an optional log file.

    Args:
        log_file: Path of a log file to append to (directories are created)
        level: Logging level name

    Returns:
        The root logger
    """
    handlers = [logging.StreamHandler()]
    if log_file:
        log_dir = os.path.dirname(os.path.abspath(log_file))
        os.makedirs(log_dir, exist_ok=True)
        handlers.append(logging.FileHandler(log_file))

    logging.basicConfig(
        level=getattr(logging, level.upper(), logging.INFO),
        format=LOG_FORMAT,
        handlers=handlers,
        force=True,
    )
    return logging.getLogger()
