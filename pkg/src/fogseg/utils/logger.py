"""
fogseg Logger Module
-------------------------------------------

This module configures JSON-formatted logging for fogseg runs. Each CLI invocation produces
its own timestamped log file, and log records are written as one-line JSON entries with the
following core fields:

  - timestamp: ISO-formatted datetime string when the event occurred
  - level:     logging level name (DEBUG, INFO, WARNING, ERROR, CRITICAL)
  - logger:    the name of the logger that emitted the record
  - message:   the formatted log message

Any extra attributes you attach to log calls (via the `extra=` argument) are automatically
included in the JSON payload under their own keys.

Usage:
    from fogseg.utils.logger import get_logger

    logger = get_logger(__name__)
    logger.info("Epoch finished", extra={"operation": "train_seg", "epoch": 3, "loss": 0.41})

Importing the package never touches the filesystem: the root ``fogseg`` logger only carries
a NullHandler until ``setup_logger`` is called (the CLI does this once per invocation).
"""

import json
import logging
import sys
from datetime import datetime
from logging.handlers import RotatingFileHandler
from pathlib import Path
from typing import Optional

ROOT_LOGGER = 'fogseg'

_BUILTIN_ATTRS = {
    "name", "msg", "args", "levelname", "levelno",
    "pathname", "filename", "module", "exc_info",
    "exc_text", "stack_info", "lineno", "funcName",
    "created", "msecs", "relativeCreated", "thread",
    "threadName", "processName", "process", "taskName",
}


class JsonFormatter(logging.Formatter):
    def format(self, record: logging.LogRecord) -> str:
        payload = {
            "timestamp": self.formatTime(record, self.datefmt),
            "level":     record.levelname,
            "logger":    record.name,
            "message":   record.getMessage(),
        }
        # Pick up any extra attributes
        for key, value in record.__dict__.items():
            if key not in _BUILTIN_ATTRS:
                payload[key] = value
        if record.exc_info:
            payload["exception"] = self.formatException(record.exc_info)
        return json.dumps(payload, default=str)

# ----------------------------------------------------------------------------------------------------------

logging.getLogger(ROOT_LOGGER).addHandler(logging.NullHandler())


def get_logger(name: str) -> logging.Logger:
    """Child logger of the package root, e.g. ``fogseg.training.trainer``."""
    if name != ROOT_LOGGER and not name.startswith(ROOT_LOGGER + '.'):
        name = f"{ROOT_LOGGER}.{name}"
    return logging.getLogger(name)

# ----------------------------------------------------------------------------------------------------------


def setup_logger(
    name: str = ROOT_LOGGER,
    level: int | str = logging.INFO,
    log_file: Optional[Path] = None,
    log_dir: Optional[Path] = None,
) -> logging.Logger:
    """
    Set up a logger with a console handler and a rotating JSON file handler.

    Args:
        name: Name of the logger (default: package root)
        level: Logging level (default: INFO)
        log_file: Path of the JSON log file; wins over ``log_dir``
        log_dir: Directory for a timestamped ``fogseg_<ts>.log`` file

    Returns:
        Configured logger instance. Calling again replaces the handlers instead of
        stacking duplicates.
    """
    logger = logging.getLogger(name)
    logger.setLevel(level)
    for handler in list(logger.handlers):
        if getattr(handler, '_fogseg', False):
            logger.removeHandler(handler)
            handler.close()

    # Console handler (stderr keeps stdout for command output)
    console_handler = logging.StreamHandler(sys.stderr)
    console_handler.setFormatter(logging.Formatter('%(asctime)s - %(name)s - %(levelname)s - %(message)s'))
    console_handler._fogseg = True
    logger.addHandler(console_handler)

    if log_file is None and log_dir is not None:
        ts = datetime.now().strftime("%Y%m%d_%H%M%S")
        log_file = Path(log_dir) / f"fogseg_{ts}.log"
    if log_file is not None:
        log_file = Path(log_file)
        log_file.parent.mkdir(parents=True, exist_ok=True)
        file_handler = RotatingFileHandler(filename=log_file, maxBytes=10_000_000, backupCount=5)
        file_handler.setFormatter(JsonFormatter())
        file_handler._fogseg = True
        logger.addHandler(file_handler)

    return logger
