"""
Logging configuration for the ZeroSlide benchmark harness.

This module provides a centralized way to configure logging for the harness,
with a console handler and, when a log directory is given, a file handler with
daily rotation. Library modules only ask for loggers; the command-line entry
point decides where the log files go.
"""
import logging
import os
from pathlib import Path
from datetime import date, datetime
from logging.handlers import TimedRotatingFileHandler
from typing import Optional, Union

_logging_configured = False

LOGGER_NAME = "ZeroSlideBench"
LOG_STEM = "zeroslide_bench"
LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"
DATE_FORMAT = "%Y-%m-%d %H:%M:%S"


def dated_log_path(log_dir: Union[str, os.PathLike], stem: str = LOG_STEM,
                   day: Optional[date] = None) -> Path:
    """Absolute path of the log file ``<stem>-YYYY-MM-DD.log`` for ``day`` (today by default)."""
    day = day or datetime.now().date()
    return (Path(log_dir) / f"{stem}-{day:%Y-%m-%d}.log").absolute()


class DailyRotatingFileHandler(TimedRotatingFileHandler):
    """Writes to one file per calendar day; the date is part of the name, so nothing is renamed."""

    def __init__(self, log_dir: Union[str, os.PathLike], stem: str = LOG_STEM, **kwargs):
        self.log_dir = Path(log_dir)
        self.log_dir.mkdir(parents=True, exist_ok=True)
        self.stem = stem
        super().__init__(str(dated_log_path(self.log_dir, stem)), when="midnight",
                         backupCount=0, encoding="utf-8", **kwargs)

    def doRollover(self):
        if self.stream:
            self.stream.close()
            self.stream = None
        self.baseFilename = str(dated_log_path(self.log_dir, self.stem))
        if not self.delay:
            self.stream = self._open()
        self.rolloverAt = self.computeRollover(int(datetime.now().timestamp()))


def setup_logging(log_dir: Optional[Union[str, os.PathLike]] = None,
                  level: Union[int, str] = logging.INFO) -> Optional[str]:
    """
    Set up logging for the harness.

    The console handler is installed once per process. A file handler is added
    the first time a ``log_dir`` is supplied.

    Args:
        log_dir: Optional directory for daily log files
        level: Console log level (name or number)

    Returns:
        str: Absolute path to the current log file, or None when logging to console only
    """
    global _logging_configured

    root = logging.getLogger(LOGGER_NAME)
    formatter = logging.Formatter(LOG_FORMAT, datefmt=DATE_FORMAT)

    if not _logging_configured:
        root.setLevel(logging.DEBUG)
        root.propagate = False
        for handler in list(root.handlers):
            root.removeHandler(handler)
        console = logging.StreamHandler()
        console.setFormatter(formatter)
        root.addHandler(console)
        _logging_configured = True

    for handler in root.handlers:
        if type(handler) is logging.StreamHandler:
            handler.setLevel(level)

    for handler in root.handlers:
        if isinstance(handler, DailyRotatingFileHandler):
            return handler.baseFilename
    if log_dir is None:
        return None

    try:
        file_handler = DailyRotatingFileHandler(log_dir)
    except OSError as e:
        root.warning("Cannot open a log file in %s (%s); logging to console only", log_dir, e)
        return None
    file_handler.setLevel(logging.DEBUG)
    file_handler.setFormatter(formatter)
    root.addHandler(file_handler)
    root.debug("Logging to %s", file_handler.baseFilename)
    return file_handler.baseFilename


def get_logger(name: Optional[str] = None) -> logging.Logger:
    """
    Logger under the harness namespace; ``name`` is usually the module's ``__name__``.
    Configures console logging on first use.
    """
    if not _logging_configured:
        setup_logging()
    return logging.getLogger(LOGGER_NAME + (f".{name}" if name else ""))
