"""
Error handling utilities for the ZeroSlide benchmark harness.

This module defines the exception hierarchy shared by every module and the
helpers that log failures consistently and map them to process exit codes.
"""
import functools
import os
from pathlib import Path
from typing import Any, Callable, Optional, Tuple, TypeVar, Union

from scripts.logger import get_logger

logger = get_logger(__name__)

T = TypeVar('T')

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_PARTIAL = 2
EXIT_CONFIG = 3
EXIT_FORMAT = 4


class BenchError(Exception):
    """Base class for every error raised by the harness."""

    exit_code = EXIT_FAILURE


class DimensionError(BenchError):
    """Vector or matrix lengths do not match."""


class DomainError(BenchError):
    """An input lies outside the domain of an operation."""


class InvalidScoreError(BenchError):
    """A score vector contains NaN."""


class StateError(BenchError):
    """An object is not in the state an operation requires."""


class LabelError(BenchError):
    """A label is outside the candidate class set."""


class SamplingError(BenchError):
    """A buffer cannot produce the requested sample."""


class StratificationError(BenchError):
    """A class has too few slides for the requested fold count."""


class DataError(BenchError):
    """Required data (a split, class means) is missing."""


class ReportError(BenchError):
    """Results cannot be summarized."""


class InfeasibleSeparationError(BenchError):
    """Class means cannot be drawn with the requested pairwise separation."""

    def __init__(self, message: str, attempts: int = 0):
        super().__init__(message)
        self.attempts = attempts


class DivergenceError(BenchError):
    """Training produced a non-finite loss or gradient."""

    def __init__(self, message: str, task_index: Optional[int] = None,
                 epoch: Optional[int] = None, step: Optional[int] = None):
        super().__init__(message)
        self.task_index = task_index
        self.epoch = epoch
        self.step = step

    def __str__(self):
        where = []
        if self.task_index is not None:
            where.append(f"task={self.task_index}")
        if self.epoch is not None:
            where.append(f"epoch={self.epoch}")
        if self.step is not None:
            where.append(f"step={self.step}")
        base = super().__str__()
        return f"{base} ({', '.join(where)})" if where else base


class FormatError(BenchError):
    """A binary file does not follow its format."""

    exit_code = EXIT_FORMAT

    def __init__(self, message: str, offset: int = 0, slide_index: Optional[int] = None):
        super().__init__(message)
        self.offset = offset
        self.slide_index = slide_index

    def __str__(self):
        base = f"{super().__str__()} at byte offset {self.offset}"
        if self.slide_index is not None:
            base += f" (slide index {self.slide_index})"
        return base


class ConsistencyError(BenchError):
    """Records of one file, or two related files, disagree."""

    exit_code = EXIT_FORMAT


class ConfigError(BenchError):
    """A run configuration cannot be parsed or validated."""

    exit_code = EXIT_CONFIG

    def __init__(self, message: str, key: Optional[str] = None,
                 line: Optional[int] = None, suggestion: Optional[str] = None):
        super().__init__(message)
        self.key = key
        self.line = line
        self.suggestion = suggestion

    def __str__(self):
        parts = []
        if self.line is not None:
            parts.append(f"line {self.line}")
        if self.key is not None:
            parts.append(f"key '{self.key}'")
        base = super().__str__()
        if parts:
            base = f"{', '.join(parts)}: {base}"
        if self.suggestion:
            base += f" (did you mean '{self.suggestion}'?)"
        return base


def handle_error(error: Exception, context: str = "") -> int:
    """
    Handle an error consistently across the harness.

    Args:
        error: The exception that was raised
        context: Additional context about where the error occurred

    Returns:
        int: The process exit code associated with the error
    """
    error_msg = str(error) or type(error).__name__
    if context:
        error_msg = f"{context}: {error_msg}"

    if isinstance(error, BenchError):
        logger.error(error_msg, exc_info=error.exit_code == EXIT_FAILURE)
        return error.exit_code

    logger.error(error_msg, exc_info=True)
    return EXIT_FAILURE


def with_error_handling(
    func: Callable[..., T],
    context: str = "",
    default: Any = None,
    fallback: Optional[Callable[[Exception], T]] = None
) -> Callable[..., T]:
    """
    Call ``func``; a raised exception is logged through ``handle_error``.

    The wrapper then returns ``fallback(error)`` when a fallback is given,
    else ``default``.
    """
    @functools.wraps(func)
    def wrapper(*args, **kwargs):
        try:
            return func(*args, **kwargs)
        except Exception as e:
            handle_error(e, context or func.__name__)
            return fallback(e) if fallback is not None else default
    return wrapper


def check_file_path(
    file_path: Union[str, os.PathLike, None],
    check_exists: bool = True,
    check_readable: bool = False,
    check_writable: bool = False
) -> Tuple[bool, str]:
    """
    Check that ``file_path`` names a usable file.

    With ``check_writable`` a missing file is accepted when its directory is
    writable. Returns ``(ok, message)``; the message is empty when ok.
    """
    if not file_path or not str(file_path).strip():
        return False, "No file path given"
    path = Path(file_path)

    if path.is_dir():
        return False, f"Path is a directory: {path}"
    if not path.exists():
        if check_exists:
            return False, f"File does not exist: {path}"
        if check_writable and not os.access(path.parent, os.W_OK):
            return False, f"Directory is not writable: {path.parent}"
        return True, ""
    if check_readable and not os.access(path, os.R_OK):
        return False, f"File is not readable: {path}"
    if check_writable and not os.access(path, os.W_OK):
        return False, f"File is not writable: {path}"
    return True, ""
