"""
Progress reporting for the ZeroSlide benchmark harness.

This module provides a ProgressReporter class that handles progress updates
for long runs, including throttling, duplicate detection, a tqdm bar on
interactive terminals and log lines at 10% intervals.
"""
import sys
import time
from typing import Optional

from tqdm import tqdm

from scripts.logger import get_logger

logger = get_logger(__name__)


class ProgressReporter:
    """
    Handles progress reporting with throttling and a terminal bar.

    This class can be used to report progress with the following features:
    - Throttling of progress updates
    - Duplicate detection
    - tqdm bar when stderr is a terminal (and not quiet)
    - Log lines at every 10% step and once at completion
    """

    def __init__(self, total: int, description: str = "runs", quiet: bool = False, bar=None):
        """
        Initialize the progress reporter.

        Args:
            total: Number of units of work (e.g. method/fold/seed triples)
            description: Label shown on the bar and in log lines
            quiet: Disable the bar; progress is only logged
            bar: Optional pre-built bar object (anything with update/set_postfix_str/close)
        """
        self.total = max(0, int(total))
        self.description = description
        self.completed = 0
        self.is_running = True
        self._last_progress = -1
        self._last_progress_time = 0.0
        self._last_message: Optional[str] = None
        self._last_logged_step = -1
        self._logged_100_percent = False
        if bar is None and not quiet and sys.stderr.isatty():
            bar = tqdm(total=self.total, desc=description, unit=description.rstrip('s') or "unit",
                       leave=False)
        self.bar = bar

    def advance(self, count: int = 1, message: Optional[str] = None) -> bool:
        """Mark ``count`` more units as done."""
        self.completed = min(self.total, self.completed + count)
        if self.bar is not None:
            self.bar.update(count)
        progress = 100.0 if self.total == 0 else 100.0 * self.completed / self.total
        return self.update_progress(progress, message)

    def update_progress(self, progress, message=None) -> bool:
        """
        Update the progress with the current status.

        Args:
            progress (int/float): Progress percentage (0-100)
            message (str, optional): Optional status message

        Returns:
            bool: True if the progress was updated, False otherwise
        """
        if not self.is_running:
            return False

        try:
            progress_float = max(0.0, min(100.0, float(progress)))
        except (TypeError, ValueError) as e:
            logger.warning("invalid progress value %r: %s", progress, e)
            return False

        progress_int = int(progress_float)
        current_time = time.time()
        progress_changed = progress_int != self._last_progress
        time_elapsed = (current_time - self._last_progress_time) >= 1.0
        message_changed = message != self._last_message
        if not (progress_changed or time_elapsed or message_changed):
            return False

        if self.bar is not None and message and message_changed:
            self.bar.set_postfix_str(message)
        self._log_progress(progress_float, message)
        self._last_progress = progress_int
        self._last_progress_time = current_time
        self._last_message = message
        return True

    def _log_progress(self, progress: float, message: Optional[str]) -> None:
        """Log once per 10% step and once at completion."""
        if progress >= 100.0:
            if self._logged_100_percent:
                return
            self._logged_100_percent = True
        else:
            step = int(progress // 10)
            if step == self._last_logged_step:
                return
            self._last_logged_step = step

        line = f"{self.description}: {progress:.1f}% ({self.completed}/{self.total})"
        if message:
            line = f"{line} - {message}"
        logger.info(line)

    def close(self) -> None:
        self.is_running = False
        if self.bar is not None:
            self.bar.close()
            self.bar = None

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc_val, exc_tb):
        self.close()
