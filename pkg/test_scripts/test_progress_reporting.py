"""
Tests for progress reporting functionality in the benchmark harness.
"""
import unittest
from unittest.mock import MagicMock, patch

from scripts.progress import ProgressReporter


class TestProgressReporting(unittest.TestCase):
    """Test cases for progress reporting functionality."""

    def setUp(self):
        """Set up test environment."""
        # Stand-in for the tqdm bar
        self.bar = MagicMock()
        self.reporter = ProgressReporter(total=10, description="triples", bar=self.bar)

        # Patch time for consistent testing
        self.time_patcher = patch('scripts.progress.time.time')
        self.mock_time = self.time_patcher.start()
        self.mock_time.return_value = 0

    def tearDown(self):
        self.time_patcher.stop()

    def test_initial_state(self):
        """Test the initial state of the progress reporter."""
        self.assertEqual(self.reporter._last_progress, -1)
        self.assertEqual(self.reporter._last_progress_time, 0)
        self.assertEqual(self.reporter.completed, 0)
        self.assertTrue(self.reporter.is_running)

    def test_advance_updates_bar(self):
        """Advancing moves the bar and the completed count."""
        self.mock_time.return_value = 1.0
        self.assertTrue(self.reporter.advance(message="finetune_fold0_seed0"))
        self.bar.update.assert_called_once_with(1)
        self.bar.set_postfix_str.assert_called_once_with("finetune_fold0_seed0")
        self.assertEqual(self.reporter.completed, 1)
        self.assertEqual(self.reporter._last_progress, 10)

    def test_duplicate_updates_are_ignored(self):
        """Same progress, same message and no elapsed time is a no-op."""
        self.assertTrue(self.reporter.update_progress(20, "step"))
        self.assertFalse(self.reporter.update_progress(20, "step"))
        self.mock_time.return_value = 2.0
        self.assertTrue(self.reporter.update_progress(20, "step"))

    def test_logs_each_ten_percent_once(self):
        """Log lines appear once per 10% step and once at completion."""
        with self.assertLogs("ZeroSlideBench.scripts.progress", level="INFO") as logs:
            for value in (0, 5, 12, 15, 100, 100):
                self.mock_time.return_value += 1.0
                self.reporter.update_progress(value, f"v{value}")
        self.assertEqual(len(logs.output), 3)
        self.assertIn("100.0%", logs.output[-1])

    def test_invalid_progress_value(self):
        """Invalid progress values are rejected."""
        self.assertFalse(self.reporter.update_progress("invalid"))

    def test_close_stops_updates(self):
        """After close no further updates are accepted."""
        self.reporter.close()
        self.bar.close.assert_called_once()
        self.assertFalse(self.reporter.update_progress(50))

    def test_quiet_has_no_bar(self):
        """Quiet reporters only log."""
        reporter = ProgressReporter(total=3, quiet=True)
        self.assertIsNone(reporter.bar)
        reporter.advance(3)
        self.assertEqual(reporter.completed, 3)

    def test_empty_total_is_complete(self):
        reporter = ProgressReporter(total=0, quiet=True)
        reporter.advance(0)
        self.assertTrue(reporter._logged_100_percent)


if __name__ == "__main__":
    unittest.main()
