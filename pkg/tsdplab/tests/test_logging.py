"""
Tests for the logger, the exception hierarchy and bug reports.
"""

import json
import logging
import os
import shutil
import tempfile
import unittest
from io import StringIO
from pathlib import Path
from unittest.mock import patch

import numpy as np

from tsdplab.utils.logging import (
    ErrorContext,
    ErrorHandler,
    PadReuseError,
    TSDPConfigError,
    TSDPDataError,
    TSDPError,
    TSDPFileError,
    TSDPIntegrityError,
    TSDPLogger,
    TSDPShapeError,
    TSDPTrainingError,
    TSDPValidationError,
    create_error_context,
    logger,
    safe_execute,
)


class TestExceptions(unittest.TestCase):
    """Exception hierarchy and payloads."""

    def test_hierarchy(self):
        """Specialised errors derive from their families."""
        self.assertTrue(issubclass(TSDPShapeError, TSDPValidationError))
        self.assertTrue(issubclass(TSDPTrainingError, TSDPDataError))
        self.assertTrue(issubclass(PadReuseError, TSDPIntegrityError))
        for cls in (TSDPFileError, TSDPDataError, TSDPConfigError, TSDPValidationError,
                    TSDPIntegrityError):
            self.assertTrue(issubclass(cls, TSDPError))

    def test_payloads(self):
        """Errors carry their edge, epoch/batch and verify log."""
        self.assertEqual(TSDPShapeError("bad", edge=("conv1", "bn1")).edge, ("conv1", "bn1"))
        err = TSDPTrainingError("nan", epoch=2, batch=5)
        self.assertEqual((err.epoch, err.batch), (2, 5))
        self.assertEqual(TSDPIntegrityError("x", verify_log=[{"layer": "fc"}]).verify_log,
                         [{"layer": "fc"}])
        self.assertEqual(str(TSDPFileError("Test file error")), "Test file error")


class TestErrorHandler(unittest.TestCase):
    """Exit codes and redacted bug reports."""

    def setUp(self):
        self.temp_dir = tempfile.mkdtemp()
        self.env = patch.dict(os.environ, {"TSDPLAB_HOME": self.temp_dir})
        self.env.start()
        self.handler = ErrorHandler(logger)

    def tearDown(self):
        self.env.stop()
        shutil.rmtree(self.temp_dir, ignore_errors=True)

    def test_exit_codes(self):
        """Each error family maps to its exit code."""
        cases = [
            (TSDPFileError("f"), 2),
            (TSDPDataError("d"), 3),
            (TSDPTrainingError("t"), 3),
            (TSDPConfigError("c"), 4),
            (TSDPShapeError("s"), 5),
            (PadReuseError("p"), 6),
            (RuntimeError("r"), 1),
        ]
        for error, code in cases:
            with self.subTest(error=type(error).__name__):
                self.assertEqual(self.handler._get_exit_code(error), code)

    def test_bug_report_redacts_arrays(self):
        """Arrays appear in bug reports only as shape and dtype."""
        weights = np.arange(6.0).reshape(2, 3)
        context = create_error_context("attack", {"weights": weights, "scheme": "Deep"},
                                       cell="Deep|1|seed=0")
        with patch("sys.stderr", new_callable=StringIO):
            code = self.handler.handle_error(TSDPValidationError("boom"), context)
        self.assertEqual(code, 5)
        reports = list(Path(self.temp_dir, "bug-reports").glob("TSDP-*.json"))
        self.assertEqual(len(reports), 1)
        data = json.loads(reports[0].read_text())
        self.assertEqual(data["context"]["args"]["weights"], {"shape": [2, 3], "dtype": "float64"})
        self.assertEqual(data["context"]["args"]["scheme"], "Deep")
        self.assertEqual(data["context"]["cell"], "Deep|1|seed=0")
        self.assertNotIn("5.0", json.dumps(data["context"]))

    def test_safe_execute(self):
        """safe_execute returns results or exit codes."""
        context = ErrorContext(command="test", args={})
        self.assertEqual(safe_execute(lambda: "ok", context), ("ok", 0))
        self.assertEqual(safe_execute(lambda: 3, context), (3, 3))

        def fail():
            raise TSDPConfigError("bad config")

        with patch("sys.stderr", new_callable=StringIO):
            self.assertEqual(safe_execute(fail, context), (None, 4))


class TestLogger(unittest.TestCase):
    """Logger front-end."""

    def test_set_level(self):
        """set_level accepts names case-insensitively and ignores unknown ones."""
        log = TSDPLogger("tsdplab.test")
        log.set_level("debug")
        self.assertEqual(log.logger.level, logging.DEBUG)
        log.set_level("verbose")
        self.assertEqual(log.logger.level, logging.DEBUG)

    def test_cell_adapter_prefixes_key(self):
        """Cell adapters tag each line with the cell key."""
        log = TSDPLogger("tsdplab.test.cell")
        stream = StringIO()
        handler = logging.StreamHandler(stream)
        log.logger.addHandler(handler)
        try:
            log.cell("Deep|1|seed=0").info("started")
        finally:
            log.logger.removeHandler(handler)
        self.assertIn("[Deep|1|seed=0] started", stream.getvalue())

    def test_attach_file(self):
        """attach_file captures DEBUG lines until detached."""
        temp_dir = tempfile.mkdtemp()
        try:
            log = TSDPLogger("tsdplab.test.file")
            path = Path(temp_dir) / "logs" / "run.log"
            handler = log.attach_file(path)
            log.logger.setLevel(logging.DEBUG)
            log.debug("cell detail")
            log.detach_file(handler)
            log.debug("after detach")
            text = path.read_text()
            self.assertIn("cell detail", text)
            self.assertNotIn("after detach", text)
        finally:
            shutil.rmtree(temp_dir, ignore_errors=True)


if __name__ == "__main__":
    unittest.main()
