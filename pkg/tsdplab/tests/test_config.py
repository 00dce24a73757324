"""
Tests for experiment and sweep configuration files.
"""

import json
import os
import shutil
import tempfile
import unittest
from pathlib import Path
from unittest.mock import patch

from tsdplab.core.lab import LabConfig
from tsdplab.utils.config import (
    EXPERIMENT_SCHEMA,
    ExperimentConfig,
    SweepDefinition,
    cache_dir,
    load_experiment_config,
    load_sweep_definition,
    validate_document,
)
from tsdplab.utils.logging import TSDPConfigError, TSDPFileError, TSDPValidationError


class TestExperimentConfig(unittest.TestCase):
    """ExperimentConfig validation and mapping onto LabConfig."""

    def setUp(self):
        self.temp_dir = tempfile.mkdtemp()

    def tearDown(self):
        shutil.rmtree(self.temp_dir, ignore_errors=True)

    def _write(self, data, name="exp.json"):
        path = Path(self.temp_dir) / name
        path.write_text(json.dumps(data))
        return path

    def test_minimal_config(self):
        """Only output_dir is required."""
        cfg = load_experiment_config(self._write({"output_dir": "out"}))
        self.assertEqual(cfg.output_dir, "out")
        self.assertEqual(cfg.seeds, [0])
        self.assertEqual(cfg.schemes, [])

    def test_full_config_maps_to_lab(self):
        """Dataset, model, training, teeslice and attack sections reach LabConfig."""
        cfg = ExperimentConfig.from_dict({
            "output_dir": "out",
            "name": "small",
            "dataset": {"n_classes": 2, "private_per_class": 8, "side": 10},
            "model": {"widths": [4, 8], "pool_after": []},
            "training": {"victim_epochs": 3, "learning_rate": 0.1},
            "teeslice": {"delta": 0.2, "rounds": 1},
            "attack": {"budget": 4, "assumption": "VictimKnown"},
            "schemes": [{"name": "Deep", "grid": [0, 1]}, {"name": "TeeSlice"}],
            "seeds": [3, 4],
        })
        lab = LabConfig.from_experiment(cfg)
        self.assertEqual(lab.n_classes, 2)
        self.assertEqual(lab.widths, (4, 8))
        self.assertEqual(lab.pool_after, ())
        self.assertEqual(lab.victim_epochs, 3)
        self.assertEqual(lab.teeslice_delta, 0.2)
        self.assertEqual(lab.teeslice_rounds, 1)
        self.assertEqual(lab.query_budget, 4)
        self.assertEqual(cfg.schemes[0].grid, [0, 1])
        self.assertIsNone(cfg.schemes[1].grid)
        self.assertEqual(cfg.to_dict()["schemes"][1], {"name": "TeeSlice"})

    def test_schema_violations_listed(self):
        """Every violation is reported with its path."""
        with self.assertRaises(TSDPConfigError) as ctx:
            ExperimentConfig.from_dict({
                "output_dir": "out",
                "schemes": [{"name": "Everything"}],
                "seeds": [],
                "extra": 1,
            })
        message = str(ctx.exception)
        self.assertIn("schemes/0/name", message)
        self.assertIn("seeds", message)
        self.assertIn("extra", message)

    def test_missing_output_dir(self):
        """output_dir is required."""
        with self.assertRaises(TSDPConfigError):
            validate_document({}, EXPERIMENT_SCHEMA, "experiment config")

    def test_missing_and_malformed_files(self):
        """A missing file is a file error, broken JSON a config error."""
        with self.assertRaises(TSDPFileError):
            load_experiment_config(Path(self.temp_dir) / "absent.json")
        bad = Path(self.temp_dir) / "bad.json"
        bad.write_text("{")
        with self.assertRaises(TSDPConfigError):
            load_experiment_config(bad)

    def test_lab_config_checks(self):
        """The MIA split and query budget constrain the lab sizes."""
        with self.assertRaises(TSDPValidationError):
            LabConfig(n_classes=3, private_per_class=3)
        with self.assertRaises(TSDPValidationError):
            LabConfig(n_classes=4, private_per_class=8, query_budget=17)


class TestSweepDefinition(unittest.TestCase):
    """SweepDefinition validation."""

    def test_valid_definition(self):
        """Defaults fill seeds, sidedness and assumption."""
        d = SweepDefinition.from_dict({"scheme": "Magnitude", "metric": "conf_mia_acc",
                                       "delta": 0.05, "grid": [0.0, 0.01, 0.1]})
        self.assertEqual(d.seeds, [0])
        self.assertTrue(d.one_sided)
        self.assertEqual(d.assumption, "HybridKnown")

    def test_invalid_definitions(self):
        """Unknown metrics and non-positive deltas are schema errors."""
        for data in ({"scheme": "Deep", "metric": "accuracy", "delta": 0.05},
                     {"scheme": "Deep", "metric": "ms_accuracy", "delta": 0},
                     {"scheme": "Deep", "metric": "ms_accuracy"}):
            with self.assertRaises(TSDPConfigError):
                SweepDefinition.from_dict(data)

    def test_load_from_file(self):
        """Definitions load from JSON files."""
        temp_dir = tempfile.mkdtemp()
        try:
            path = Path(temp_dir) / "sweep.json"
            path.write_text(json.dumps({"scheme": "Shallow", "metric": "ms_accuracy",
                                        "delta": 0.1, "seeds": [0, 1]}))
            self.assertEqual(load_sweep_definition(path).seeds, [0, 1])
        finally:
            shutil.rmtree(temp_dir, ignore_errors=True)


class TestCacheDir(unittest.TestCase):
    """Cell cache location."""

    def test_default_under_home(self):
        """Without an override the cache lives under TSDPLAB_HOME."""
        env = {"TSDPLAB_HOME": "/tmp/tsdp-home"}
        with patch.dict(os.environ, env):
            os.environ.pop("TSDPLAB_CACHE_DIR", None)
            self.assertEqual(cache_dir(), Path("/tmp/tsdp-home/cache"))

    def test_override(self):
        """TSDPLAB_CACHE_DIR wins."""
        with patch.dict(os.environ, {"TSDPLAB_CACHE_DIR": "/tmp/cells"}):
            self.assertEqual(cache_dir(), Path("/tmp/cells"))


if __name__ == "__main__":
    unittest.main()
