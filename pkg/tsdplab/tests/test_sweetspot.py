"""
Tests for the sweet-spot sweep, its cache and the utility/security frontier.
"""

import os
import shutil
import tempfile
import threading
import unittest
from pathlib import Path
from unittest import mock

from tsdplab.core.attacks import METRICS, AttackReport
from tsdplab.core.flops import CostReport
from tsdplab.core.lab import LabConfig, config_hash
from tsdplab.core.sweetspot import (
    FRONTIER_CSV_COLUMNS,
    CellCache,
    SweepResult,
    average_reports,
    brute_force_choice,
    choose,
    frontier,
    frontier_csv,
    sweep,
)
from tsdplab.utils.logging import TSDPDataError, TSDPValidationError

# security falls by 0.1 per config step while the TEE share grows by 0.1
BLACK_MS = 0.3
NOSHIELD_MS = 0.9


def _report(scheme, config, seed, pct, ms):
    values = {m: 0.5 for m in METRICS}
    values["ms_accuracy"] = ms
    cost = CostReport(flops_tee=int(pct * 100), flops_gpu=int((1 - pct) * 100),
                      flops_total=100, pct_flops_tee=pct, sim_latency=0.0)
    return AttackReport(scheme=scheme, config=config, seed=seed, utility=cost, **values)


class FakeEvaluator:
    """Deterministic evaluate(scheme, config, seed) with call counting."""

    def __init__(self, fail=None, noise=0.0):
        self.calls = []
        self.fail = fail or set()
        self.noise = noise
        self._lock = threading.Lock()

    def __call__(self, scheme, config, seed):
        with self._lock:
            self.calls.append((scheme, config, seed))
        if (scheme, config, seed) in self.fail:
            raise TSDPDataError("training diverged")
        if scheme == "BlackBox":
            return _report(scheme, None, seed, 1.0, BLACK_MS)
        if scheme == "NoShield":
            return _report(scheme, None, seed, 0.0, NOSHIELD_MS)
        jitter = self.noise * (1 if seed % 2 else -1)
        return _report(scheme, config, seed, config / 10, NOSHIELD_MS - 0.1 * config + jitter)


class TestChoose(unittest.TestCase):
    """Choice of the minimal-utility satisfying configuration."""

    def setUp(self):
        self.cells = [(c, _report("Deep", c, 0, c / 10, NOSHIELD_MS - 0.1 * c))
                      for c in range(7)]

    def test_first_satisfying_cell(self):
        """Only the config reaching the BlackBox level satisfies delta = 0.05."""
        self.assertEqual(choose(self.cells, BLACK_MS, 0.05), 6)

    def test_vacuous_delta(self):
        """A delta above every gap picks the minimum TEE share."""
        self.assertEqual(choose(self.cells, BLACK_MS, 1.0), 0)

    def test_no_satisfying_cell(self):
        """An unreachable baseline gives no choice."""
        self.assertIsNone(choose(self.cells, 0.0, 0.05))

    def test_two_sided_rejects_undershoot(self):
        """Two-sided deltas also bound values below the baseline."""
        cells = [(0, _report("Deep", 0, 0, 0.1, 0.0)), (1, _report("Deep", 1, 0, 0.2, 0.31))]
        self.assertEqual(choose(cells, BLACK_MS, 0.05, one_sided=True), 0)
        self.assertEqual(choose(cells, BLACK_MS, 0.05, one_sided=False), 1)

    def test_ties_go_to_smaller_index(self):
        """Equal utility resolves to the earlier configuration."""
        cells = [(0, _report("Deep", 0, 0, 0.5, 0.3)), (1, _report("Deep", 1, 0, 0.5, 0.3))]
        self.assertEqual(choose(cells, BLACK_MS, 0.05), 0)

    def test_matches_brute_force(self):
        """choose agrees with a filter-then-sort rescan for many deltas."""
        result = SweepResult(scheme="Deep", metric="ms_accuracy", delta=0.05,
                             cells=self.cells, security_black={"ms_accuracy": BLACK_MS})
        rows = result.table()
        for delta in (0.01, 0.05, 0.15, 0.25, 0.45, 0.65, 1.0):
            for one_sided in (True, False):
                self.assertEqual(choose(self.cells, BLACK_MS, delta, one_sided),
                                 brute_force_choice(rows, BLACK_MS, delta, one_sided))


class TestSweep(unittest.TestCase):
    """End-to-end sweeps over a fake evaluator."""

    def setUp(self):
        self.temp_dir = tempfile.mkdtemp()

    def tearDown(self):
        shutil.rmtree(self.temp_dir, ignore_errors=True)

    def test_sweep_picks_sweet_spot(self):
        """The sweep evaluates grid and baselines and chooses config 6."""
        fake = FakeEvaluator()
        result = sweep("Deep", grid=list(range(7)), delta=0.05, evaluate=fake)
        self.assertEqual(result.chosen, 6)
        self.assertEqual(len(fake.calls), 9)
        self.assertEqual(set(result.baselines), {"BlackBox", "NoShield"})
        self.assertAlmostEqual(result.security_black["ms_accuracy"], BLACK_MS)

    def test_seeds_are_averaged(self):
        """Opposite per-seed jitter cancels in the averaged cell."""
        fake = FakeEvaluator(noise=0.04)
        result = sweep("Deep", grid=[0, 6], delta=0.05, seeds=[0, 1], evaluate=fake,
                       workers=2)
        self.assertEqual(len(fake.calls), 8)
        self.assertAlmostEqual(result.cells[1][1].ms_accuracy, NOSHIELD_MS - 0.6)
        self.assertEqual(result.cells[1][1].meta["seeds"], [0, 1])
        self.assertEqual(result.chosen, 6)

    def test_failed_seed_drops_config(self):
        """A failing cell removes its configuration and is reported."""
        fake = FakeEvaluator(fail={("Deep", 2, 1)})
        result = sweep("Deep", grid=[1, 2, 3], delta=1.0, seeds=[0, 1], evaluate=fake)
        self.assertEqual([c for c, _ in result.cells], [1, 3])
        self.assertIn("Deep|2|seed=1", result.failures)
        self.assertEqual(result.chosen, 1)

    def test_blackbox_failure_is_fatal(self):
        """Without the BlackBox baseline there is no sweet spot."""
        fake = FakeEvaluator(fail={("BlackBox", None, 0)})
        with self.assertRaises(TSDPValidationError):
            sweep("Deep", grid=[1], evaluate=fake)

    def test_cache_resumes(self):
        """A second sweep over the same cache computes nothing."""
        cache = CellCache(self.temp_dir, model_hash="m", data_hash="d")
        first = FakeEvaluator()
        sweep("Deep", grid=[0, 3], evaluate=first, cache=cache)
        self.assertEqual(len(first.calls), 4)
        second = FakeEvaluator()
        again = sweep("Deep", grid=[0, 3], evaluate=second, cache=cache)
        self.assertEqual(second.calls, [])
        self.assertEqual(cache.hits, 4)
        self.assertEqual([c for c, _ in again.cells], [0, 3])

    def test_cache_keys_include_hashes(self):
        """A different victim hash never hits."""
        cache = CellCache(self.temp_dir, model_hash="m", data_hash="d")
        cache.put(_report("Deep", 1, 0, 0.1, 0.8))
        self.assertIsNotNone(cache.get("Deep", 1, 0))
        other = CellCache(self.temp_dir, model_hash="other", data_hash="d")
        self.assertIsNone(other.get("Deep", 1, 0))

    def test_cache_keys_include_lab_config(self):
        """Labs differing only in query budget map to different entries."""
        small = CellCache(self.temp_dir, model_hash="m", data_hash="d",
                          config_hash=config_hash(LabConfig(query_budget=2)))
        large = CellCache(self.temp_dir, model_hash="m", data_hash="d",
                          config_hash=config_hash(LabConfig(query_budget=8, steal_epochs=5)))
        self.assertNotEqual(small.path_for("Deep", 1, 0), large.path_for("Deep", 1, 0))
        small.put(_report("Deep", 1, 0, 0.1, 0.8))
        self.assertIsNone(large.get("Deep", 1, 0))
        self.assertIsNotNone(small.get("Deep", 1, 0))
        self.assertEqual(config_hash(LabConfig(query_budget=2)),
                         config_hash(LabConfig(query_budget=2)))

    def test_teeslice_cells_keyed_on_hybrid(self):
        """A new hybrid misses; a new victim does not affect TeeSlice entries."""
        cache = CellCache(self.temp_dir, model_hash="m", data_hash="d", hybrid_hash="h1")
        cache.put(_report("TeeSlice", None, 0, 0.05, 0.3))
        retrained = CellCache(self.temp_dir, model_hash="m", data_hash="d", hybrid_hash="h2")
        self.assertIsNone(retrained.get("TeeSlice", None, 0))
        new_victim = CellCache(self.temp_dir, model_hash="m2", data_hash="d", hybrid_hash="h1")
        self.assertIsNotNone(new_victim.get("TeeSlice", None, 0))

    def test_unreadable_cache_entry_is_a_miss(self):
        """A corrupt JSON entry is ignored."""
        cache = CellCache(self.temp_dir)
        path = cache.path_for("Deep", 1, 0)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text("{not json")
        self.assertIsNone(cache.get("Deep", 1, 0))
        self.assertEqual(cache.misses, 1)

    def test_invalid_arguments(self):
        """Unknown metrics, non-positive deltas and empty grids are rejected."""
        fake = FakeEvaluator()
        with self.assertRaises(TSDPValidationError):
            sweep("Deep", grid=[1], metric="accuracy", evaluate=fake)
        with self.assertRaises(TSDPValidationError):
            sweep("Deep", grid=[1], delta=0.0, evaluate=fake)
        with self.assertRaises(TSDPValidationError):
            sweep("Deep", grid=[], evaluate=fake)
        with self.assertRaises(TSDPValidationError):
            sweep("Deep", grid=[1])

    def test_result_round_trip(self):
        """SweepResult survives to_dict/from_dict."""
        result = sweep("Deep", grid=[0, 6], evaluate=FakeEvaluator())
        back = SweepResult.from_dict(result.to_dict())
        self.assertEqual(back.chosen, result.chosen)
        self.assertEqual(back.table(), result.table())


class TestFrontier(unittest.TestCase):
    """Utility/security frontier."""

    def test_points_sorted_and_merged(self):
        """Equal utility shares a point; baselines are attached."""
        cells = [(2, _report("Deep", 2, 0, 0.2, 0.7)), (1, _report("Deep", 1, 0, 0.1, 0.8)),
                 (3, _report("Deep", 3, 0, 0.2, 0.5))]
        result = SweepResult(scheme="Deep", metric="ms_accuracy", delta=0.05, cells=cells,
                             security_black={"ms_accuracy": BLACK_MS},
                             baselines={"NoShield": _report("NoShield", None, 0, 0.0, 0.9)})
        front = frontier(result)
        self.assertEqual([p[0] for p in front.points], [0.1, 0.2])
        self.assertAlmostEqual(front.points[1][1], 0.6)
        self.assertEqual(front.points[1][2], [2, 3])
        self.assertEqual(front.blackbox, BLACK_MS)
        self.assertEqual(front.noshield, 0.9)
        lines = frontier_csv(front).strip().splitlines()
        self.assertEqual(lines[0].split(","), FRONTIER_CSV_COLUMNS)
        self.assertEqual(len(lines), 5)

    def test_empty_frontier(self):
        """A sweep whose every configuration failed has no frontier."""
        result = SweepResult(scheme="Deep", metric="ms_accuracy", delta=0.05, cells=[],
                             security_black={})
        with self.assertRaises(TSDPValidationError):
            frontier(result)

    def test_average_of_nothing(self):
        """Averaging needs at least one report."""
        with self.assertRaises(TSDPValidationError):
            average_reports([])


class TestCacheLocation(unittest.TestCase):
    """Default cache directory."""

    def test_env_override(self):
        """TSDPLAB_CACHE_DIR overrides the default root."""
        with mock.patch.dict(os.environ, {"TSDPLAB_CACHE_DIR": "/tmp/tsdp-cache"}):
            self.assertEqual(CellCache().root, Path("/tmp/tsdp-cache"))


if __name__ == "__main__":
    unittest.main()
