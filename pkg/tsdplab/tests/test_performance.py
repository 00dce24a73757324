"""
Performance tests for tsdplab.
"""

import os
import time
import unittest

import numpy as np

from tsdplab.core.nn import TrainConfig, build_toy_cnn, forward, train_sgd
from tsdplab.core.offload import (
    MASKED,
    FieldParams,
    execute_plan,
    field_matmul,
    freivalds_sample,
    freivalds_verify,
)
from tsdplab.core.partition import build_plan
from tsdplab.core.shadownet import attack_layer, obfuscate


class TestPerformance(unittest.TestCase):
    """Wall-clock bounds for the hot paths."""

    def setUp(self):
        """Shared model and inputs."""
        self.model = build_toy_cnn(widths=(8, 16, 16), pool_after=(1,), seed=0)
        self.x = np.random.default_rng(0).uniform(size=(64, 1, 12, 12))

    def test_forward_pass_performance(self):
        """A 64-sample forward pass of the toy CNN stays well under a second."""
        start_time = time.time()
        out = forward(self.model, self.x)
        duration = time.time() - start_time
        self.assertLess(duration, 1.0, f"Forward took {duration:.3f}s, expected < 1s")
        self.assertEqual(out.shape, (64, 4))

    def test_training_epoch_performance(self):
        """One epoch over 256 samples finishes in a few seconds."""
        x = np.random.default_rng(1).uniform(size=(256, 1, 12, 12))
        y = np.arange(256) % 4
        start_time = time.time()
        train_sgd(self.model, x, y, TrainConfig(epochs=1, batch_size=32))
        duration = time.time() - start_time
        self.assertLess(duration, 10.0, f"Epoch took {duration:.3f}s, expected < 10s")

    def test_freivalds_cheaper_than_recompute(self):
        """Verifying a field product is faster than recomputing it."""
        fp = FieldParams()
        rng = np.random.default_rng(2)
        h = rng.integers(0, fp.p, size=(256, 512), dtype=np.int64)
        wt = rng.integers(0, fp.p, size=(512, 256), dtype=np.int64)
        claimed = field_matmul(h, wt, fp)
        s, s_tilde = freivalds_sample(wt, 1, fp, rng)

        start_time = time.time()
        for _ in range(5):
            field_matmul(h, wt, fp)
        recompute = time.time() - start_time

        start_time = time.time()
        for _ in range(5):
            self.assertTrue(freivalds_verify(h, claimed, s_tilde, s, fp))
        verify = time.time() - start_time
        self.assertLess(verify, recompute,
                        f"verify {verify:.3f}s is not cheaper than recompute {recompute:.3f}s")

    def test_masked_offload_performance(self):
        """Masked offload of a small batch completes in a few seconds."""
        plan = build_plan("Deep", self.model)
        start_time = time.time()
        out, _, log = execute_plan(self.model, plan, self.x[:8], protocol=MASKED, seed=0)
        duration = time.time() - start_time
        self.assertLess(duration, 10.0, f"Masked offload took {duration:.3f}s")
        self.assertEqual(out.shape, (8, 4))
        self.assertTrue(all(entry.passed for entry in log))

    def test_memory_usage(self):
        """A forward pass does not allocate excessive memory."""
        try:
            import psutil
        except ImportError:
            self.skipTest("psutil not available for memory testing")

        process = psutil.Process(os.getpid())
        initial_memory = process.memory_info().rss / 1024 / 1024  # MB
        forward(self.model, self.x)
        final_memory = process.memory_info().rss / 1024 / 1024  # MB
        memory_increase = final_memory - initial_memory
        self.assertLess(
            memory_increase,
            50,
            f"Memory increased by {memory_increase:.1f}MB, expected < 50MB",
        )


class TestScalability(unittest.TestCase):
    """The ShadowNet attack over growing layer widths."""

    def test_attack_scales_with_filters(self):
        """Pairwise candidate search stays fast up to 64 filters."""
        for c_out in (8, 16, 32, 64):
            with self.subTest(c_out=c_out):
                rng = np.random.default_rng(c_out)
                public = rng.normal(0.0, np.sqrt(0.005), size=(c_out, 4, 3, 3))
                victim = public + rng.normal(0.0, 0.01, size=public.shape)
                obf = obfuscate(victim, seed=c_out, mask_std=np.sqrt(0.5))
                start_time = time.time()
                report = attack_layer(obf, public, var_threshold=0.02)
                duration = time.time() - start_time
                self.assertLess(duration, 5.0, f"{c_out} filters took {duration:.3f}s")
                self.assertEqual(report.recovered_filters.shape, public.shape)


if __name__ == "__main__":
    unittest.main()
