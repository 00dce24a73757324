"""
Tests for synthetic data, the membership-inference split and the TSDP container.
"""

import os
import shutil
import tempfile
import unittest
from pathlib import Path

import numpy as np

from tsdplab.core.container import (
    KIND_DATASET,
    KIND_MODEL,
    MAGIC,
    load_model,
    read_container,
    save_model,
    write_container,
)
from tsdplab.core.data import (
    Dataset,
    concat_datasets,
    gen_synthetic,
    load_dataset,
    make_attacker_queryset,
    make_mia_split,
    save_dataset,
    subset,
)
from tsdplab.core.nn import build_toy_cnn, forward, param_checksum
from tsdplab.utils.logging import TSDPFileError, TSDPValidationError


class TestSyntheticData(unittest.TestCase):
    """gen_synthetic shapes, ranges and determinism."""

    def test_shapes_and_labels(self):
        """Class-major labels with n_per_class samples each."""
        d = gen_synthetic(n_classes=3, n_per_class=5, side=8, seed=1)
        self.assertEqual(d.images.shape, (15, 1, 8, 8))
        np.testing.assert_array_equal(d.class_histogram(), [5, 5, 5])
        self.assertEqual(list(d.labels[:5]), [0] * 5)

    def test_pixels_in_unit_interval(self):
        """Images are clipped to [0, 1] even with heavy noise."""
        d = gen_synthetic(n_classes=2, n_per_class=10, side=6, seed=0, noise=2.0)
        self.assertGreaterEqual(float(d.images.min()), 0.0)
        self.assertLessEqual(float(d.images.max()), 1.0)

    def test_deterministic_per_seed(self):
        """Same seed, same images; different seed, different images."""
        a = gen_synthetic(4, 3, 8, seed=5)
        b = gen_synthetic(4, 3, 8, seed=5)
        c = gen_synthetic(4, 3, 8, seed=6)
        np.testing.assert_array_equal(a.images, b.images)
        self.assertFalse(np.array_equal(a.images, c.images))

    def test_public_and_private_templates_differ(self):
        """The two distributions use different class templates."""
        pub = gen_synthetic(2, 2, 8, seed=0, noise=0.0, jitter=0, distribution="public")
        priv = gen_synthetic(2, 2, 8, seed=0, noise=0.0, jitter=0, distribution="private")
        self.assertFalse(np.allclose(pub.images, priv.images))

    def test_id_offset(self):
        """Sample ids start at id_offset."""
        d = gen_synthetic(2, 3, 8, seed=0, id_offset=100)
        self.assertEqual(list(d.sample_ids), list(range(100, 106)))

    def test_invalid_arguments(self):
        """Too-small side, single class and unknown distribution are rejected."""
        with self.assertRaises(TSDPValidationError):
            gen_synthetic(2, 2, 3, seed=0)
        with self.assertRaises(TSDPValidationError):
            gen_synthetic(1, 2, 8, seed=0)
        with self.assertRaises(TSDPValidationError):
            gen_synthetic(2, 2, 8, seed=0, distribution="other")

    def test_dataset_rejects_out_of_range_labels(self):
        """Labels must lie below n_classes."""
        with self.assertRaises(TSDPValidationError):
            Dataset(images=np.zeros((2, 1, 4, 4)), labels=np.array([0, 3]), n_classes=3)


class TestMiaSplit(unittest.TestCase):
    """Four disjoint, equal, stratified quarters."""

    def setUp(self):
        self.d = gen_synthetic(n_classes=4, n_per_class=6, side=8, seed=2)

    def test_quarters_are_disjoint_and_cover(self):
        """Every sample lands in exactly one quarter."""
        split = make_mia_split(self.d, seed=0)
        ids = [set(p.sample_ids.tolist()) for p in split.parts()]
        self.assertEqual(sum(len(s) for s in ids), len(self.d))
        self.assertEqual(set().union(*ids), set(self.d.sample_ids.tolist()))
        for i in range(4):
            for j in range(i + 1, 4):
                self.assertFalse(ids[i] & ids[j])

    def test_quarters_are_equal_and_stratified(self):
        """Equal sizes; per-class counts differ by at most one."""
        split = make_mia_split(self.d, seed=3)
        sizes = {len(p) for p in split.parts()}
        self.assertEqual(sizes, {6})
        hists = np.array([p.class_histogram() for p in split.parts()])
        self.assertLessEqual(int((hists.max(axis=0) - hists.min(axis=0)).max()), 1)

    def test_quarters_disjoint_and_equal_for_every_seed(self):
        """Disjoint, equal-sized quarters for 100 seeds."""
        for seed in range(100):
            split = make_mia_split(self.d, seed=seed)
            ids = [set(p.sample_ids.tolist()) for p in split.parts()]
            self.assertEqual({len(s) for s in ids}, {len(self.d) // 4}, f"seed {seed}")
            self.assertEqual(len(set().union(*ids)), len(self.d), f"seed {seed}")

    def test_attacker_pool_is_shadow_half(self):
        """The attacker pool is shadow_train plus shadow_test."""
        split = make_mia_split(self.d, seed=0)
        pool = split.attacker_pool
        self.assertEqual(len(pool), len(split.shadow_train) + len(split.shadow_test))
        target_ids = set(split.target_train.sample_ids.tolist())
        self.assertFalse(target_ids & set(pool.sample_ids.tolist()))

    def test_size_must_be_multiple_of_four(self):
        """A 6-sample dataset cannot be split."""
        with self.assertRaises(TSDPValidationError):
            make_mia_split(gen_synthetic(2, 3, 8, seed=0), seed=0)


class TestQuerySet(unittest.TestCase):
    """Attacker query sets."""

    def test_budget_respected_and_labels_stripped(self):
        """Exactly `budget` distinct samples without labels."""
        d = gen_synthetic(3, 10, 8, seed=0)
        q = make_attacker_queryset(d, 12, seed=4)
        self.assertEqual(len(q), 12)
        self.assertIsNone(q.labels)
        self.assertEqual(len(set(q.sample_ids.tolist())), 12)

    def test_budget_bounds(self):
        """Budgets above the pool size are rejected; zero is allowed."""
        d = gen_synthetic(2, 2, 8, seed=0)
        self.assertEqual(len(make_attacker_queryset(d, 0, seed=0)), 0)
        with self.assertRaises(TSDPValidationError):
            make_attacker_queryset(d, 5, seed=0)

    def test_subset_and_concat(self):
        """subset and concat_datasets preserve sample ids."""
        d = gen_synthetic(2, 4, 8, seed=0)
        joined = concat_datasets(subset(d, [0, 1]), subset(d, [6, 7]))
        self.assertEqual(list(joined.sample_ids), [0, 1, 6, 7])
        self.assertEqual(list(joined.labels), [0, 0, 1, 1])


class TestContainer(unittest.TestCase):
    """Binary container and model/dataset persistence."""

    def setUp(self):
        self.temp_dir = tempfile.mkdtemp()

    def tearDown(self):
        shutil.rmtree(self.temp_dir, ignore_errors=True)

    def test_dataset_save_load(self):
        """A saved dataset loads back with identical arrays and metadata."""
        d = gen_synthetic(3, 4, 8, seed=9, distribution="private", id_offset=50)
        path = save_dataset(d, Path(self.temp_dir) / "train")
        self.assertEqual(path.suffix, ".tsds")
        back = load_dataset(path)
        np.testing.assert_array_equal(back.images, d.images)
        np.testing.assert_array_equal(back.labels, d.labels)
        np.testing.assert_array_equal(back.sample_ids, d.sample_ids)
        self.assertEqual(back.distribution, "private")

    def test_unlabelled_dataset(self):
        """Query sets without labels survive persistence."""
        q = make_attacker_queryset(gen_synthetic(2, 4, 8, seed=0), 3, seed=0)
        back = load_dataset(save_dataset(q, Path(self.temp_dir) / "q.tsds"))
        self.assertIsNone(back.labels)

    def test_model_save_load(self):
        """Loaded model has the same weights, topology and outputs."""
        model = build_toy_cnn(residual=True, widths=(4, 4), seed=3)
        path = save_model(model, Path(self.temp_dir) / "m.tsdm")
        self.assertTrue(os.path.exists(str(path) + ".json"))
        back = load_model(path)
        self.assertEqual(back.layer_names(), model.layer_names())
        self.assertEqual(param_checksum(back), param_checksum(model))
        x = np.random.default_rng(0).uniform(size=(2, 1, 12, 12))
        np.testing.assert_array_equal(forward(back, x), forward(model, x))

    def test_bad_magic(self):
        """Non-container files raise TSDPFileError."""
        path = Path(self.temp_dir) / "junk.bin"
        path.write_bytes(b"NOPE" + b"\x00" * 16)
        with self.assertRaises(TSDPFileError):
            read_container(path)

    def test_truncated(self):
        """Truncated containers raise TSDPFileError."""
        path = Path(self.temp_dir) / "t.bin"
        write_container(path, KIND_MODEL, {"a": 1}, {"x": np.arange(10.0)})
        data = path.read_bytes()
        self.assertTrue(data.startswith(MAGIC))
        path.write_bytes(data[:-5])
        with self.assertRaises(TSDPFileError):
            read_container(path)

    def test_kind_mismatch(self):
        """Loading a model file as a dataset fails."""
        path = save_model(build_toy_cnn(), Path(self.temp_dir) / "m.tsdm")
        with self.assertRaises(TSDPFileError):
            read_container(path, expected_kind=KIND_DATASET)

    def test_missing_file(self):
        """A missing path raises TSDPFileError."""
        with self.assertRaises(TSDPFileError):
            load_model(Path(self.temp_dir) / "absent.tsdm")


if __name__ == "__main__":
    unittest.main()
