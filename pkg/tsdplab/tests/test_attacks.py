"""
Tests for surrogate initialization, model stealing, membership inference and
the security metrics.
"""

import math
import unittest

import numpy as np

from tsdplab.core.attacks import (
    BACKBONE_ONLY,
    METRICS,
    REPORT_CSV_COLUMNS,
    VICTIM_KNOWN,
    AttackReport,
    LabelOnlyOracle,
    _membership,
    compute_metrics,
    mia_confidence,
    mia_gradient,
    model_steal,
    offloaded_tensors,
    relative_to_blackbox,
    surrogate_init,
    train_shadow,
)
from tsdplab.core.data import gen_synthetic, make_attacker_queryset, make_mia_split
from tsdplab.core.flops import CostReport, utility_of_plan
from tsdplab.core.nn import (
    TrainConfig,
    accuracy,
    build_toy_cnn,
    param_checksum,
    predict_labels,
    train_sgd,
)
from tsdplab.core.partition import build_plan
from tsdplab.core.teeslice import build_dense, deploy_plan
from tsdplab.utils.logging import TSDPValidationError


def _models(seed=0):
    public = build_toy_cnn(widths=(4, 8), seed=seed, name="public")
    victim = public.copy()
    victim.name = "victim"
    rng = np.random.default_rng(seed + 100)
    for layer in victim.weighted_layers():
        layer.weights["weight"] = layer.weights["weight"] + rng.normal(
            0.0, 0.01, size=layer.weights["weight"].shape)
    return public, victim


def _cost():
    return CostReport(flops_tee=1, flops_gpu=1, flops_total=2, pct_flops_tee=0.5,
                      sim_latency=0.0)


def _report(scheme, ms, config=None, seed=0):
    values = {m: 0.5 for m in METRICS}
    values["ms_accuracy"] = ms
    return AttackReport(scheme=scheme, config=config, seed=seed, utility=_cost(), **values)


class TestOracle(unittest.TestCase):
    """Label-only query access."""

    def test_counts_queries_and_hides_victim(self):
        """The oracle returns labels, counts samples and exposes no model."""
        _, victim = _models()
        oracle = LabelOnlyOracle(victim)
        x = np.random.default_rng(0).uniform(size=(5, 1, 12, 12))
        np.testing.assert_array_equal(oracle.query(x), predict_labels(victim, x))
        oracle.query(x[:2])
        self.assertEqual(oracle.queries, 7)
        self.assertFalse(hasattr(oracle, "victim"))
        with self.assertRaises(AttributeError):
            oracle.model = victim


class TestOffloadedTensors(unittest.TestCase):
    """What a GPU-side attacker can read."""

    def setUp(self):
        _, self.victim = _models()

    def test_plain_gpu_layer(self):
        """A plain GPU conv exposes weight and bias; TEE layers nothing."""
        plan = build_plan("Deep", self.victim)
        exposed = offloaded_tensors(self.victim.layer("conv1"), plan)
        self.assertEqual(set(exposed), {"weight", "bias"})
        self.assertEqual(offloaded_tensors(self.victim.layer("fc"), plan), {})

    def test_intermediate_hides_bias_and_scales_weight(self):
        """Blinded layers expose only scalar * W."""
        plan = build_plan("Intermediate", self.victim, 0.0, seed=1)
        layer = self.victim.layer("conv1")
        exposed = offloaded_tensors(layer, plan)
        self.assertEqual(set(exposed), {"weight"})
        np.testing.assert_allclose(exposed["weight"],
                                   plan.scalars["conv1"] * layer.weights["weight"])

    def test_magnitude_zeroes_shielded_weights(self):
        """Shielded entries read as zero; the bias is exposed."""
        plan = build_plan("Magnitude", self.victim, 0.5)
        layer = self.victim.layer("conv1")
        exposed = offloaded_tensors(layer, plan)
        self.assertEqual(set(exposed), {"weight", "bias"})
        mask = plan.weight_masks["conv1"]
        np.testing.assert_array_equal(exposed["weight"][mask], 0.0)
        np.testing.assert_array_equal(exposed["weight"][~mask], layer.weights["weight"][~mask])

    def test_batchnorm_exposes_statistics(self):
        """A GPU batch-norm layer leaks its running statistics."""
        plan = build_plan("NoShield", self.victim)
        exposed = offloaded_tensors(self.victim.layer("bn1"), plan)
        self.assertIn("running_mean", exposed)


class TestSurrogateInit(unittest.TestCase):
    """Surrogate initialization per scheme."""

    def setUp(self):
        self.public, self.victim = _models(seed=1)

    def test_noshield_copies_everything(self):
        """With nothing shielded the surrogate equals the victim."""
        si = surrogate_init(build_plan("NoShield", self.victim), self.victim, self.public)
        self.assertEqual(param_checksum(si.base), param_checksum(self.victim))

    def test_blackbox_is_the_public_model(self):
        """With everything shielded nothing is transplanted."""
        si = surrogate_init(build_plan("BlackBox", self.victim), self.victim, self.public)
        self.assertEqual(si.transplanted, [])
        self.assertEqual(param_checksum(si.base), param_checksum(self.public))

    def test_deep_keeps_public_head(self):
        """Deep transplants the GPU layers and keeps the public fc."""
        si = surrogate_init(build_plan("Deep", self.victim), self.victim, self.public)
        self.assertIn("conv1", si.transplanted)
        self.assertNotIn("fc", si.transplanted)
        np.testing.assert_array_equal(si.base.layer("fc").weights["weight"],
                                      self.public.layer("fc").weights["weight"])

    def test_magnitude_fills_shielded_entries_from_public(self):
        """Shielded weights keep their public values; the rest come from the victim."""
        plan = build_plan("Magnitude", self.victim, 0.1)
        si = surrogate_init(plan, self.victim, self.public)
        mask = plan.weight_masks["conv2"]
        got = si.base.layer("conv2").weights["weight"]
        np.testing.assert_array_equal(got[mask], self.public.layer("conv2").weights["weight"][mask])
        np.testing.assert_array_equal(got[~mask],
                                      self.victim.layer("conv2").weights["weight"][~mask])

    def test_obfuscated_layers_are_recovered(self):
        """Every obfuscated layer goes through the shadownet attack."""
        plan = build_plan("NonLinearObf", self.victim, seed=3)
        si = surrogate_init(plan, self.victim, self.public)
        self.assertEqual(set(si.recovery), {"conv1", "conv2", "fc"})
        for name, report in si.recovery.items():
            self.assertIn(name, si.transplanted)
            self.assertIsNone(report.weight_recovery_rate)
            self.assertEqual(si.base.layer(name).weights["weight"].shape,
                             self.victim.layer(name).weights["weight"].shape)

    def test_backbone_only_requires_teeslice(self):
        """BackboneOnly is rejected for non-TeeSlice plans."""
        with self.assertRaises(TSDPValidationError):
            surrogate_init(build_plan("Deep", self.victim), self.victim, self.public,
                           assumption=BACKBONE_ONLY)
        with self.assertRaises(TSDPValidationError):
            surrogate_init(build_plan("Deep", self.victim), self.victim, self.public,
                           assumption="Omniscient")

    def test_teeslice_assumptions(self):
        """The surrogate architecture follows the assumption."""
        public = build_toy_cnn(widths=(8, 16, 16), pool_after=(1,), seed=2, name="public")
        hybrid = build_dense(public, n_classes=4, seed=0)
        plan = deploy_plan(hybrid)
        known = surrogate_init(plan, hybrid, public)
        self.assertEqual(known.base.layer_names(), hybrid.layer_names())
        np.testing.assert_array_equal(known.base.layer("conv1").weights["weight"],
                                      public.layer("conv1").weights["weight"])
        backbone = surrogate_init(plan, hybrid, public, assumption=BACKBONE_ONLY)
        self.assertEqual(backbone.base.layer_names(), public.layer_names())
        arch = build_toy_cnn(widths=(8, 16), seed=9)
        victim_known = surrogate_init(plan, hybrid, public, assumption=VICTIM_KNOWN,
                                      victim_arch=arch)
        self.assertEqual(victim_known.base.layer_names(), arch.layer_names())


class TestStealingAndMetrics(unittest.TestCase):
    """Model stealing and the metric suite on a tiny trained victim."""

    @classmethod
    def setUpClass(cls):
        public_data = gen_synthetic(4, 8, 12, seed=0, distribution="public")
        private = gen_synthetic(4, 8, 12, seed=1, distribution="private")
        cls.testset = gen_synthetic(4, 4, 12, seed=2, distribution="private", id_offset=500)
        cls.mia = make_mia_split(private, seed=0)
        cfg = TrainConfig(epochs=4, batch_size=8)
        cls.public = train_sgd(build_toy_cnn(widths=(4, 8), seed=0, name="public"),
                               public_data.images, public_data.labels, cfg)
        cls.victim = train_sgd(cls.public, cls.mia.target_train.images,
                               cls.mia.target_train.labels, cfg)

    def test_model_steal_queries_oracle(self):
        """Stealing queries every sample once and returns a trained copy."""
        plan = build_plan("Deep", self.victim)
        si = surrogate_init(plan, self.victim, self.public)
        oracle = LabelOnlyOracle(self.victim)
        queryset = make_attacker_queryset(self.mia.attacker_pool, 6, seed=0)
        surrogate = model_steal(si, oracle, queryset, TrainConfig(epochs=1, batch_size=3))
        self.assertEqual(oracle.queries, 6)
        self.assertNotEqual(param_checksum(surrogate), param_checksum(si.base))

    def test_empty_queryset(self):
        """No queries leave the initialized surrogate as is."""
        si = surrogate_init(build_plan("Deep", self.victim), self.victim, self.public)
        oracle = LabelOnlyOracle(self.victim)
        empty = make_attacker_queryset(self.mia.attacker_pool, 0, seed=0)
        out = model_steal(si, oracle, empty, TrainConfig(epochs=1))
        self.assertEqual(oracle.queries, 0)
        self.assertEqual(param_checksum(out), param_checksum(si.base))

    def test_metrics_in_range(self):
        """All seven metrics lie in [0, 1] and the report serializes."""
        plan = build_plan("NoShield", self.victim)
        cost = utility_of_plan(self.victim, plan)
        report = compute_metrics(self.victim, self.victim, self.testset, self.mia, cost,
                                 shadow_cfg=TrainConfig(epochs=1, batch_size=8),
                                 scheme="NoShield", seed=0)
        for name in METRICS:
            value = report.metric(name)
            self.assertTrue(0.0 <= value <= 1.0, name)
        self.assertEqual(report.ms_accuracy, report.metric("ms_accuracy"))
        self.assertEqual(report.fidelity, 1.0)
        self.assertEqual(list(report.to_csv_row()), REPORT_CSV_COLUMNS)
        back = AttackReport.from_dict(report.to_dict())
        self.assertEqual(back.to_csv_row(), report.to_csv_row())
        self.assertGreater(report.queries, 0)

    def test_fidelity_bound(self):
        """fidelity >= ms_accuracy - (1 - victim accuracy) for any surrogate."""
        victim_acc = accuracy(self.victim, self.testset.images, self.testset.labels)
        plan = build_plan("NoShield", self.victim)
        cost = utility_of_plan(self.victim, plan)
        surrogates = [self.public, self.victim] + [
            build_toy_cnn(widths=(4, 8), seed=s) for s in range(3)]
        for i, surrogate in enumerate(surrogates):
            report = compute_metrics(surrogate, self.victim, self.testset, self.mia, cost,
                                     shadow_cfg=TrainConfig(epochs=1, batch_size=8),
                                     scheme="NoShield", seed=i)
            self.assertGreaterEqual(report.fidelity + 1e-12,
                                    report.ms_accuracy - (1.0 - victim_acc), f"surrogate {i}")


class TestMembershipProperties(unittest.TestCase):
    """Membership inference at chance level and on an overfit victim."""

    def test_random_surrogate_is_chance(self):
        """A surrogate with no victim information scores 0.5 +- 0.03 over 10 seeds."""
        oracle = LabelOnlyOracle(build_toy_cnn(widths=(4, 8), seed=99))
        cfg = TrainConfig(epochs=3, batch_size=16)
        conf, grad = [], []
        for seed in range(10):
            private = gen_synthetic(4, 64, 12, seed=seed, distribution="private")
            mia = make_mia_split(private, seed=seed)
            surrogate = build_toy_cnn(widths=(4, 8), seed=100 + seed)
            shadow = train_shadow(surrogate, mia, oracle, cfg)
            conf.append(mia_confidence(surrogate, mia, oracle, shadow=shadow).accuracy)
            grad.append(mia_gradient(surrogate, mia, shadow=shadow).accuracy)
        self.assertLessEqual(abs(float(np.mean(conf)) - 0.5), 0.03)
        self.assertLessEqual(abs(float(np.mean(grad)) - 0.5), 0.03)

    def test_overfit_victim_leaks_membership(self):
        """An overfit victim attacked as its own surrogate scores above 0.55."""
        cfg = TrainConfig(epochs=80, batch_size=8, lr_decay=(0.5, 40))
        conf, grad = [], []
        for seed in range(3):
            private = gen_synthetic(4, 16, 12, seed=seed, noise=0.4, distribution="private")
            mia = make_mia_split(private, seed=seed)
            victim = train_sgd(build_toy_cnn(seed=seed), mia.target_train.images,
                               mia.target_train.labels, cfg)
            oracle = LabelOnlyOracle(victim)
            shadow = train_shadow(victim, mia, oracle, cfg)
            conf.append(mia_confidence(victim, mia, oracle, shadow=shadow).accuracy)
            grad.append(mia_gradient(victim, mia, shadow=shadow).accuracy)
        self.assertGreater(float(np.mean(conf)), 0.55)
        self.assertGreater(float(np.mean(grad)), 0.55)


class TestMembershipClassifier(unittest.TestCase):
    """The shared member/non-member classifier."""

    def test_separable_features(self):
        """Perfectly separated features give balanced accuracy 1."""
        rng = np.random.default_rng(0)
        members = rng.normal(2.0, 0.1, size=(20, 3))
        others = rng.normal(-2.0, 0.1, size=(20, 3))
        out = _membership(members, others, members + 0.01, others - 0.01, "test")
        self.assertEqual(out.accuracy, 1.0)
        self.assertFalse(out.degenerate)

    def test_degenerate_inputs(self):
        """Empty or constant features report 0.5 and a degenerate flag."""
        empty = np.zeros((0, 3))
        some = np.ones((4, 3))
        self.assertTrue(_membership(empty, some, some, some, "test").degenerate)
        const = _membership(some, some, some, some, "test")
        self.assertEqual(const.accuracy, 0.5)
        self.assertTrue(const.degenerate)


class TestReports(unittest.TestCase):
    """Report helpers."""

    def test_unknown_metric(self):
        """Asking for an undefined metric raises."""
        with self.assertRaises(TSDPValidationError):
            _report("Deep", 0.5).metric("accuracy")

    def test_relative_to_blackbox(self):
        """Scheme means are divided by the BlackBox mean."""
        reports = [_report("BlackBox", 0.4), _report("BlackBox", 0.6),
                   _report("NoShield", 0.9), _report("Deep", 0.5, 1)]
        rel = relative_to_blackbox(reports, "ms_accuracy")
        self.assertAlmostEqual(rel["BlackBox"], 1.0)
        self.assertAlmostEqual(rel["NoShield"], 1.8)
        self.assertAlmostEqual(rel["Deep"], 1.0)

    def test_relative_without_baseline(self):
        """Without BlackBox every ratio is nan."""
        rel = relative_to_blackbox([_report("Deep", 0.5)], "ms_accuracy")
        self.assertTrue(math.isnan(rel["Deep"]))


if __name__ == "__main__":
    unittest.main()
