"""
Tests for partition plans of every scheme.
"""

import json
import unittest

import numpy as np

from tsdplab.core.data import gen_synthetic
from tsdplab.core.nn import TrainConfig, build_toy_cnn, forward, train_sgd
from tsdplab.core.partition import (
    BLACKBOX,
    DEEP,
    DEFAULT_CONFIGS,
    GPU,
    INTERMEDIATE,
    MAGNITUDE,
    NONLINEAR_OBF,
    NOSHIELD,
    OBFUSCATED,
    SHALLOW,
    TEE,
    PartitionPlan,
    blocks,
    build_plan,
    ensure_obfuscations,
    plan_ennclave,
    plan_from_json,
    plan_intermediate,
    plan_magnitude,
    scheme_grid,
)
from tsdplab.utils.logging import TSDPValidationError


class TestBlocks(unittest.TestCase):
    """Block boundaries follow weighted layers."""

    def test_blocks_of_toy_cnn(self):
        """Each block starts at a conv or linear layer."""
        model = build_toy_cnn(widths=(4, 8), pool_after=(1,))
        self.assertEqual(blocks(model), [
            ["conv1", "bn1", "relu1", "pool1"],
            ["conv2", "bn2", "relu2", "gap"],
            ["fc"],
        ])


class TestLayerCountSchemes(unittest.TestCase):
    """Deep and Shallow plans."""

    def setUp(self):
        self.model = build_toy_cnn(widths=(4, 8, 8))

    def test_deep_default_shields_the_head(self):
        """n_deep = 1 shields the final linear layer only."""
        plan = build_plan(DEEP, self.model)
        self.assertEqual(plan.tee_layers, ["fc"])
        self.assertEqual(plan.config_value, DEFAULT_CONFIGS[DEEP])

    def test_deep_snaps_to_blocks(self):
        """A partial block is shielded whole."""
        plan = build_plan(DEEP, self.model, 2)
        self.assertEqual(set(plan.tee_layers), {"conv3", "bn3", "relu3", "gap", "fc"})

    def test_shallow_snaps_to_blocks(self):
        """n_shallow = 3 shields the first block; 4 reaches into the second."""
        plan = build_plan(SHALLOW, self.model, 3)
        self.assertEqual(set(plan.tee_layers), {"conv1", "bn1", "relu1"})
        plan = build_plan(SHALLOW, self.model)
        self.assertEqual(set(plan.tee_layers),
                         {"conv1", "bn1", "relu1", "conv2", "bn2", "relu2"})

    def test_every_layer_placed(self):
        """Every plan places every layer exactly once."""
        for scheme in (DEEP, SHALLOW, MAGNITUDE, INTERMEDIATE, NONLINEAR_OBF, NOSHIELD, BLACKBOX):
            plan = build_plan(scheme, self.model)
            plan.check_total(self.model)
            self.assertEqual(set(plan.placements), set(self.model.layer_names()))

    def test_out_of_range(self):
        """Counts beyond the layer count are rejected."""
        with self.assertRaises(TSDPValidationError):
            build_plan(DEEP, self.model, len(self.model.layers) + 1)

    def test_grid_ends(self):
        """Layer-count grids run from 0 to the full model."""
        grid = scheme_grid(DEEP, self.model)
        self.assertEqual(grid[0], 0)
        self.assertEqual(grid[-1], len(self.model.layers))


class TestMagnitude(unittest.TestCase):
    """Global top-magnitude weight selection."""

    def setUp(self):
        self.model = build_toy_cnn(widths=(4, 8), seed=2)

    def test_selects_largest_weights(self):
        """Every shielded weight is at least as large as every offloaded one."""
        plan = plan_magnitude(self.model, 0.1)
        shielded, free = [], []
        for layer in self.model.weighted_layers():
            w = np.abs(layer.weights["weight"])
            mask = plan.weight_masks[layer.name]
            shielded.extend(w[mask].tolist())
            free.extend(w[~mask].tolist())
        self.assertGreaterEqual(min(shielded), max(free))
        self.assertEqual(len(shielded), plan.meta["shielded_weights"])

    def test_nonlinear_layers_in_tee(self):
        """Between the extremes non-linear layers are shielded."""
        plan = plan_magnitude(self.model, 0.3)
        self.assertEqual(plan.placements["relu1"], TEE)
        self.assertEqual(plan.placements["conv1"], GPU)

    def test_ratio_bounds(self):
        """Ratios outside [0, 1] are rejected."""
        with self.assertRaises(TSDPValidationError):
            plan_magnitude(self.model, 1.5)


class TestIntermediate(unittest.TestCase):
    """SOTER-style random layer shielding with blinding scalars."""

    def setUp(self):
        self.model = build_toy_cnn(widths=(4, 8, 8), seed=3)

    def test_shielded_count_and_scalars(self):
        """ceil(ratio * L) layers shielded, the rest carry scalars in range."""
        plan = plan_intermediate(self.model, 0.5, seed=1)
        self.assertEqual(len(plan.meta["shielded_weighted"]), 2)
        weighted = {layer.name for layer in self.model.weighted_layers()}
        self.assertEqual(set(plan.scalars), weighted - set(plan.tee_layers))
        for value in plan.scalars.values():
            self.assertTrue(0.5 <= value <= 2.0)

    def test_deterministic_in_seed(self):
        """Same seed, same plan."""
        a = plan_intermediate(self.model, 0.3, seed=4)
        b = plan_intermediate(self.model, 0.3, seed=4)
        self.assertEqual(a.placements, b.placements)
        self.assertEqual(a.scalars, b.scalars)

    def test_fixed_scalar(self):
        """An explicit scalar applies to every offloaded layer."""
        plan = plan_intermediate(self.model, 0.0, seed=0, scalar=1.5)
        self.assertTrue(all(v == 1.5 for v in plan.scalars.values()))
        with self.assertRaises(TSDPValidationError):
            plan_intermediate(self.model, 0.0, scalar=0.0)


class TestNonLinearObf(unittest.TestCase):
    """Obfuscated weighted layers with TEE-resident non-linearities."""

    def test_placements_and_regeneration(self):
        """Weighted layers are OBFUSCATED and secrets regenerate from JSON."""
        model = build_toy_cnn(widths=(4, 8), seed=1)
        plan = build_plan(NONLINEAR_OBF, model, seed=7)
        self.assertEqual(plan.placements["conv1"], OBFUSCATED)
        self.assertEqual(plan.placements["bn1"], TEE)
        self.assertEqual(plan.placements["relu1"], TEE)
        back = plan_from_json(json.loads(json.dumps(plan.to_json())))
        self.assertEqual(back.obfuscations, {})
        regen = ensure_obfuscations(model, back)
        np.testing.assert_array_equal(regen["conv1"].filters,
                                      plan.obfuscations["conv1"].filters)


class TestPlanJson(unittest.TestCase):
    """Plan serialization."""

    def test_magnitude_masks_survive(self):
        """Sparse mask indices restore the same boolean masks."""
        model = build_toy_cnn(widths=(4,), seed=0)
        plan = plan_magnitude(model, 0.2)
        back = plan_from_json(json.loads(json.dumps(plan.to_json())))
        for name, mask in plan.weight_masks.items():
            np.testing.assert_array_equal(back.weight_masks[name], mask)
        self.assertEqual(back.placements, plan.placements)

    def test_invariants_enforced(self):
        """Masks only for Magnitude and scalars only for Intermediate."""
        with self.assertRaises(TSDPValidationError):
            PartitionPlan(scheme=DEEP, placements={}, weight_masks={})
        with self.assertRaises(TSDPValidationError):
            PartitionPlan(scheme=INTERMEDIATE, placements={})
        with self.assertRaises(TSDPValidationError):
            PartitionPlan(scheme=DEEP, placements={"a": "CPU"})
        with self.assertRaises(TSDPValidationError):
            PartitionPlan(scheme="Unknown", placements={})


class TestEnnclave(unittest.TestCase):
    """Public backbone joined to the victim head."""

    def test_composite_structure(self):
        """GPU part comes from the backbone and the TEE part from the victim."""
        backbone = build_toy_cnn(widths=(4, 8), seed=1, name="public")
        data = gen_synthetic(4, 4, 12, seed=0)
        victim = train_sgd(backbone, data.images, data.labels, TrainConfig(epochs=1))
        victim.name = "victim"
        plan, composite = plan_ennclave(victim, backbone)
        self.assertEqual(plan.tee_layers, ["fc"])
        np.testing.assert_array_equal(composite.layer("conv1").weights["weight"],
                                      backbone.layer("conv1").weights["weight"])
        np.testing.assert_array_equal(composite.layer("fc").weights["weight"],
                                      victim.layer("fc").weights["weight"])
        self.assertEqual(forward(composite, data.images).shape, (16, 4))

    def test_shape_mismatch(self):
        """A backbone whose features do not fit the victim head is rejected."""
        victim = build_toy_cnn(widths=(4, 8), seed=1)
        backbone = build_toy_cnn(widths=(4, 6), seed=1)
        with self.assertRaises(TSDPValidationError):
            plan_ennclave(victim, backbone)

    def test_build_plan_refuses(self):
        """Ennclave and TeeSlice cannot be built from the victim alone."""
        model = build_toy_cnn()
        for scheme in ("Ennclave", "TeeSlice"):
            with self.assertRaises(TSDPValidationError):
                build_plan(scheme, model)


if __name__ == "__main__":
    unittest.main()
