"""
FLOPs accounting, the %FLOPs utility metric and the synthetic latency model.

Only convolution, linear and batch-norm layers contribute FLOPs. Non-linear
layers are charged per output element in `sim_latency` only. TEE work is
charged TEE_SLOWDOWN times GPU work.

FUNCTION INDEX:
===============

PUBLIC FUNCTIONS (External API):
--------------------------------
- flops_of_layer(layer): 2*c_in*k^2*h*w*c_out / 2*c_in*c_out / 2*c*h*w / 0
- model_flops(model): Total FLOPs of a graph
- utility_of_plan(model, plan): CostReport for a partition plan
- count_multiply_adds(layer, x): Naive-loop evaluation with an operation counter

DATA CLASSES:
-------------
- CostReport: TEE/GPU FLOPs split, %FLOPs and simulated latency
"""

from dataclasses import dataclass
from typing import TYPE_CHECKING, Any, Dict, List, Tuple

import numpy as np

from tsdplab.core.layers import BATCHNORM, CONV2D, LINEAR, LayerSpec
from tsdplab.core.nn import ModelGraph
from tsdplab.utils.logging import TSDPValidationError

if TYPE_CHECKING:
    from tsdplab.core.partition import PartitionPlan

TEE_SLOWDOWN = 30.0
LATENCY_SCALE = 1e-6
NONLINEAR_ELEMENT_COST = 1.0

COST_CSV_COLUMNS = ["scheme", "config", "flops_tee", "flops_gpu", "pct", "sim_latency"]


@dataclass
class CostReport:
    """Where a model's FLOPs run, and what that costs in simulated time."""

    flops_tee: int
    flops_gpu: int
    flops_total: int
    pct_flops_tee: float
    sim_latency: float

    def to_csv_row(self, scheme: str, config: Any) -> Dict[str, Any]:
        return {
            "scheme": scheme,
            "config": "" if config is None else config,
            "flops_tee": self.flops_tee,
            "flops_gpu": self.flops_gpu,
            "pct": self.pct_flops_tee,
            "sim_latency": self.sim_latency,
        }

    def to_dict(self) -> Dict[str, Any]:
        return {
            "flops_tee": self.flops_tee,
            "flops_gpu": self.flops_gpu,
            "flops_total": self.flops_total,
            "pct_flops_tee": self.pct_flops_tee,
            "sim_latency": self.sim_latency,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "CostReport":
        return cls(
            flops_tee=int(data["flops_tee"]),
            flops_gpu=int(data["flops_gpu"]),
            flops_total=int(data["flops_total"]),
            pct_flops_tee=float(data["pct_flops_tee"]),
            sim_latency=float(data["sim_latency"]),
        )


def flops_of_layer(layer: LayerSpec) -> int:
    """FLOPs of one layer from its kind parameters and inferred shapes."""
    if layer.kind not in (CONV2D, LINEAR, BATCHNORM):
        return 0
    if layer.in_shape is None or layer.out_shape is None:
        raise TSDPValidationError(
            f"Layer {layer.name} has unresolved spatial dims; add it to a ModelGraph"
        )
    p = layer.params
    if layer.kind == LINEAR:
        return 2 * p["c_in"] * p["c_out"]
    if layer.kind == CONV2D:
        _, h, w = layer.out_shape
        return 2 * p["c_in"] * p["k"] * p["k"] * h * w * p["c_out"]
    return 2 * int(np.prod(layer.in_shape))


def model_flops(model: ModelGraph) -> int:
    return sum(flops_of_layer(layer) for layer in model.layers)


def utility_of_plan(model: ModelGraph, plan: "PartitionPlan") -> CostReport:
    """
    Sum FLOPs per placement.

    OBFUSCATED layers run on the GPU. For layers with a weight mask, the TEE
    share is the masked fraction of the layer's FLOPs.
    """
    names = set(model.layer_names())
    missing = sorted(names - set(plan.placements))
    extra = sorted(set(plan.placements) - names)
    if missing or extra:
        raise TSDPValidationError(
            f"Plan does not match model: missing {missing}, unknown {extra}"
        )

    tee = 0.0
    gpu = 0.0
    nonlinear_cost = 0.0
    masks = plan.weight_masks or {}
    for layer in model.layers:
        where = plan.placements[layer.name]
        f = flops_of_layer(layer)
        if layer.name in masks and where != "TEE":
            share = float(np.mean(masks[layer.name])) if masks[layer.name].size else 0.0
            tee += share * f
            gpu += (1.0 - share) * f
        elif where == "TEE":
            tee += f
        else:
            gpu += f
        if layer.is_nonlinear and layer.out_shape is not None:
            elems = float(np.prod(layer.out_shape)) * NONLINEAR_ELEMENT_COST
            nonlinear_cost += elems * (TEE_SLOWDOWN if where == "TEE" else 1.0)

    total = model_flops(model)
    flops_tee = int(round(tee))
    flops_gpu = total - flops_tee
    pct = flops_tee / total if total else 0.0
    latency = LATENCY_SCALE * (TEE_SLOWDOWN * flops_tee + flops_gpu + nonlinear_cost)
    return CostReport(
        flops_tee=flops_tee,
        flops_gpu=flops_gpu,
        flops_total=total,
        pct_flops_tee=pct,
        sim_latency=latency,
    )


def count_multiply_adds(layer: LayerSpec, x: np.ndarray) -> Tuple[np.ndarray, int]:
    """
    Evaluate one sample through `layer` with explicit loops, counting every
    scalar multiply and add.

    Bias additions and the per-window accumulation are counted as one add per
    multiply, so the count equals twice the number of multiply-accumulates.
    """
    ops = 0
    w = layer.weights
    if layer.kind == LINEAR:
        flat = x.reshape(-1)
        c_out, c_in = w["weight"].shape
        y = np.zeros(c_out)
        for o in range(c_out):
            acc = w["bias"][o]
            for i in range(c_in):
                acc += w["weight"][o, i] * flat[i]
                ops += 2
            y[o] = acc
        return y, ops

    if layer.kind == CONV2D:
        p = layer.params
        k, s, pad = p["k"], p.get("stride", 1), p.get("padding", 0)
        xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
        assert layer.out_shape is not None
        c_out, ho, wo = layer.out_shape
        y = np.zeros((c_out, ho, wo))
        for o in range(c_out):
            for r in range(ho):
                for c in range(wo):
                    acc = w["bias"][o]
                    for ci in range(p["c_in"]):
                        for i in range(k):
                            for j in range(k):
                                acc += w["weight"][o, ci, i, j] * xp[ci, r * s + i, c * s + j]
                                ops += 2
                    y[o, r, c] = acc
        return y, ops

    if layer.kind == BATCHNORM:
        eps = layer.params.get("eps", 1e-5)
        scale = w["gamma"] / np.sqrt(w["running_var"] + eps)
        shift = w["beta"] - w["running_mean"] * scale
        y = np.zeros_like(x)
        for idx in np.ndindex(*x.shape):
            y[idx] = x[idx] * scale[idx[0]] + shift[idx[0]]
            ops += 2
        return y, ops

    return x.copy(), 0


def layer_flops_table(model: ModelGraph) -> List[Dict[str, Any]]:
    """Per-layer FLOPs rows for reporting."""
    return [
        {"layer": layer.name, "kind": layer.kind, "flops": flops_of_layer(layer)}
        for layer in model.layers
    ]
