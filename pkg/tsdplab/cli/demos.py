"""
Stand-alone demonstrations: the ShadowNet recovery benchmark and the masked
offload walk-through.

FUNCTION INDEX:
===============

PUBLIC FUNCTIONS (External API):
--------------------------------
- shadownet_benchmark(n_layers, c_out, c_in, k, ...): Attack synthetic layers
- offload_demo(protocol, scheme, config, seed, ...): Execute a plan on a toy CNN

DATA CLASSES:
-------------
- ShadowNetSummary: Per-layer recovery rates and their aggregates
"""

from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

import numpy as np

from tsdplab.core.nn import build_toy_cnn, forward
from tsdplab.core.offload import (
    MASKED,
    PLAIN,
    QUANTIZED,
    CorruptingGpuWorker,
    GpuWorker,
    execute_plan,
    verify_log_jsonl,
)
from tsdplab.core.partition import build_plan
from tsdplab.core.shadownet import DEFAULT_R, DEFAULT_VAR_THRESHOLD, attack_layer, obfuscate
from tsdplab.utils.logging import TSDPValidationError, logger
from tsdplab.utils.rng import derive_seed, make_rng


@dataclass
class ShadowNetSummary:
    weight_recovery: List[float] = field(default_factory=list)
    position_recovery: List[float] = field(default_factory=list)
    candidates: List[int] = field(default_factory=list)

    @property
    def full_weight_recovery(self) -> float:
        """Fraction of layers whose whole weight set was recovered."""
        if not self.weight_recovery:
            return 0.0
        return float(np.mean([w >= 1.0 for w in self.weight_recovery]))

    @property
    def mean_position_recovery(self) -> float:
        return float(np.mean(self.position_recovery)) if self.position_recovery else 0.0

    def to_dict(self) -> Dict[str, Any]:
        return {
            "layers": len(self.weight_recovery),
            "full_weight_recovery": self.full_weight_recovery,
            "mean_weight_recovery": float(np.mean(self.weight_recovery or [0.0])),
            "mean_position_recovery": self.mean_position_recovery,
            "mean_candidates": float(np.mean(self.candidates or [0])),
        }


def shadownet_benchmark(
    n_layers: int = 100,
    c_out: int = 8,
    c_in: int = 4,
    k: int = 3,
    r: float = DEFAULT_R,
    weight_var: float = 0.005,
    mask_var: float = 0.5,
    finetune_std: float = 0.01,
    threshold: float = DEFAULT_VAR_THRESHOLD,
    mode: str = "greedy",
    seed: int = 0,
) -> ShadowNetSummary:
    """
    Obfuscate `n_layers` synthetic fine-tuned layers and attack each one.

    The public layer is drawn with variance `weight_var`; the victim layer is
    the public one plus N(0, finetune_std^2) noise and is what gets obfuscated.
    """
    if n_layers < 1:
        raise TSDPValidationError("n_layers must be >= 1")
    summary = ShadowNetSummary()
    for i in range(n_layers):
        rng = make_rng(seed, "shadownet_bench", i)
        public = rng.normal(0.0, np.sqrt(weight_var), size=(c_out, c_in, k, k))
        victim = public + rng.normal(0.0, finetune_std, size=public.shape)
        obf = obfuscate(victim, r=r, seed=derive_seed(seed, "obf", i) % 2**31,
                        mask_std=float(np.sqrt(mask_var)))
        report = attack_layer(obf, public, var_threshold=threshold, mode=mode, truth=victim)
        summary.weight_recovery.append(report.weight_recovery_rate)
        summary.position_recovery.append(report.position_recovery_rate)
        summary.candidates.append(report.n_candidates)
    logger.info(f"ShadowNet benchmark over {n_layers} layers: "
                f"full recovery {summary.full_weight_recovery:.3f}, "
                f"positions {summary.mean_position_recovery:.3f}")
    return summary


def offload_demo(
    protocol: str = MASKED,
    scheme: str = "Deep",
    config: Any = None,
    seed: int = 0,
    batch: int = 4,
    rounds: int = 1,
    corrupt: bool = False,
    verify_log: Optional[Union[str, Path]] = None,
) -> Dict[str, Any]:
    """
    Run a toy CNN through `execute_plan` and compare against references.

    PLAIN output is compared with the unpartitioned forward pass; MASKED
    output with QUANTIZED execution of the same plan. With `corrupt` the GPU
    tampers with every product and the Freivalds check raises.
    """
    if protocol not in (PLAIN, MASKED):
        raise TSDPValidationError(f"offload-demo runs {PLAIN} or {MASKED}, not {protocol}")
    model = build_toy_cnn(widths=(8, 16), seed=seed, name="offload_demo")
    plan = build_plan(scheme, model, config, seed=seed)
    x = make_rng(seed, "offload_demo", "x").uniform(0.0, 1.0, size=(batch,) + model.input_shape)

    gpu = CorruptingGpuWorker(seed=seed) if corrupt else GpuWorker()
    out, cost, log = execute_plan(model, plan, x, protocol=protocol, gpu=gpu,
                                  rounds=rounds, seed=seed)
    result: Dict[str, Any] = {
        "protocol": protocol,
        "scheme": scheme,
        "cost": cost.to_dict(),
        "gpu_calls": gpu.calls,
        "verified_products": len(log),
    }
    if protocol == PLAIN:
        result["max_abs_diff_vs_forward"] = float(np.max(np.abs(out - forward(model, x))))
    else:
        ref, _, _ = execute_plan(model, plan, x, protocol=QUANTIZED, seed=seed)
        result["bit_identical_to_quantized"] = bool(np.array_equal(out, ref))
        result["max_abs_diff_vs_forward"] = float(np.max(np.abs(out - forward(model, x))))
    if verify_log is not None:
        Path(verify_log).write_text(verify_log_jsonl(log), encoding="utf-8")
        result["verify_log"] = str(verify_log)
    return result
