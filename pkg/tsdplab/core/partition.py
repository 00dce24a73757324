"""
Partition plans for the TEE-shielding schemes.

A plan places every layer of a model in the TEE, on the GPU, or on the GPU
in obfuscated form. Layer-count schemes count raw graph layers and then snap
the selection to whole blocks: a block is a weighted layer followed by the
non-weighted layers up to the next weighted layer, so BN/ReLU/pool/add always
travel with the conv or linear layer before them.

FUNCTION INDEX:
===============

PUBLIC FUNCTIONS (External API):
--------------------------------
- plan_noshield(model) / plan_blackbox(model): All-GPU / all-TEE baselines
- plan_deep(model, n_deep): Last n layers in the TEE
- plan_shallow(model, n_shallow): First n layers in the TEE
- plan_magnitude(model, mag_ratio): Largest-magnitude weights shielded
- plan_intermediate(model, soter_ratio, seed, scalar): Random layers shielded, rest scaled
- plan_nonlinear_obf(model, seed, r): Non-linear layers shielded, conv/linear obfuscated
- plan_ennclave(victim, backbone): Public shallow layers + private last layer
- build_plan(scheme, model, config, seed): Dispatch by scheme name
- scheme_grid(scheme, model): Configuration grid of a scheme
- blocks(model): Block decomposition used for boundary snapping
- plan_from_json(data) / PartitionPlan.to_json(): Replayable serialization

DATA CLASSES:
-------------
- PartitionPlan: Placement table plus scheme-specific extras
"""

import math
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Set, Tuple

import numpy as np

from tsdplab.core.layers import BATCHNORM, LayerSpec
from tsdplab.core.nn import INPUT, ModelGraph
from tsdplab.core.shadownet import DEFAULT_R, ObfuscatedLayer, obfuscate
from tsdplab.utils.logging import TSDPValidationError, logger
from tsdplab.utils.rng import make_rng

TEE = "TEE"
GPU = "GPU"
OBFUSCATED = "OBFUSCATED"
PLACEMENTS = (TEE, GPU, OBFUSCATED)

DEEP = "Deep"
SHALLOW = "Shallow"
MAGNITUDE = "Magnitude"
INTERMEDIATE = "Intermediate"
NONLINEAR_OBF = "NonLinearObf"
ENNCLAVE = "Ennclave"
TEESLICE = "TeeSlice"
NOSHIELD = "NoShield"
BLACKBOX = "BlackBox"
SCHEMES = (DEEP, SHALLOW, MAGNITUDE, INTERMEDIATE, NONLINEAR_OBF, ENNCLAVE, TEESLICE,
           NOSHIELD, BLACKBOX)

# Representative configuration per scheme when none is given
DEFAULT_CONFIGS: Dict[str, Any] = {
    DEEP: 1,
    SHALLOW: 4,
    MAGNITUDE: 0.01,
    INTERMEDIATE: 0.2,
    NONLINEAR_OBF: None,
}

SCHEME_GRIDS: Dict[str, List[Any]] = {
    MAGNITUDE: [0.0, 0.01, 0.1, 0.3, 0.5, 0.7, 0.9, 1.0],
    INTERMEDIATE: [0.0, 0.1, 0.2, 0.3, 0.5, 0.7, 0.9, 1.0],
}

SOTER_SCALAR_RANGE = (0.5, 2.0)


@dataclass
class PartitionPlan:
    """Placement table (configuration C) for one scheme instance."""

    scheme: str
    placements: Dict[str, str]
    weight_masks: Optional[Dict[str, np.ndarray]] = None
    scalars: Optional[Dict[str, float]] = None
    config: Dict[str, Any] = field(default_factory=dict)
    seed: Optional[int] = None
    meta: Dict[str, Any] = field(default_factory=dict)
    obfuscations: Dict[str, ObfuscatedLayer] = field(
        default_factory=dict, repr=False, compare=False
    )

    def __post_init__(self) -> None:
        if self.scheme not in SCHEMES:
            raise TSDPValidationError(f"Unknown scheme '{self.scheme}'")
        bad = {k: v for k, v in self.placements.items() if v not in PLACEMENTS}
        if bad:
            raise TSDPValidationError(f"Invalid placements: {bad}")
        if (self.weight_masks is not None) != (self.scheme == MAGNITUDE):
            raise TSDPValidationError("weight_masks are present iff scheme is Magnitude")
        if (self.scalars is not None) != (self.scheme == INTERMEDIATE):
            raise TSDPValidationError("scalars are present iff scheme is Intermediate")

    def layers_at(self, where: str) -> List[str]:
        return [name for name, p in self.placements.items() if p == where]

    @property
    def tee_layers(self) -> List[str]:
        return self.layers_at(TEE)

    @property
    def config_value(self) -> Any:
        return self.config.get("value")

    def check_total(self, model: ModelGraph) -> None:
        missing = [name for name in model.layer_names() if name not in self.placements]
        if missing:
            raise TSDPValidationError(f"Plan leaves layers unplaced: {missing}")

    def to_json(self) -> Dict[str, Any]:
        """JSON form; obfuscation secrets are excluded and regenerate from the seed."""
        data: Dict[str, Any] = {
            "scheme": self.scheme,
            "config": self.config,
            "seed": self.seed,
            "placements": dict(self.placements),
            "meta": self.meta,
        }
        if self.weight_masks is not None:
            data["weight_masks"] = {
                name: {"shape": list(mask.shape),
                       "indices": np.flatnonzero(mask).tolist()}
                for name, mask in self.weight_masks.items()
            }
        if self.scalars is not None:
            data["scalars"] = dict(self.scalars)
        return data


def plan_from_json(data: Dict[str, Any]) -> PartitionPlan:
    masks = None
    if "weight_masks" in data:
        masks = {}
        for name, spec in data["weight_masks"].items():
            mask = np.zeros(int(np.prod(spec["shape"])), dtype=bool)
            mask[np.asarray(spec["indices"], dtype=np.int64)] = True
            masks[name] = mask.reshape(spec["shape"])
    scalars = None
    if "scalars" in data:
        scalars = {k: float(v) for k, v in data["scalars"].items()}
    return PartitionPlan(
        scheme=data["scheme"],
        placements=dict(data["placements"]),
        weight_masks=masks,
        scalars=scalars,
        config=dict(data.get("config", {})),
        seed=data.get("seed"),
        meta=dict(data.get("meta", {})),
    )


def blocks(model: ModelGraph) -> List[List[str]]:
    """Layer names grouped into blocks; leading weightless layers join the first block."""
    out: List[List[str]] = []
    pending: List[str] = []
    for layer in model.layers:
        if layer.is_weighted:
            out.append(pending + [layer.name])
            pending = []
        elif out:
            out[-1].append(layer.name)
        else:
            pending.append(layer.name)
    if pending:
        out.append(pending)
    return out


def _snap(model: ModelGraph, selected: Set[str]) -> Set[str]:
    shielded: Set[str] = set()
    for block in blocks(model):
        if selected.intersection(block):
            shielded.update(block)
    return shielded


def _placements(model: ModelGraph, tee: Set[str], other: str = GPU) -> Dict[str, str]:
    return {layer.name: (TEE if layer.name in tee else other) for layer in model.layers}


def plan_noshield(model: ModelGraph) -> PartitionPlan:
    return PartitionPlan(scheme=NOSHIELD, placements=_placements(model, set()))


def plan_blackbox(model: ModelGraph) -> PartitionPlan:
    return PartitionPlan(scheme=BLACKBOX,
                         placements=_placements(model, set(model.layer_names())))


def _check_count(model: ModelGraph, n: int, what: str) -> None:
    if not 0 <= n <= len(model.layers):
        raise TSDPValidationError(
            f"{what} must lie in [0, {len(model.layers)}], got {n}"
        )


def plan_deep(model: ModelGraph, n_deep: int = 1) -> PartitionPlan:
    """Shield the last `n_deep` layers, snapped to block boundaries."""
    _check_count(model, n_deep, "n_deep")
    names = model.layer_names()
    selected = set(names[len(names) - n_deep:]) if n_deep else set()
    tee = _snap(model, selected)
    return PartitionPlan(scheme=DEEP, placements=_placements(model, tee),
                         config={"value": n_deep, "name": "n_deep"})


def plan_shallow(model: ModelGraph, n_shallow: int = 4) -> PartitionPlan:
    """Shield the first `n_shallow` layers, snapped to block boundaries."""
    _check_count(model, n_shallow, "n_shallow")
    tee = _snap(model, set(model.layer_names()[:n_shallow]))
    return PartitionPlan(scheme=SHALLOW, placements=_placements(model, tee),
                         config={"value": n_shallow, "name": "n_shallow"})


def plan_magnitude(model: ModelGraph, mag_ratio: float = 0.01) -> PartitionPlan:
    """
    Shield the `mag_ratio` fraction of conv/linear weights with the largest
    magnitude, selected globally across layers (ties to the lower flat index).

    Between the extremes, all non-linear layers run in the TEE and weighted
    layers run on the GPU with their shielded weights held back.
    """
    if not 0.0 <= mag_ratio <= 1.0:
        raise TSDPValidationError(f"mag_ratio must lie in [0, 1], got {mag_ratio}")
    weighted = model.weighted_layers()
    flat = np.concatenate([np.abs(layer.weights["weight"]).ravel() for layer in weighted])
    k = int(round(mag_ratio * flat.size))
    chosen = np.zeros(flat.size, dtype=bool)
    chosen[np.argsort(-flat, kind="stable")[:k]] = True

    masks: Dict[str, np.ndarray] = {}
    offset = 0
    for layer in weighted:
        size = layer.weights["weight"].size
        masks[layer.name] = chosen[offset:offset + size].reshape(layer.weights["weight"].shape)
        offset += size

    if mag_ratio >= 1.0:
        placements = _placements(model, set(model.layer_names()))
    elif mag_ratio <= 0.0:
        placements = _placements(model, set())
    else:
        placements = _placements(
            model, {layer.name for layer in model.layers if layer.is_nonlinear}
        )
    return PartitionPlan(
        scheme=MAGNITUDE,
        placements=placements,
        weight_masks=masks,
        config={"value": mag_ratio, "name": "mag_ratio"},
        meta={"selection": "global", "shielded_weights": k},
    )


def plan_intermediate(
    model: ModelGraph,
    soter_ratio: float = 0.2,
    seed: int = 0,
    scalar: Optional[float] = None,
) -> PartitionPlan:
    """
    Shield ceil(soter_ratio * L) randomly chosen weighted layers (with their
    blocks); every offloaded weighted layer is published as scalar * W.

    Without an explicit `scalar`, each offloaded layer draws its own from a
    log-uniform distribution on [0.5, 2].
    """
    if not 0.0 <= soter_ratio <= 1.0:
        raise TSDPValidationError(f"soter_ratio must lie in [0, 1], got {soter_ratio}")
    if scalar is not None and scalar == 0:
        raise TSDPValidationError("Blinding scalar must be non-zero")

    weighted = [layer.name for layer in model.weighted_layers()]
    k = int(math.ceil(round(soter_ratio * len(weighted), 9)))
    rng = make_rng(seed, "soter", model.name)
    picked = set(np.asarray(weighted)[rng.permutation(len(weighted))[:k]].tolist())
    tee = _snap(model, picked)

    lo, hi = np.log(SOTER_SCALAR_RANGE[0]), np.log(SOTER_SCALAR_RANGE[1])
    scalars: Dict[str, float] = {}
    for name in weighted:
        draw = float(np.exp(rng.uniform(lo, hi)))
        if name not in tee:
            scalars[name] = float(scalar) if scalar is not None else draw

    return PartitionPlan(
        scheme=INTERMEDIATE,
        placements=_placements(model, tee),
        scalars=scalars,
        config={"value": soter_ratio, "name": "soter_ratio"},
        seed=seed,
        meta={"shielded_weighted": sorted(picked)},
    )


def obfuscations_for(
    model: ModelGraph, names: Sequence[str], seed: int, r: float = DEFAULT_R
) -> Dict[str, ObfuscatedLayer]:
    return {
        name: obfuscate(model.layer(name).weights["weight"], r=r,
                        seed=int(make_rng(seed, "obf", name).integers(0, 2**31)))
        for name in names
    }


def plan_nonlinear_obf(model: ModelGraph, seed: int = 0, r: float = DEFAULT_R) -> PartitionPlan:
    """Non-linear and batch-norm layers in the TEE; conv/linear layers obfuscated."""
    tee = {layer.name for layer in model.layers
           if layer.is_nonlinear or layer.kind == BATCHNORM}
    if not tee:
        logger.warning(f"Model {model.name} has no non-linear layers; TEE set is empty")
    placements = _placements(model, tee, other=OBFUSCATED)
    obf_names = [name for name, p in placements.items() if p == OBFUSCATED]
    plan = PartitionPlan(
        scheme=NONLINEAR_OBF,
        placements=placements,
        seed=seed,
        meta={"r": r},
    )
    plan.obfuscations = obfuscations_for(model, obf_names, seed, r)
    return plan


def ensure_obfuscations(model: ModelGraph, plan: PartitionPlan) -> Dict[str, ObfuscatedLayer]:
    """Regenerate obfuscations dropped by JSON serialization."""
    names = plan.layers_at(OBFUSCATED)
    if names and not all(name in plan.obfuscations for name in names):
        plan.obfuscations = obfuscations_for(
            model, names, plan.seed or 0, plan.meta.get("r", DEFAULT_R)
        )
    return plan.obfuscations


def plan_ennclave(victim: ModelGraph, backbone: ModelGraph) -> Tuple[PartitionPlan, ModelGraph]:
    """
    Public backbone layers before the last weighted layer (GPU) joined to the
    victim's last weighted layer and everything after it (TEE).
    """
    v_last = victim.weighted_layers()[-1]
    b_last = backbone.weighted_layers()[-1]
    v_idx = victim.layer_names().index(v_last.name)
    b_idx = backbone.layer_names().index(b_last.name)
    feed = b_last.inputs[0]
    feed_shape = backbone.input_shape if feed == INPUT else backbone.layer(feed).out_shape
    if tuple(feed_shape or ()) != tuple(v_last.in_shape or ()):
        raise TSDPValidationError(
            f"Backbone feature shape {feed_shape} does not match the victim's last "
            f"layer input {v_last.in_shape}"
        )

    head_layers: List[LayerSpec] = [
        LayerSpec(name=layer.name, kind=layer.kind, params=dict(layer.params),
                  weights={k: v.copy() for k, v in layer.weights.items()},
                  inputs=list(layer.inputs), frozen=layer.frozen)
        for layer in backbone.layers[:b_idx]
    ]
    taken = {layer.name for layer in head_layers}
    tail_layers: List[LayerSpec] = []
    renames = {v_last.inputs[0]: feed}
    for layer in victim.layers[v_idx:]:
        name = layer.name if layer.name not in taken else f"vic_{layer.name}"
        renames[layer.name] = name
        tail_layers.append(
            LayerSpec(name=name, kind=layer.kind, params=dict(layer.params),
                      weights={k: v.copy() for k, v in layer.weights.items()},
                      inputs=[renames.get(s, s) for s in layer.inputs],
                      frozen=layer.frozen)
        )
    composite = ModelGraph(
        layers=head_layers + tail_layers,
        input_shape=backbone.input_shape,
        name=f"{victim.name}_ennclave",
    )
    tee = {layer.name for layer in tail_layers}
    plan = PartitionPlan(scheme=ENNCLAVE, placements=_placements(composite, tee),
                         meta={"backbone": backbone.name})
    return plan, composite


def scheme_grid(scheme: str, model: ModelGraph) -> List[Any]:
    """Configurations swept for `scheme`; layer-count schemes use block boundaries."""
    if scheme in SCHEME_GRIDS:
        return list(SCHEME_GRIDS[scheme])
    if scheme in (DEEP, SHALLOW):
        sizes = [len(b) for b in blocks(model)]
        if scheme == DEEP:
            sizes = sizes[::-1]
        return [0] + list(np.cumsum(sizes).astype(int).tolist())
    return [None]


def build_plan(
    scheme: str, model: ModelGraph, config: Any = None, seed: int = 0
) -> PartitionPlan:
    """Build a plan for any scheme that needs only the victim model."""
    if config is None:
        config = DEFAULT_CONFIGS.get(scheme)
    if scheme == NOSHIELD:
        return plan_noshield(model)
    if scheme == BLACKBOX:
        return plan_blackbox(model)
    if scheme == DEEP:
        return plan_deep(model, int(config))
    if scheme == SHALLOW:
        return plan_shallow(model, min(int(config), len(model.layers)))
    if scheme == MAGNITUDE:
        return plan_magnitude(model, float(config))
    if scheme == INTERMEDIATE:
        return plan_intermediate(model, float(config), seed=seed)
    if scheme == NONLINEAR_OBF:
        return plan_nonlinear_obf(model, seed=seed)
    raise TSDPValidationError(
        f"Scheme '{scheme}' needs extra artifacts; use plan_ennclave or teeslice.deploy_plan"
    )
