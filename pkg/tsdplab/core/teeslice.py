"""
Partition-before-training: private slices on a frozen public backbone.

Pipeline: build_dense -> train_dense -> iterative_prune -> deploy_plan.

A slice bridges backbone conv layers p < i (at most three apart). It reads
the output of block p and adds its gated output to the pre-activation of
block i:

    [AvgPool] -> 1x1 conv (c_p -> r) -> BN -> 1x1 conv (r -> c_i) -> Gate

r is the largest width keeping the adapter at or below 1/18 of conv i's
FLOPs. The gate scales by alpha = sigmoid(logit). The hybrid model is an
ordinary ModelGraph, so the nn-core engine trains and runs it; backbone
layers are frozen and never change.

FUNCTION INDEX:
===============

PUBLIC FUNCTIONS (External API):
--------------------------------
- build_dense(backbone, n_classes, seed): Densely sliced hybrid model
- complexity_penalty(m, lam): Penalty hook for train_sgd
- train_dense(m, d, cfg, lam): Train slices, gates and head
- remove_slices(m, keys): Copy of m without the given slices
- iterative_prune(m, d, pc, acc_vic, cfg, lam, eval_set): Slice pruning rounds
- deploy_plan(m): TEE/GPU placement of a hybrid model
- run_pipeline(backbone, train_set, n_classes, acc_vic, victim_cfg, ...): End to end
- save_hybrid(m, path) / load_hybrid(path): Container with slice table
- pruning_log_csv(log): CSV text of the pruning log

DATA CLASSES:
-------------
- Slice, PruneConfig, PruneRound
- HybridModel: ModelGraph with slice bookkeeping
"""

import csv
import dataclasses
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Set, Tuple, Union

import numpy as np

from tsdplab.core.container import KIND_HYBRID, model_from_topology, read_container, save_model
from tsdplab.core.data import Dataset
from tsdplab.core.flops import flops_of_layer, utility_of_plan
from tsdplab.core.layers import (
    AVGPOOL,
    BATCHNORM,
    CONV2D,
    LINEAR,
    RELU,
    LayerSpec,
    avgpool,
    batchnorm,
    conv2d,
    gate,
    linear,
    residual_add,
    sigmoid,
)
from tsdplab.core.nn import (
    ModelGraph,
    ParamKey,
    Penalty,
    TrainConfig,
    accuracy,
    param_checksum,
    train_sgd,
)
from tsdplab.core.partition import GPU, TEE, TEESLICE, PartitionPlan, blocks
from tsdplab.utils.logging import (
    TSDPFileError,
    TSDPIntegrityError,
    TSDPValidationError,
    logger,
)
from tsdplab.utils.rng import derive_seed, make_rng

MAX_SPAN = 3
ADAPTER_BUDGET = 18
DEFAULT_LAMBDA = 0.1
HEAD = "head"

PRUNE_CSV_COLUMNS = ["round", "acc", "stored", "pruned", "slices_remaining", "pct_flops_tee"]

SliceKey = Tuple[int, int]


@dataclass
class Slice:
    """Adapter A(p, i) between backbone conv layers p and i (1-based)."""

    p: int
    i: int
    source: str
    target: str
    nodes: List[str]
    reduction: int
    flops: int = 0

    @property
    def key(self) -> SliceKey:
        return (self.p, self.i)

    @property
    def gate(self) -> str:
        return self.nodes[-1]

    @property
    def label(self) -> str:
        return f"{self.p}-{self.i}"


@dataclass
class PruneConfig:
    delta: float = 0.01
    alpha_setup: float = 0.05
    n: int = 2
    rounds: int = 10

    def __post_init__(self) -> None:
        if not 0 < self.delta < 1:
            raise TSDPValidationError("delta must lie in (0, 1)")
        if not 0 < self.alpha_setup < 1:
            raise TSDPValidationError("alpha_setup must lie in (0, 1)")
        if self.n < 1 or self.rounds < 0:
            raise TSDPValidationError("n must be >= 1 and rounds >= 0")


@dataclass
class PruneRound:
    round: int
    acc: float
    stored: bool
    pruned: List[str]
    slices_remaining: int
    pct_flops_tee: float

    def to_csv_row(self) -> Dict[str, Any]:
        row = dataclasses.asdict(self)
        row["pruned"] = ";".join(self.pruned)
        return row


@dataclass
class HybridModel(ModelGraph):
    """Frozen backbone plus private slices, merge nodes and task head."""

    slices: List[Slice] = field(default_factory=list)
    backbone_layers: List[str] = field(default_factory=list)
    head: List[str] = field(default_factory=list)
    pruning_failed: bool = False
    prune_log: List[PruneRound] = field(default_factory=list)

    def alphas(self) -> Dict[SliceKey, float]:
        return {s.key: float(sigmoid(self.layer(s.gate).weights["logit"][0]))
                for s in self.slices}

    def slice_layers(self) -> Set[str]:
        return {name for s in self.slices for name in s.nodes}

    def backbone_checksum(self) -> str:
        return param_checksum(self, self.backbone_layers)

    def backbone_flops(self) -> int:
        return sum(flops_of_layer(self.layer(n)) for n in self.backbone_layers)


def _block_nodes(backbone: ModelGraph) -> List[List[LayerSpec]]:
    """Conv blocks of the backbone, excluding global pooling."""
    out = []
    for names in blocks(backbone):
        first = backbone.layer(names[0])
        if first.kind != CONV2D:
            continue
        out.append([backbone.layer(n) for n in names
                    if not (backbone.layer(n).kind == AVGPOOL
                            and backbone.layer(n).params.get("kernel", 0) == 0)])
    return out


def _copy_layer(layer: LayerSpec, frozen: bool) -> LayerSpec:
    return LayerSpec(name=layer.name, kind=layer.kind, params=dict(layer.params),
                     weights={k: v.copy() for k, v in layer.weights.items()},
                     inputs=list(layer.inputs), frozen=frozen)


def adapter_width(conv_flops: int, h: int, w: int, c_src: int, c_dst: int) -> int:
    """Largest r with 2*h*w*r*(c_src + c_dst + 1) <= conv_flops / 18."""
    return int(math.floor(conv_flops / ADAPTER_BUDGET / (2 * h * w * (c_src + c_dst + 1))))


def build_dense(backbone: ModelGraph, n_classes: int, seed: int = 0) -> HybridModel:
    """
    One slice for every conv pair with 1 <= i - p <= 3, gates at alpha 0.5,
    and a fresh linear head replacing the backbone's output layer.

    Pairs whose spatial sizes do not tile, or whose adapter would need width
    below 1, are skipped.
    """
    body = list(backbone.layers)
    if body[-1].kind == LINEAR:
        body = body[:-1]
    conv_blocks = _block_nodes(backbone)
    kept = {layer.name for layer in body}
    conv_blocks = [b for b in conv_blocks if b[0].name in kept]
    if len(conv_blocks) < 2:
        raise TSDPValidationError(
            f"Backbone {backbone.name} has {len(conv_blocks)} conv layers; slices need two"
        )

    layers = [_copy_layer(layer, frozen=True) for layer in body]
    by_name = {layer.name: layer for layer in layers}
    shapes = {layer.name: layer.out_shape for layer in backbone.layers}
    slices: List[Slice] = []
    pending: Dict[str, List[LayerSpec]] = {}

    for i_idx in range(2, len(conv_blocks) + 1):
        block_i = conv_blocks[i_idx - 1]
        conv_i = block_i[0]
        act = next((layer for layer in block_i if layer.kind == RELU), None)
        if act is None:
            logger.debug(f"Block {conv_i.name} has no activation; no slices end there")
            continue
        target = act.inputs[0]
        c_i, h_i, w_i = shapes[target]  # type: ignore[misc]
        merge_inputs = [target]
        for p_idx in range(max(1, i_idx - MAX_SPAN), i_idx):
            source = conv_blocks[p_idx - 1][-1].name
            c_s, h_s, w_s = shapes[source]  # type: ignore[misc]
            if h_s % h_i or w_s % w_i or h_s // h_i != w_s // w_i:
                logger.debug(f"Skipping slice {p_idx}-{i_idx}: {h_s}x{w_s} does not tile")
                continue
            r = adapter_width(flops_of_layer(conv_i), h_i, w_i, c_s, c_i)
            if r < 1:
                logger.debug(f"Skipping slice {p_idx}-{i_idx}: adapter budget below one channel")
                continue
            rng = make_rng(seed, "teeslice", p_idx, i_idx)
            tag = f"s{p_idx}_{i_idx}"
            adapter: List[LayerSpec] = []
            feed = source
            if h_s != h_i:
                adapter.append(avgpool(f"{tag}_pool", h_s // h_i, inputs=[feed]))
                feed = adapter[-1].name
            adapter.append(conv2d(f"{tag}_down", c_s, r, 1, rng=rng, inputs=[feed]))
            adapter.append(batchnorm(f"{tag}_bn", r, inputs=[adapter[-1].name]))
            adapter.append(conv2d(f"{tag}_up", r, c_i, 1, rng=rng, inputs=[adapter[-1].name]))
            adapter.append(gate(f"{tag}_gate", inputs=[adapter[-1].name]))
            pending.setdefault(act.name, []).extend(adapter)
            merge_inputs.append(adapter[-1].name)
            slices.append(Slice(p=p_idx, i=i_idx, source=source, target=target,
                                nodes=[a.name for a in adapter], reduction=r))
        if len(merge_inputs) > 1:
            merge = residual_add(f"merge{i_idx}", merge_inputs)
            pending[act.name].append(merge)
            by_name[act.name].inputs = [merge.name]

    if not slices:
        raise TSDPValidationError(f"Backbone {backbone.name} admits no slice pair")

    ordered: List[LayerSpec] = []
    for layer in layers:
        ordered.extend(pending.get(layer.name, []))
        ordered.append(layer)
    last = ordered[-1]
    n_feat = int(np.prod(shapes[last.name] or ()))
    ordered.append(linear(HEAD, n_feat, n_classes, rng=make_rng(seed, "teeslice", HEAD),
                          inputs=[last.name]))

    hybrid = HybridModel(
        layers=ordered,
        input_shape=backbone.input_shape,
        name=f"{backbone.name}_hybrid",
        meta={"backbone": backbone.name},
        slices=slices,
        backbone_layers=[layer.name for layer in layers],
        head=[HEAD],
    )
    for s in slices:
        s.flops = sum(flops_of_layer(hybrid.layer(n)) for n in s.nodes)
    hybrid.meta["backbone_checksum"] = hybrid.backbone_checksum()
    logger.info(f"Dense hybrid {hybrid.name}: {len(slices)} slices "
                f"{[s.label for s in slices]}")
    return hybrid


def complexity_penalty(m: HybridModel, lam: float = DEFAULT_LAMBDA) -> Penalty:
    """lam * sum(alpha * flops(A) / flops(backbone)) over the slices of `m`."""
    total = m.backbone_flops() or 1
    weights = {s.gate: s.flops / total for s in m.slices}

    def penalty(model: ModelGraph) -> Tuple[float, Dict[ParamKey, np.ndarray]]:
        value = 0.0
        grads: Dict[ParamKey, np.ndarray] = {}
        for name, share in weights.items():
            a = float(sigmoid(model.layer(name).weights["logit"][0]))
            value += lam * a * share
            grads[(name, "logit")] = np.array([lam * a * (1.0 - a) * share])
        return value, grads

    return penalty


def train_dense(
    m: HybridModel, d: Dataset, cfg: TrainConfig, lam: float = DEFAULT_LAMBDA,
    progress: bool = False,
) -> HybridModel:
    """Train slices, gates and head; backbone layers stay frozen."""
    if d.labels is None:
        raise TSDPValidationError("Hybrid training needs a labelled dataset")
    if lam < 0:
        raise TSDPValidationError("lambda must be >= 0")
    trained = train_sgd(m, d.images, d.labels, cfg,
                        penalty=complexity_penalty(m, lam) if lam else None,
                        progress=progress)
    assert isinstance(trained, HybridModel)
    alphas = {f"{p}-{i}": round(a, 4) for (p, i), a in trained.alphas().items()}
    logger.debug(f"alphas after training: {alphas}")
    return trained


def remove_slices(m: HybridModel, keys: Iterable[SliceKey]) -> HybridModel:
    """Copy of `m` without the given slices; merge nodes left with one input vanish."""
    drop = set(keys)
    out = m.copy()
    gone = {name for s in out.slices if s.key in drop for name in s.nodes}
    out.slices = [s for s in out.slices if s.key not in drop]

    layers: List[LayerSpec] = []
    renames: Dict[str, str] = {}
    for layer in out.layers:
        if layer.name in gone:
            continue
        layer.inputs = [renames.get(src, src) for src in layer.inputs if src not in gone]
        if layer.name.startswith("merge") and len(layer.inputs) == 1:
            renames[layer.name] = layer.inputs[0]
            continue
        layers.append(layer)
    out.layers = layers
    out.validate()
    return out


def _smallest(m: HybridModel, n: int) -> List[SliceKey]:
    alphas = m.alphas()
    return [key for key, _ in sorted(alphas.items(), key=lambda kv: (kv[1], kv[0]))[:n]]


def iterative_prune(
    m: HybridModel,
    d: Dataset,
    pc: PruneConfig,
    acc_vic: float,
    cfg: Optional[TrainConfig] = None,
    lam: float = DEFAULT_LAMBDA,
    eval_set: Optional[Dataset] = None,
) -> HybridModel:
    """
    Setup prune at alpha_setup, then per round: evaluate; if accuracy exceeds
    (1 - delta) * acc_vic store the model and prune the n smallest-alpha
    slices (ties to the lower (p, i)); retrain.

    Returns the last stored model. If none was ever stored, the dense model
    comes back with `pruning_failed` set. With rounds = 0 the setup-pruned
    model is returned.
    """
    if not 0 < acc_vic <= 1:
        raise TSDPValidationError(f"acc_vic must lie in (0, 1], got {acc_vic}")
    cfg = cfg or TrainConfig(epochs=1)
    ev = eval_set or d
    tol = (1.0 - pc.delta) * acc_vic

    setup = [key for key, a in m.alphas().items() if a < pc.alpha_setup]
    current = remove_slices(m, setup)
    logger.info(f"Setup prune removed {len(setup)} slices below alpha {pc.alpha_setup}")
    if pc.rounds == 0:
        return current

    stored: Optional[HybridModel] = None
    log: List[PruneRound] = []
    for r in range(1, pc.rounds + 1):
        acc = accuracy(current, ev.images, ev.labels)
        pruned: List[SliceKey] = []
        ok = acc > tol
        if ok:
            stored = current.copy()
            stored.prune_log = []
            pruned = _smallest(current, pc.n)
            current = remove_slices(current, pruned)
        if log:
            assert len(current.slices) <= log[-1].slices_remaining
        log.append(PruneRound(
            round=r, acc=acc, stored=ok, pruned=[f"{p}-{i}" for p, i in pruned],
            slices_remaining=len(current.slices),
            pct_flops_tee=utility_of_plan(current, deploy_plan(current)).pct_flops_tee,
        ))
        logger.info(f"Prune round {r}: acc {acc:.4f} (tol {tol:.4f}) "
                    f"{'stored, pruned ' + str(pruned) if ok else 'kept'}; "
                    f"{len(current.slices)} slices left")
        retrain_cfg = dataclasses.replace(cfg, seed=derive_seed(cfg.seed, "prune", r) % 2**31)
        current = train_dense(current, d, retrain_cfg, lam)

    if stored is None:
        logger.warning(f"Pruning failed: no round reached accuracy above {tol:.4f}")
        failed = m.copy()
        failed.pruning_failed = True
        failed.prune_log = log
        return failed
    stored.prune_log = log
    return stored


def deploy_plan(m: HybridModel) -> PartitionPlan:
    """Backbone conv and BN on the GPU; slices, merges, head and backbone non-linears in the TEE."""
    backbone = set(m.backbone_layers)
    placements = {
        layer.name: GPU if layer.name in backbone and layer.kind in (CONV2D, BATCHNORM) else TEE
        for layer in m.layers
    }
    return PartitionPlan(
        scheme=TEESLICE,
        placements=placements,
        config={"value": len(m.slices), "name": "slices"},
        meta={"slices": [s.label for s in m.slices],
              "backbone_checksum": m.meta.get("backbone_checksum")},
    )


def run_pipeline(
    backbone: ModelGraph,
    train_set: Dataset,
    n_classes: int,
    acc_vic: float,
    victim_cfg: TrainConfig,
    pc: Optional[PruneConfig] = None,
    lam: float = DEFAULT_LAMBDA,
    seed: int = 0,
    eval_set: Optional[Dataset] = None,
    progress: bool = False,
) -> Tuple[HybridModel, PartitionPlan]:
    """
    Dense training and pruning each get half the victim's epoch budget; the
    pruning half is spread evenly over the rounds.
    """
    pc = pc or PruneConfig()
    half = max(1, victim_cfg.epochs // 2)
    dense_cfg = dataclasses.replace(victim_cfg, epochs=half,
                                    seed=derive_seed(seed, "teeslice", "dense") % 2**31)
    round_cfg = dataclasses.replace(victim_cfg, epochs=max(1, half // max(pc.rounds, 1)),
                                    seed=derive_seed(seed, "teeslice", "prune") % 2**31)

    dense = build_dense(backbone, n_classes, seed=seed)
    public_sum = dense.backbone_checksum()
    dense = train_dense(dense, train_set, dense_cfg, lam, progress=progress)
    hybrid = iterative_prune(dense, train_set, pc, acc_vic, round_cfg, lam, eval_set)

    if hybrid.backbone_checksum() != public_sum:
        raise TSDPIntegrityError("Backbone parameters changed during slice training")
    plan = deploy_plan(hybrid)
    cost = utility_of_plan(hybrid, plan)
    logger.info(f"TEESlice deployed with {len(hybrid.slices)} slices, "
                f"pct_flops_tee={cost.pct_flops_tee:.4f}")
    return hybrid, plan


def _hybrid_meta(m: HybridModel) -> Dict[str, Any]:
    return {
        "slices": [dataclasses.asdict(s) for s in m.slices],
        "backbone_layers": list(m.backbone_layers),
        "head": list(m.head),
        "pruning_failed": m.pruning_failed,
        "prune_log": [dataclasses.asdict(r) for r in m.prune_log],
    }


def save_hybrid(m: HybridModel, path: Union[str, Path]) -> Path:
    return save_model(m, path, kind=KIND_HYBRID, extra_meta={"hybrid": _hybrid_meta(m)})


def load_hybrid(path: Union[str, Path]) -> HybridModel:
    _, meta, arrays = read_container(path, expected_kind=KIND_HYBRID)
    if "hybrid" not in meta or "topology" not in meta:
        raise TSDPFileError(f"{path} has no slice table")
    base = model_from_topology(meta["topology"], arrays)
    table = meta["hybrid"]
    return HybridModel(
        layers=base.layers,
        input_shape=base.input_shape,
        output_mode=base.output_mode,
        name=base.name,
        meta=base.meta,
        slices=[Slice(**s) for s in table["slices"]],
        backbone_layers=list(table["backbone_layers"]),
        head=list(table["head"]),
        pruning_failed=bool(table.get("pruning_failed", False)),
        prune_log=[PruneRound(**r) for r in table.get("prune_log", [])],
    )


def pruning_log_csv(log: List[PruneRound]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=PRUNE_CSV_COLUMNS)
    writer.writeheader()
    for row in log:
        writer.writerow(row.to_csv_row())
    return buf.getvalue()
