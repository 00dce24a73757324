"""
Attack pipeline against a partitioned victim and the security metrics.

Phases: surrogate initialization (transplant what the GPU sees), model
stealing through a label-only oracle, and membership inference (posterior
based and gradient based) on the stolen surrogate.

FUNCTION INDEX:
===============

PUBLIC FUNCTIONS (External API):
--------------------------------
- offloaded_tensors(layer, plan): Parameter tensors a GPU-side attacker reads
- surrogate_init(plan, victim, public_model, assumption, ...): Weight transplant
- model_steal(si, oracle, queryset, cfg): Train the surrogate on oracle labels
- train_shadow(surrogate, mia, oracle, cfg): Shadow model on shadow_train
- mia_confidence(surrogate, mia, oracle, ...): Posterior-based membership attack
- mia_gradient(surrogate, mia, ...): Gradient-based membership attack
- compute_metrics(surrogate, victim, testset, mia, utility, ...): AttackReport
- relative_to_blackbox(reports, metric): Per-scheme metric relative to BlackBox

CLASSES:
--------
- LabelOnlyOracle: Victim behind a closure, answering argmax labels only
- SurrogateInit, MiaOutcome, AttackReport (dataclasses)
"""

import math
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence

import numpy as np
from sklearn.linear_model import LogisticRegression
from sklearn.metrics import balanced_accuracy_score
from sklearn.pipeline import Pipeline
from sklearn.preprocessing import StandardScaler

from tsdplab.core.data import Dataset, MiaSplit
from tsdplab.core.flops import CostReport
from tsdplab.core.layers import (
    BATCHNORM,
    CONV2D,
    GATE,
    LINEAR,
    LayerSpec,
    batchnorm,
    conv2d,
    linear,
)
from tsdplab.core.nn import (
    ModelGraph,
    TrainConfig,
    accuracy,
    loss_and_grads,
    pgd_attack,
    predict_labels,
    predict_proba,
    replace_head,
    train_sgd,
)
from tsdplab.core.offload import published_weight
from tsdplab.core.partition import (
    GPU,
    MAGNITUDE,
    TEESLICE,
    PartitionPlan,
    ensure_obfuscations,
)
from tsdplab.core.shadownet import RecoveryReport, attack_layer, calibrated_threshold
from tsdplab.utils.logging import TSDPValidationError, logger
from tsdplab.utils.rng import make_rng

HYBRID_KNOWN = "HybridKnown"
BACKBONE_ONLY = "BackboneOnly"
VICTIM_KNOWN = "VictimKnown"
ASSUMPTIONS = (HYBRID_KNOWN, BACKBONE_ONLY, VICTIM_KNOWN)

PGD_EPS = 0.03
PGD_STEPS = 7
MIA_CLASSIFIER = "StandardScaler+LogisticRegression(liblinear, balanced)"

METRICS = (
    "ms_accuracy",
    "fidelity",
    "asr",
    "conf_mia_acc",
    "grad_mia_acc",
    "generalization_gap",
    "confidence_gap",
)

REPORT_CSV_COLUMNS = [
    "scheme", "config", "seed", "assumption", *METRICS,
    "flops_tee", "flops_gpu", "pct_flops_tee", "sim_latency", "queries", "flags",
]


class LabelOnlyOracle:
    """
    Query access to a deployed victim.

    The victim lives only inside a closure; the oracle exposes `query(x)`
    returning argmax labels and a query counter, nothing else.
    """

    __slots__ = ("_answer", "queries")

    def __init__(self, victim: ModelGraph) -> None:
        def answer(x: np.ndarray) -> np.ndarray:
            return predict_labels(victim, x)

        self._answer: Callable[[np.ndarray], np.ndarray] = answer
        self.queries = 0

    def query(self, x: np.ndarray) -> np.ndarray:
        labels = self._answer(x)
        self.queries += int(labels.shape[0])
        return labels.astype(np.int64)


@dataclass
class SurrogateInit:
    base: ModelGraph
    transplanted: List[str]
    assumption: str
    scheme: str
    recovery: Dict[str, RecoveryReport] = field(default_factory=dict)


@dataclass
class MiaOutcome:
    accuracy: float
    degenerate: bool = False


@dataclass
class AttackReport:
    """Seven security metrics plus the utility cost of one cell."""

    scheme: str
    config: Any
    seed: int
    ms_accuracy: float
    fidelity: float
    asr: float
    conf_mia_acc: float
    grad_mia_acc: float
    generalization_gap: float
    confidence_gap: float
    utility: CostReport
    assumption: str = HYBRID_KNOWN
    queries: int = 0
    flags: List[str] = field(default_factory=list)
    skipped: Dict[str, str] = field(default_factory=dict)
    meta: Dict[str, Any] = field(default_factory=dict)

    def metric(self, name: str) -> float:
        if name not in METRICS:
            raise TSDPValidationError(f"Unknown metric '{name}'")
        return float(getattr(self, name))

    def to_csv_row(self) -> Dict[str, Any]:
        row: Dict[str, Any] = {
            "scheme": self.scheme,
            "config": "" if self.config is None else self.config,
            "seed": self.seed,
            "assumption": self.assumption,
        }
        row.update({m: getattr(self, m) for m in METRICS})
        row.update({
            "flops_tee": self.utility.flops_tee,
            "flops_gpu": self.utility.flops_gpu,
            "pct_flops_tee": self.utility.pct_flops_tee,
            "sim_latency": self.utility.sim_latency,
            "queries": self.queries,
            "flags": ";".join(self.flags),
        })
        return row

    def to_dict(self) -> Dict[str, Any]:
        data = {m: getattr(self, m) for m in METRICS}
        data.update({
            "scheme": self.scheme,
            "config": self.config,
            "seed": self.seed,
            "assumption": self.assumption,
            "queries": self.queries,
            "flags": list(self.flags),
            "skipped": dict(self.skipped),
            "meta": dict(self.meta),
            "utility": self.utility.to_dict(),
        })
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "AttackReport":
        return cls(
            scheme=data["scheme"],
            config=data.get("config"),
            seed=int(data.get("seed", 0)),
            utility=CostReport.from_dict(data["utility"]),
            assumption=data.get("assumption", HYBRID_KNOWN),
            queries=int(data.get("queries", 0)),
            flags=list(data.get("flags", [])),
            skipped=dict(data.get("skipped", {})),
            meta=dict(data.get("meta", {})),
            **{m: float(data[m]) for m in METRICS},
        )


# -- surrogate initialization ------------------------------------------------

def offloaded_tensors(layer: LayerSpec, plan: PartitionPlan) -> Dict[str, np.ndarray]:
    """
    What a GPU-side attacker reads for `layer`.

    Plain GPU layers expose every parameter. Intermediate layers expose only
    the scaled weight, Magnitude layers the weight with shielded entries
    zeroed plus the bias, OBFUSCATED layers nothing directly (see the
    shadownet attack). TEE layers expose nothing.
    """
    where = plan.placements[layer.name]
    if where != GPU:
        return {}
    if layer.kind == BATCHNORM or not layer.is_weighted:
        return {k: v.copy() for k, v in layer.weights.items()}
    if plan.scalars and layer.name in plan.scalars:
        return {"weight": published_weight(layer, plan)}
    return {"weight": published_weight(layer, plan), "bias": layer.weights["bias"].copy()}


def _unfreeze(model: ModelGraph) -> ModelGraph:
    for layer in model.layers:
        layer.frozen = False
    return model


def _same_architecture(a: ModelGraph, b: ModelGraph) -> bool:
    if a.layer_names() != b.layer_names():
        return False
    return all(
        la.kind == lb.kind
        and {k: v.shape for k, v in la.weights.items()}
        == {k: v.shape for k, v in lb.weights.items()}
        for la, lb in zip(a.layers, b.layers)
    )


def _fresh_weights(layer: LayerSpec, rng: np.random.Generator) -> Dict[str, np.ndarray]:
    p = layer.params
    if layer.kind == CONV2D:
        return conv2d(layer.name, p["c_in"], p["c_out"], p["k"], p.get("stride", 1),
                      p.get("padding", 0), rng=rng).weights
    if layer.kind == LINEAR:
        return linear(layer.name, p["c_in"], p["c_out"], rng=rng).weights
    if layer.kind == BATCHNORM:
        return batchnorm(layer.name, p["c_in"]).weights
    if layer.kind == GATE:
        return {"logit": np.zeros(1)}
    return {}


def _transplant(base: ModelGraph, victim: ModelGraph, plan: PartitionPlan) -> List[str]:
    names = []
    for layer in victim.layers:
        if plan.placements.get(layer.name) != GPU:
            continue
        try:
            target = base.layer(layer.name)
        except KeyError:
            continue
        tensors = offloaded_tensors(layer, plan)
        if plan.scheme == MAGNITUDE and "weight" in tensors and plan.weight_masks is not None:
            mask = plan.weight_masks[layer.name]
            tensors["weight"] = np.where(mask, target.weights["weight"], layer.weights["weight"])
        if not tensors or any(target.weights[k].shape != v.shape for k, v in tensors.items()):
            continue
        for k, v in tensors.items():
            target.weights[k] = v.copy()
        names.append(layer.name)
    return names


def _teeslice_init(
    plan: PartitionPlan,
    victim: ModelGraph,
    public_model: ModelGraph,
    assumption: str,
    victim_arch: Optional[ModelGraph],
    seed: int,
) -> SurrogateInit:
    n_classes = victim.n_outputs
    rng = make_rng(seed, "surrogate", TEESLICE)
    if assumption == HYBRID_KNOWN:
        base = victim.copy()
        backbone = set(getattr(victim, "backbone_layers", []))
        public_names = set(public_model.layer_names())
        for layer in base.layers:
            if layer.name in backbone and layer.name in public_names:
                layer.weights = {k: v.copy() for k, v in
                                 public_model.layer(layer.name).weights.items()}
            elif layer.weights:
                layer.weights = _fresh_weights(layer, rng)
    else:
        arch = victim_arch if assumption == VICTIM_KNOWN and victim_arch is not None \
            else public_model
        base = arch.copy()
        if base.n_outputs != n_classes:
            base = replace_head(base, n_classes, seed=seed)
    _unfreeze(base)
    base.output_mode = "Logits"
    transplanted = _transplant(base, victim, plan)
    return SurrogateInit(base=base, transplanted=transplanted, assumption=assumption,
                         scheme=plan.scheme)


def surrogate_init(
    plan: PartitionPlan,
    victim: ModelGraph,
    public_model: ModelGraph,
    assumption: str = HYBRID_KNOWN,
    victim_arch: Optional[ModelGraph] = None,
    seed: int = 0,
) -> SurrogateInit:
    """
    Start from the public model and copy in everything the GPU exposes.

    Magnitude layers take the offloaded weights and keep public values where
    the plan shields; OBFUSCATED layers take the filters the shadownet attack
    recovers with a threshold calibrated on the public layer. For TeeSlice
    the surrogate architecture follows the assumption: the hybrid structure
    with fresh slices (HybridKnown), the public backbone (BackboneOnly) or
    `victim_arch` (VictimKnown). BackboneOnly applies to TeeSlice only.
    """
    if assumption not in ASSUMPTIONS:
        raise TSDPValidationError(f"Unknown assumption '{assumption}'")
    plan.check_total(victim)
    if plan.scheme == TEESLICE:
        return _teeslice_init(plan, victim, public_model, assumption, victim_arch, seed)
    if assumption == BACKBONE_ONLY:
        raise TSDPValidationError(
            f"Assumption {BACKBONE_ONLY} applies to TeeSlice plans, not {plan.scheme}"
        )

    base = public_model.copy()
    if not _same_architecture(base, victim):
        if base.n_outputs != victim.n_outputs and base.layers[-1].kind == LINEAR:
            base = replace_head(base, victim.n_outputs, seed=seed)
        if not _same_architecture(base, victim) and not set(victim.layer_names()) <= \
                set(base.layer_names()) | set(plan.tee_layers):
            raise TSDPValidationError(
                f"Public model {public_model.name} is not compatible with victim {victim.name}"
            )
    _unfreeze(base)
    base.output_mode = "Logits"
    transplanted = _transplant(base, victim, plan)

    recovery: Dict[str, RecoveryReport] = {}
    for name, obf in ensure_obfuscations(victim, plan).items():
        public_w = base.layer(name).weights["weight"]
        report = attack_layer(obf, public_w, var_threshold=calibrated_threshold(public_w))
        base.layer(name).weights["weight"] = report.recovered_filters.copy()
        recovery[name] = report
        transplanted.append(name)
        logger.debug(f"Recovered {name}: {report.n_candidates} candidates")

    logger.debug(f"Surrogate for {plan.scheme}: transplanted {transplanted}")
    return SurrogateInit(base=base, transplanted=transplanted, assumption=assumption,
                         scheme=plan.scheme, recovery=recovery)


# -- model stealing ----------------------------------------------------------

def model_steal(
    si: SurrogateInit,
    oracle: LabelOnlyOracle,
    queryset: Dataset,
    cfg: TrainConfig,
    progress: bool = False,
) -> ModelGraph:
    """Fine-tune the initialized surrogate on (queryset, oracle labels)."""
    if len(queryset) == 0:
        return si.base.copy()
    labels = oracle.query(queryset.images)
    return train_sgd(si.base, queryset.images, labels, cfg, progress=progress)


# -- membership inference ----------------------------------------------------

def _top3(model: ModelGraph, x: np.ndarray) -> np.ndarray:
    proba = predict_proba(model, x)
    ordered = -np.sort(-proba, axis=1)
    if ordered.shape[1] < 3:
        ordered = np.pad(ordered, ((0, 0), (0, 3 - ordered.shape[1])))
    return ordered[:, :3]


def _gradient_features(model: ModelGraph, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """(loss, |dL/dx|, |dL/dW_last|) per sample."""
    last = model.weighted_layers()[-1].name
    rows = []
    for i in range(x.shape[0]):
        loss, grads, gx = loss_and_grads(model, x[i:i + 1], y[i:i + 1], input_grad=True)
        assert gx is not None
        rows.append([loss, float(np.linalg.norm(gx)),
                     float(np.linalg.norm(grads[(last, "weight")]))])
    return np.asarray(rows, dtype=np.float64).reshape(-1, 3)


def _attack_classifier() -> Pipeline:
    return Pipeline([
        ("scaler", StandardScaler()),
        ("classifier", LogisticRegression(
            random_state=42,
            max_iter=1000,
            C=1.0,
            solver="liblinear",
            class_weight="balanced",
        )),
    ])


def _membership(
    shadow_in: np.ndarray, shadow_out: np.ndarray,
    target_in: np.ndarray, target_out: np.ndarray, what: str,
) -> MiaOutcome:
    x_shadow = np.vstack([shadow_in, shadow_out])
    y_shadow = np.concatenate([np.ones(len(shadow_in)), np.zeros(len(shadow_out))])
    x_target = np.vstack([target_in, target_out])
    y_target = np.concatenate([np.ones(len(target_in)), np.zeros(len(target_out))])

    if len(shadow_in) == 0 or len(shadow_out) == 0 or len(target_in) == 0 or len(target_out) == 0:
        logger.warning(f"{what}: empty member or non-member set; reporting 0.5")
        return MiaOutcome(0.5, degenerate=True)
    if not np.all(np.isfinite(x_shadow)) or np.all(np.ptp(x_shadow, axis=0) == 0):
        logger.warning(f"{what}: shadow features carry no signal; reporting 0.5")
        return MiaOutcome(0.5, degenerate=True)

    clf = _attack_classifier()
    clf.fit(x_shadow, y_shadow)
    pred = clf.predict(np.nan_to_num(x_target))
    return MiaOutcome(float(balanced_accuracy_score(y_target, pred)))


def train_shadow(
    surrogate: ModelGraph,
    mia: MiaSplit,
    oracle: Optional[LabelOnlyOracle] = None,
    cfg: Optional[TrainConfig] = None,
) -> ModelGraph:
    """
    Shadow model with the surrogate's architecture, trained on shadow_train.

    Labels come from the oracle when one is given, else from the attacker's
    own ground truth.
    """
    shadow = mia.shadow_train
    labels = oracle.query(shadow.images) if oracle is not None else shadow.labels
    if labels is None:
        raise TSDPValidationError("Shadow training needs an oracle or labelled shadow data")
    return train_sgd(surrogate, shadow.images, labels, cfg or TrainConfig(epochs=30))


def mia_confidence(
    surrogate: ModelGraph,
    mia: MiaSplit,
    oracle: LabelOnlyOracle,
    shadow: Optional[ModelGraph] = None,
    cfg: Optional[TrainConfig] = None,
) -> MiaOutcome:
    """Member/non-member classifier over the sorted top-3 posterior."""
    shadow = shadow or train_shadow(surrogate, mia, oracle, cfg)
    return _membership(
        _top3(shadow, mia.shadow_train.images), _top3(shadow, mia.shadow_test.images),
        _top3(surrogate, mia.target_train.images), _top3(surrogate, mia.target_test.images),
        "conf-MIA",
    )


def mia_gradient(
    surrogate: ModelGraph,
    mia: MiaSplit,
    oracle: Optional[LabelOnlyOracle] = None,
    shadow: Optional[ModelGraph] = None,
    cfg: Optional[TrainConfig] = None,
) -> MiaOutcome:
    """Member/non-member classifier over (loss, input-grad norm, last-layer grad norm)."""
    shadow = shadow or train_shadow(surrogate, mia, oracle, cfg)

    def feats(model: ModelGraph, d: Dataset) -> np.ndarray:
        if d.labels is None:
            raise TSDPValidationError("Gradient MIA needs labelled samples")
        return _gradient_features(model, d.images, d.labels)

    return _membership(
        feats(shadow, mia.shadow_train), feats(shadow, mia.shadow_test),
        feats(surrogate, mia.target_train), feats(surrogate, mia.target_test),
        "grad-MIA",
    )


# -- metrics -----------------------------------------------------------------

def _clamp(value: float, name: str, flags: List[str]) -> float:
    if value < 0.0 or value > 1.0:
        flags.append(f"{name}_clamped")
        return min(max(value, 0.0), 1.0)
    return value


def compute_metrics(
    surrogate: ModelGraph,
    victim: ModelGraph,
    testset: Dataset,
    mia: MiaSplit,
    utility: CostReport,
    oracle: Optional[LabelOnlyOracle] = None,
    shadow: Optional[ModelGraph] = None,
    shadow_cfg: Optional[TrainConfig] = None,
    scheme: str = "",
    config: Any = None,
    seed: int = 0,
    assumption: str = HYBRID_KNOWN,
    eps: float = PGD_EPS,
    steps: int = PGD_STEPS,
) -> AttackReport:
    """
    All seven metrics for one (surrogate, victim) pair.

    ASR is measured on the test samples the victim classifies correctly; the
    PGD examples are crafted on the surrogate. Gaps compare the victim on
    target_train against target_test and are clamped to [0, 1] with a flag.
    """
    flags: List[str] = []
    skipped: Dict[str, str] = {}
    oracle = oracle or LabelOnlyOracle(victim)
    x, y = testset.images, testset.labels
    if y is None:
        raise TSDPValidationError("Metrics need a labelled test set")

    ms_acc = accuracy(surrogate, x, y)
    v_pred = predict_labels(victim, x)
    fidelity = float(np.mean(predict_labels(surrogate, x) == v_pred)) if len(y) else 0.0

    base = np.flatnonzero(v_pred == y)
    if base.size:
        adv = pgd_attack(surrogate, x[base], y[base], eps=eps, steps=steps)
        asr = float(np.mean(predict_labels(victim, adv) != y[base]))
    else:
        asr = 0.0
        skipped["asr"] = "victim classifies no test sample correctly"

    shadow = shadow or train_shadow(surrogate, mia, oracle, shadow_cfg)
    conf = mia_confidence(surrogate, mia, oracle, shadow=shadow)
    grad = mia_gradient(surrogate, mia, shadow=shadow)
    if conf.degenerate:
        flags.append("conf_mia_degenerate")
    if grad.degenerate:
        flags.append("grad_mia_degenerate")

    tt, te = mia.target_train, mia.target_test
    gen_gap = accuracy(victim, tt.images, tt.labels) - accuracy(victim, te.images, te.labels)
    conf_gap = float(predict_proba(victim, tt.images).max(axis=1).mean()
                     - predict_proba(victim, te.images).max(axis=1).mean())

    report = AttackReport(
        scheme=scheme,
        config=config,
        seed=seed,
        ms_accuracy=ms_acc,
        fidelity=fidelity,
        asr=asr,
        conf_mia_acc=conf.accuracy,
        grad_mia_acc=grad.accuracy,
        generalization_gap=_clamp(gen_gap, "generalization_gap", flags),
        confidence_gap=_clamp(conf_gap, "confidence_gap", flags),
        utility=utility,
        assumption=assumption,
        queries=oracle.queries,
        flags=flags,
        skipped=skipped,
        meta={"mia_classifier": MIA_CLASSIFIER, "pgd": {"eps": eps, "steps": steps}},
    )
    logger.debug(f"{scheme}[{config}] seed={seed}: ms={ms_acc:.3f} fid={fidelity:.3f} "
                 f"asr={asr:.3f} conf={conf.accuracy:.3f} grad={grad.accuracy:.3f}")
    return report


def relative_to_blackbox(reports: Sequence[AttackReport], metric: str) -> Dict[str, float]:
    """Mean metric per scheme divided by the BlackBox mean (nan without a baseline)."""
    by_scheme: Dict[str, List[float]] = {}
    for r in reports:
        by_scheme.setdefault(r.scheme, []).append(r.metric(metric))
    black = by_scheme.get("BlackBox")
    denom = float(np.mean(black)) if black else 0.0
    return {
        scheme: (float(np.mean(values)) / denom if denom else math.nan)
        for scheme, values in by_scheme.items()
    }
