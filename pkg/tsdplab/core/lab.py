"""
Experiment lab: the shared artifacts every scheme evaluation draws on.

A lab holds the public and private datasets, the public (backbone) model
pre-trained on public data, the victim fine-tuned from it on the private
target_train quarter, and the defended artifacts that need extra training
(the TEESlice hybrid and the Ennclave composite). `evaluate_cell` runs one
(scheme, config, seed) cell end to end and returns its AttackReport.

FUNCTION INDEX:
===============

PUBLIC FUNCTIONS (External API):
--------------------------------
- build_lab(cfg, seed, progress, with_teeslice): Generate data and train models
- evaluate_cell(lab, scheme, config, seed, assumption): One attack cell
- cell_key(scheme, config, seed): Log and cache key of a cell
- config_hash(cfg): Hash of a LabConfig for cache keys
- dataset_hash(d): SHA-256 over a dataset's images and labels

PRIVATE FUNCTIONS (Internal helpers):
-------------------------------------
- _train_cfg(cfg, epochs, seed, *keys): TrainConfig with a derived seed
- _target(lab, scheme, config, seed): Deployed model and plan for a cell

DATA CLASSES:
-------------
- LabConfig: Sizes, architecture and epoch budgets
- LabSetup: Datasets, models and hashes of one lab
"""

import hashlib
import json
import threading
from dataclasses import asdict, dataclass, field, fields
from typing import Any, Dict, Optional, Tuple

import numpy as np

from tsdplab.core.attacks import (
    HYBRID_KNOWN,
    VICTIM_KNOWN,
    AttackReport,
    LabelOnlyOracle,
    compute_metrics,
    model_steal,
    surrogate_init,
)
from tsdplab.core.data import (
    Dataset,
    MiaSplit,
    gen_synthetic,
    make_attacker_queryset,
    make_mia_split,
)
from tsdplab.core.flops import utility_of_plan
from tsdplab.core.nn import (
    ModelGraph,
    TrainConfig,
    accuracy,
    build_toy_cnn,
    param_checksum,
    train_sgd,
)
from tsdplab.core.partition import (
    ENNCLAVE,
    TEESLICE,
    PartitionPlan,
    build_plan,
    plan_ennclave,
)
from tsdplab.core.teeslice import HybridModel, PruneConfig, run_pipeline
from tsdplab.utils.config import ExperimentConfig
from tsdplab.utils.logging import TSDPValidationError, logger
from tsdplab.utils.rng import derive_seed


@dataclass
class LabConfig:
    """Toy-scale defaults; every field can be overridden from an ExperimentConfig."""

    n_classes: int = 4
    side: int = 12
    channels: int = 1
    public_per_class: int = 64
    private_per_class: int = 64
    test_per_class: int = 32
    noise: float = 0.1
    widths: Tuple[int, ...] = (8, 16, 16)
    pool_after: Tuple[int, ...] = (1,)
    kernel: int = 3
    public_epochs: int = 20
    victim_epochs: int = 40
    steal_epochs: int = 20
    shadow_epochs: int = 20
    batch_size: int = 32
    learning_rate: float = 0.05
    query_budget: int = 64
    teeslice_delta: float = 0.01
    teeslice_alpha_setup: float = 0.05
    teeslice_n: int = 2
    teeslice_rounds: int = 4
    teeslice_lambda: float = 0.1

    def __post_init__(self) -> None:
        self.widths = tuple(int(w) for w in self.widths)
        self.pool_after = tuple(int(p) for p in self.pool_after)
        if (self.n_classes * self.private_per_class) % 4:
            raise TSDPValidationError(
                "n_classes * private_per_class must be a multiple of 4 for the MIA split"
            )
        if self.query_budget > self.n_classes * self.private_per_class // 2:
            raise TSDPValidationError(
                f"query_budget {self.query_budget} exceeds the attacker pool "
                f"({self.n_classes * self.private_per_class // 2} samples)"
            )

    @property
    def prune_config(self) -> PruneConfig:
        return PruneConfig(delta=self.teeslice_delta, alpha_setup=self.teeslice_alpha_setup,
                           n=self.teeslice_n, rounds=self.teeslice_rounds)

    @classmethod
    def from_experiment(cls, exp: ExperimentConfig) -> "LabConfig":
        values: Dict[str, Any] = {}
        values.update(exp.dataset)
        values.update(exp.model)
        training = dict(exp.training)
        values.update(training)
        for key, value in exp.teeslice.items():
            values[f"teeslice_{key}"] = value
        if "budget" in exp.attack:
            values["query_budget"] = exp.attack["budget"]
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in values.items() if k in known})

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["widths"] = list(self.widths)
        data["pool_after"] = list(self.pool_after)
        return data


@dataclass
class LabSetup:
    cfg: LabConfig
    seed: int
    public: Dataset
    private: Dataset
    testset: Dataset
    mia: MiaSplit
    public_model: ModelGraph
    victim: ModelGraph
    victim_acc: float
    hybrid: Optional[HybridModel] = None
    hybrid_plan: Optional[PartitionPlan] = None
    model_hash: str = ""
    data_hash: str = ""
    config_hash: str = ""
    hybrid_hash: str = ""
    _ennclave: Optional[Tuple[PartitionPlan, ModelGraph]] = field(default=None, repr=False)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def ennclave(self) -> Tuple[PartitionPlan, ModelGraph]:
        """
        Ennclave plan and its composite model, trained on first use.

        The composite reuses the public layers on the GPU unchanged; only the
        TEE tail is trained on target_train.
        """
        with self._lock:
            if self._ennclave is None:
                plan, composite = plan_ennclave(self.victim, self.public_model)
                tee = set(plan.tee_layers)
                trained = train_sgd(
                    composite, self.mia.target_train.images, self.mia.target_train.labels,
                    _train_cfg(self.cfg, self.cfg.victim_epochs, self.seed, "ennclave"),
                    trainable=lambda lname, pname: lname in tee,
                )
                logger.info(f"Ennclave composite accuracy "
                            f"{accuracy(trained, self.testset.images, self.testset.labels):.4f}")
                self._ennclave = (plan, trained)
            return self._ennclave


def _train_cfg(cfg: LabConfig, epochs: int, seed: int, *keys: str) -> TrainConfig:
    return TrainConfig(batch_size=cfg.batch_size, epochs=epochs,
                       learning_rate=cfg.learning_rate,
                       seed=derive_seed(seed, *keys) % 2**31)


def dataset_hash(d: Dataset) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(d.images, dtype=np.float64).tobytes())
    if d.labels is not None:
        h.update(np.ascontiguousarray(d.labels, dtype=np.int64).tobytes())
    return h.hexdigest()


def cell_key(scheme: str, config: Any, seed: int) -> str:
    return f"{scheme}|{config}|seed={seed}"


def config_hash(cfg: LabConfig) -> str:
    """SHA-256 prefix over every LabConfig field, budgets and TEESlice settings included."""
    text = json.dumps(cfg.to_dict(), sort_keys=True)
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def build_lab(
    cfg: Optional[LabConfig] = None,
    seed: int = 0,
    progress: bool = False,
    with_teeslice: bool = True,
) -> LabSetup:
    """
    Generate the datasets and train the public model, the victim and (unless
    `with_teeslice` is False) the TEESlice hybrid.

    Public and private data come from different template families, so the
    public model is a transferable backbone rather than a copy of the victim.
    """
    cfg = cfg or LabConfig()
    n_pub = cfg.n_classes * cfg.public_per_class
    n_priv = cfg.n_classes * cfg.private_per_class
    public = gen_synthetic(cfg.n_classes, cfg.public_per_class, cfg.side,
                           seed=derive_seed(seed, "public") % 2**31, channels=cfg.channels,
                           noise=cfg.noise, distribution="public")
    private = gen_synthetic(cfg.n_classes, cfg.private_per_class, cfg.side,
                            seed=derive_seed(seed, "private") % 2**31, channels=cfg.channels,
                            noise=cfg.noise, distribution="private", id_offset=n_pub)
    testset = gen_synthetic(cfg.n_classes, cfg.test_per_class, cfg.side,
                            seed=derive_seed(seed, "test") % 2**31, channels=cfg.channels,
                            noise=cfg.noise, distribution="private",
                            id_offset=n_pub + n_priv)
    mia = make_mia_split(private, seed)
    logger.info(f"Lab data: {len(public)} public, {len(private)} private, "
                f"{len(testset)} test samples")

    arch = build_toy_cnn(in_channels=cfg.channels, side=cfg.side, n_classes=cfg.n_classes,
                         widths=cfg.widths, seed=seed, kernel=cfg.kernel,
                         pool_after=cfg.pool_after, name="public")
    public_model = train_sgd(arch, public.images, public.labels,
                             _train_cfg(cfg, cfg.public_epochs, seed, "public_model"),
                             progress=progress)
    victim_cfg = _train_cfg(cfg, cfg.victim_epochs, seed, "victim")
    victim = train_sgd(public_model, mia.target_train.images, mia.target_train.labels,
                       victim_cfg, progress=progress)
    victim.name = "victim"
    victim_acc = accuracy(victim, testset.images, testset.labels)
    logger.info(f"Public model acc {accuracy(public_model, public.images, public.labels):.4f}, "
                f"victim test acc {victim_acc:.4f}")

    lab = LabSetup(cfg=cfg, seed=seed, public=public, private=private, testset=testset,
                   mia=mia, public_model=public_model, victim=victim, victim_acc=victim_acc,
                   model_hash=param_checksum(victim)[:16],
                   data_hash=dataset_hash(private)[:16], config_hash=config_hash(cfg))
    if with_teeslice:
        lab.hybrid, lab.hybrid_plan = run_pipeline(
            public_model, mia.target_train, cfg.n_classes, victim_acc, victim_cfg,
            pc=cfg.prune_config, lam=cfg.teeslice_lambda, seed=seed, eval_set=testset,
            progress=progress,
        )
        lab.hybrid_hash = param_checksum(lab.hybrid)[:16]
    return lab


def _target(lab: LabSetup, scheme: str, config: Any, seed: int) -> Tuple[ModelGraph, PartitionPlan]:
    if scheme == TEESLICE:
        if lab.hybrid is None or lab.hybrid_plan is None:
            raise TSDPValidationError("This lab was built without the TEESlice hybrid")
        return lab.hybrid, lab.hybrid_plan
    if scheme == ENNCLAVE:
        plan, composite = lab.ennclave()
        return composite, plan
    return lab.victim, build_plan(scheme, lab.victim, config, seed=seed)


def evaluate_cell(
    lab: LabSetup,
    scheme: str,
    config: Any = None,
    seed: int = 0,
    assumption: str = HYBRID_KNOWN,
    progress: bool = False,
) -> AttackReport:
    """Partition, initialize the surrogate, steal, and measure all metrics for one cell."""
    key = cell_key(scheme, config, seed)
    log = logger.cell(key)
    cell_seed = derive_seed(seed, key) % 2**31

    victim, plan = _target(lab, scheme, config, cell_seed)
    utility = utility_of_plan(victim, plan)
    log.info(f"pct_flops_tee={utility.pct_flops_tee:.4f}")

    oracle = LabelOnlyOracle(victim)
    victim_arch = lab.victim if assumption == VICTIM_KNOWN else None
    si = surrogate_init(plan, victim, lab.public_model, assumption, victim_arch, seed=cell_seed)
    queryset = make_attacker_queryset(lab.mia.attacker_pool, lab.cfg.query_budget, cell_seed)
    surrogate = model_steal(si, oracle, queryset,
                            _train_cfg(lab.cfg, lab.cfg.steal_epochs, cell_seed, "steal"),
                            progress=progress)
    report = compute_metrics(
        surrogate, victim, lab.testset, lab.mia, utility, oracle,
        shadow_cfg=_train_cfg(lab.cfg, lab.cfg.shadow_epochs, cell_seed, "shadow"),
        scheme=scheme, config=config, seed=seed, assumption=assumption,
    )
    report.meta.update({"model_hash": lab.model_hash, "data_hash": lab.data_hash,
                        "config_hash": lab.config_hash,
                        "transplanted": list(si.transplanted)})
    log.info(f"ms_accuracy={report.ms_accuracy:.4f} conf_mia={report.conf_mia_acc:.4f}")
    return report


__all__ = [
    "LabConfig",
    "LabSetup",
    "build_lab",
    "evaluate_cell",
    "cell_key",
    "dataset_hash",
]
