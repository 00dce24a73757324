"""
Experiment commands: data generation, training, partitioning, attacks,
TEESlice, sweeps and full experiment runs.

FUNCTION INDEX:
===============

PUBLIC FUNCTIONS (External API):
--------------------------------
- generate_dataset(output, distribution, n_classes, per_class, side, ...): datagen
- train_model(dataset, output, widths, epochs, ...): train or fine-tune a toy CNN
- partition_model(model, scheme, config, seed, output, backbone): plan + cost
- load_lab(config_path, seed, with_teeslice, progress): LabSetup from a config file
- attack_cell(lab, scheme, config, seed, assumption, output): one AttackReport
- run_teeslice(lab, output): hybrid container, pruning log and plan
- run_sweep(definition, lab, output, workers): sweep JSON + frontier CSV
- run_experiment(cfg, workers, progress): artifact tree for an ExperimentConfig
- write_reports_csv(reports, path): reports in REPORT_CSV_COLUMNS order

PRIVATE FUNCTIONS (Internal Implementation):
-------------------------------------------
- _plan_for(lab, scheme, config, seed): Plan of one configuration
- _dump_json(data, path): Write indented JSON
- _cache_for(lab, output): Cell cache rooted in the output tree unless overridden
"""

import csv
import json
import os
from pathlib import Path
from typing import Any, Dict, Iterable, Optional, Sequence, Tuple, Union

from tsdplab.core.attacks import REPORT_CSV_COLUMNS, AttackReport, relative_to_blackbox
from tsdplab.core.container import KIND_HYBRID, load_model, read_container, save_model
from tsdplab.core.data import gen_synthetic, load_dataset, save_dataset
from tsdplab.core.flops import CostReport, utility_of_plan
from tsdplab.core.lab import LabConfig, LabSetup, build_lab, evaluate_cell
from tsdplab.core.nn import TrainConfig, accuracy, build_toy_cnn, train_sgd
from tsdplab.core.partition import (
    ENNCLAVE,
    TEESLICE,
    PartitionPlan,
    build_plan,
    plan_ennclave,
    scheme_grid,
)
from tsdplab.core.sweetspot import CellCache, SweepResult, frontier, frontier_csv, sweep
from tsdplab.core.teeslice import deploy_plan, load_hybrid, pruning_log_csv, save_hybrid
from tsdplab.utils.config import (
    ExperimentConfig,
    SweepDefinition,
    load_experiment_config,
)
from tsdplab.utils.logging import TSDPValidationError, logger

PathLike = Union[str, Path]

ARTIFACT_DIRS = ("data", "models", "plans", "reports", "sweeps", "logs")


def _dump_json(data: Any, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(data, f, indent=2, default=str)
    return path


def generate_dataset(
    output: PathLike,
    distribution: str = "public",
    n_classes: int = 4,
    per_class: int = 64,
    side: int = 12,
    channels: int = 1,
    noise: float = 0.1,
    seed: int = 0,
) -> Path:
    d = gen_synthetic(n_classes, per_class, side, seed=seed, channels=channels,
                      noise=noise, distribution=distribution)
    path = save_dataset(d, output)
    logger.info(f"Wrote {len(d)} {distribution} samples to {path}")
    return path


def train_model(
    dataset: PathLike,
    output: PathLike,
    widths: Sequence[int] = (8, 16, 16),
    pool_after: Sequence[int] = (1,),
    epochs: int = 20,
    learning_rate: float = 0.05,
    batch_size: int = 32,
    seed: int = 0,
    init: Optional[PathLike] = None,
    progress: bool = False,
) -> Tuple[Path, float]:
    """
    Train a toy CNN on a dataset file, or fine-tune the model in `init`.

    Returns:
        (model path, training-set accuracy)
    """
    d = load_dataset(dataset)
    if d.labels is None:
        raise TSDPValidationError(f"{dataset} has no labels to train on")
    if init is not None:
        model = load_model(init)
        if model.n_outputs != d.n_classes:
            raise TSDPValidationError(
                f"Model {init} has {model.n_outputs} outputs, dataset has {d.n_classes} classes"
            )
    else:
        c, side, _ = d.sample_shape
        model = build_toy_cnn(in_channels=c, side=side, n_classes=d.n_classes,
                              widths=widths, seed=seed, pool_after=pool_after,
                              name=Path(output).stem)
    cfg = TrainConfig(batch_size=batch_size, epochs=epochs, learning_rate=learning_rate,
                      seed=seed)
    trained = train_sgd(model, d.images, d.labels, cfg, progress=progress)
    acc = accuracy(trained, d.images, d.labels)
    path = save_model(trained, output, extra_meta={"train": {"epochs": epochs, "seed": seed,
                                                             "dataset": str(dataset)}})
    logger.info(f"Saved {trained.name} to {path} (train acc {acc:.4f})")
    return path, acc


def partition_model(
    model_path: PathLike,
    scheme: str,
    config: Any = None,
    seed: int = 0,
    output: Optional[PathLike] = None,
    backbone: Optional[PathLike] = None,
) -> Tuple[PartitionPlan, CostReport]:
    """Build a plan for a saved model; Ennclave needs `backbone`, TeeSlice a hybrid file."""
    if scheme == TEESLICE:
        kind, _, _ = read_container(model_path)
        if kind != KIND_HYBRID:
            raise TSDPValidationError("TeeSlice plans are deployed from a hybrid model file")
        model = load_hybrid(model_path)
        plan = deploy_plan(model)
    elif scheme == ENNCLAVE:
        if backbone is None:
            raise TSDPValidationError("Ennclave needs --backbone (the public model)")
        plan, model = plan_ennclave(load_model(model_path), load_model(backbone))
    else:
        model = load_model(model_path)
        plan = build_plan(scheme, model, config, seed=seed)
    cost = utility_of_plan(model, plan)
    if output is not None:
        _dump_json({"plan": plan.to_json(), "cost": cost.to_dict()}, Path(output))
    return plan, cost


def load_lab(
    config_path: Optional[PathLike] = None,
    seed: int = 0,
    with_teeslice: bool = True,
    progress: bool = False,
    budget: Optional[int] = None,
) -> Tuple[LabSetup, Optional[ExperimentConfig]]:
    exp = load_experiment_config(config_path) if config_path else None
    lab_cfg = LabConfig.from_experiment(exp) if exp else LabConfig()
    if budget is not None:
        values = lab_cfg.to_dict()
        values["query_budget"] = budget
        lab_cfg = LabConfig(**values)
    return build_lab(lab_cfg, seed=seed, progress=progress, with_teeslice=with_teeslice), exp


def attack_cell(
    lab: LabSetup,
    scheme: str,
    config: Any = None,
    seed: int = 0,
    assumption: str = "HybridKnown",
    output: Optional[PathLike] = None,
) -> AttackReport:
    report = evaluate_cell(lab, scheme, config, seed, assumption)
    if output is not None:
        _dump_json(report.to_dict(), Path(output))
    return report


def run_teeslice(lab: LabSetup, output: PathLike) -> Dict[str, Path]:
    """Write the hybrid container, its pruning log and its deployment plan."""
    if lab.hybrid is None or lab.hybrid_plan is None:
        raise TSDPValidationError("Lab was built without the TEESlice hybrid")
    out = Path(output)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"hybrid": save_hybrid(lab.hybrid, out / "hybrid.tsdm")}
    log_path = out / "pruning_log.csv"
    log_path.write_text(pruning_log_csv(lab.hybrid.prune_log), encoding="utf-8")
    paths["pruning_log"] = log_path
    cost = utility_of_plan(lab.hybrid, lab.hybrid_plan)
    paths["plan"] = _dump_json({"plan": lab.hybrid_plan.to_json(), "cost": cost.to_dict()},
                               out / "teeslice_plan.json")
    return paths


def _cache_for(lab: LabSetup, output: Optional[Path]) -> CellCache:
    root = None if os.environ.get("TSDPLAB_CACHE_DIR") or output is None else output / "cache"
    return CellCache.for_lab(lab, root)


def run_sweep(
    definition: SweepDefinition,
    lab: LabSetup,
    output: Optional[PathLike] = None,
    workers: int = 1,
) -> SweepResult:
    out = Path(output) if output is not None else None
    result = sweep(
        definition.scheme, definition.grid, lab, metric=definition.metric,
        delta=definition.delta, seeds=definition.seeds, one_sided=definition.one_sided,
        assumption=definition.assumption, cache=_cache_for(lab, out), workers=workers,
    )
    if out is not None:
        _dump_json(result.to_dict(), out / f"{definition.scheme}.json")
        if result.cells:
            (out / f"{definition.scheme}_frontier.csv").write_text(
                frontier_csv(frontier(result)), encoding="utf-8")
    return result


def write_reports_csv(reports: Iterable[AttackReport], path: PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=REPORT_CSV_COLUMNS)
        writer.writeheader()
        for report in reports:
            writer.writerow(report.to_csv_row())
    return path


def _plan_for(lab: LabSetup, scheme: str, config: Any, seed: int) -> PartitionPlan:
    if scheme == TEESLICE and lab.hybrid_plan is not None:
        return lab.hybrid_plan
    if scheme == ENNCLAVE:
        return lab.ennclave()[0]
    return build_plan(scheme, lab.victim, config, seed=seed)


def run_experiment(
    cfg: ExperimentConfig, workers: Optional[int] = None, progress: bool = False
) -> Tuple[int, Dict[str, Any]]:
    """
    Drive one experiment end to end.

    The lab is built from the first seed; every seed in `cfg.seeds` is a cell
    seed. Each scheme is swept over its grid (sweep metric and delta from the
    config, ms_accuracy and 0.05 otherwise) with cached cells. A rerun
    rebuilds and retrains the lab deterministically (same seeds, same hashes)
    and then recomputes no attack cell; only cells are cached. Failed cells
    are reported in the summary and make the exit status 1; the other cells
    still complete.

    Returns:
        (exit status, summary dict)
    """
    out = Path(cfg.output_dir)
    for sub in ARTIFACT_DIRS:
        (out / sub).mkdir(parents=True, exist_ok=True)
    handler = logger.attach_file(out / "logs" / "run.log")
    try:
        return _run(cfg, out, workers or cfg.workers, progress)
    finally:
        logger.detach_file(handler)


def _run(
    cfg: ExperimentConfig, out: Path, workers: int, progress: bool
) -> Tuple[int, Dict[str, Any]]:
    names = [s.name for s in cfg.schemes]
    lab_seed = cfg.seeds[0]
    lab = build_lab(LabConfig.from_experiment(cfg), seed=lab_seed, progress=progress,
                    with_teeslice=TEESLICE in names)
    _dump_json(cfg.to_dict(), out / "config.json")
    for name, d in (("public", lab.public), ("private", lab.private), ("test", lab.testset)):
        save_dataset(d, out / "data" / name)
    save_model(lab.public_model, out / "models" / "public.tsdm")
    save_model(lab.victim, out / "models" / "victim.tsdm")
    if lab.hybrid is not None:
        run_teeslice(lab, out / "models")

    summary: Dict[str, Any] = {
        "name": cfg.name,
        "lab_seed": lab_seed,
        "victim_acc": lab.victim_acc,
        "model_hash": lab.model_hash,
        "data_hash": lab.data_hash,
        "config_hash": lab.config_hash,
        "sweeps": {},
        "failures": {},
    }
    metric = cfg.sweep.get("metric", "ms_accuracy")
    delta = float(cfg.sweep.get("delta", 0.05))
    one_sided = bool(cfg.sweep.get("one_sided", True))
    assumption = cfg.attack.get("assumption", "HybridKnown")

    runs: Dict[Tuple[str, str, int], AttackReport] = {}
    for spec in cfg.schemes:
        grid = spec.grid if spec.grid is not None else (
            [None] if spec.name == TEESLICE else scheme_grid(spec.name, lab.victim))
        for config in grid:
            plan = _plan_for(lab, spec.name, config, lab_seed)
            label = "default" if config is None else config
            _dump_json(plan.to_json(), out / "plans" / f"{spec.name}_{label}.json")
        definition = SweepDefinition(scheme=spec.name, metric=metric, delta=delta, grid=grid,
                                     seeds=list(cfg.seeds), one_sided=one_sided,
                                     assumption=assumption)
        result = run_sweep(definition, lab, out / "sweeps", workers=workers)
        for report in result.runs:
            runs[(report.scheme, str(report.config), report.seed)] = report
        summary["sweeps"][spec.name] = {"chosen": result.chosen,
                                        "cells": len(result.cells)}
        summary["failures"].update(result.failures)

    reports = [runs[k] for k in sorted(runs)]
    write_reports_csv(reports, out / "reports" / "cells.csv")
    if reports:
        summary["relative_ms_accuracy"] = relative_to_blackbox(reports, "ms_accuracy")
    _dump_json(summary, out / "reports" / "summary.json")

    status = 1 if summary["failures"] else 0
    logger.info(f"Experiment {cfg.name}: {len(reports)} cell reports, "
                f"{len(summary['failures'])} failures, exit {status}")
    return status, summary


__all__ = [
    "ARTIFACT_DIRS",
    "attack_cell",
    "generate_dataset",
    "load_lab",
    "partition_model",
    "run_experiment",
    "run_sweep",
    "run_teeslice",
    "train_model",
    "write_reports_csv",
]
