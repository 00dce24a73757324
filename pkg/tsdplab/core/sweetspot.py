"""
Sweet-spot search over a scheme's configuration grid.

For every configuration the cell is evaluated for each seed, metrics are
averaged, and the configuration with the smallest TEE FLOPs share whose
security stays within `delta` of the black-box baseline is chosen. Cells are
cached on disk so interrupted sweeps resume without recomputation.

FUNCTION INDEX:
===============

PUBLIC FUNCTIONS (External API):
--------------------------------
- sweep(scheme, grid, lab, metric, delta, seeds, ...): Evaluate a grid, pick C*
- choose(cells, black, delta, one_sided, metric): Index of the sweet spot
- brute_force_choice(rows, black, delta, one_sided): Re-scan of a cell table
- average_reports(reports): Seed-averaged AttackReport
- frontier(result): Utility/security points with baselines
- frontier_csv(front): Frontier as CSV text

PRIVATE FUNCTIONS (Internal helpers):
-------------------------------------
- _satisfies(value, black, delta, one_sided): Security constraint of one cell
- _run_cells(tasks, evaluate, cache, workers): Thread pool over cells

DATA CLASSES:
-------------
- CellCache: On-disk JSON cache of AttackReports
- SweepResult: Cells, baselines and the chosen configuration
- Frontier: Sorted points plus NoShield/BlackBox baselines
"""

import csv
import hashlib
import io
import json
import os
import threading
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from tsdplab.core.attacks import HYBRID_KNOWN, METRICS, AttackReport
from tsdplab.core.lab import LabSetup, cell_key, evaluate_cell
from tsdplab.core.partition import BLACKBOX, NOSHIELD, TEESLICE, scheme_grid
from tsdplab.utils.config import cache_dir
from tsdplab.utils.logging import TSDPError, TSDPValidationError, logger

Evaluator = Callable[[str, Any, int], AttackReport]

FRONTIER_CSV_COLUMNS = ["kind", "scheme", "config", "pct_flops_tee", "security"]
BASELINES = (BLACKBOX, NOSHIELD)


class CellCache:
    """
    AttackReports stored as one JSON file per cell under `root/<scheme>/`.

    The file name hashes (scheme, config, model hash, dataset hash, lab
    config hash, seed, assumption). TeeSlice cells are keyed on the hybrid's
    checksum instead of the victim's. A cell computed for a different victim,
    dataset, query budget or training budget never hits.
    """

    def __init__(self, root: Optional[Union[str, Path]] = None,
                 model_hash: str = "", data_hash: str = "",
                 config_hash: str = "", hybrid_hash: str = "") -> None:
        self.root = Path(root) if root is not None else cache_dir()
        self.model_hash = model_hash
        self.data_hash = data_hash
        self.config_hash = config_hash
        self.hybrid_hash = hybrid_hash
        self.hits = 0
        self.misses = 0
        self._lock = threading.Lock()

    @classmethod
    def for_lab(cls, lab: LabSetup, root: Optional[Union[str, Path]] = None) -> "CellCache":
        return cls(root, model_hash=lab.model_hash, data_hash=lab.data_hash,
                   config_hash=lab.config_hash, hybrid_hash=lab.hybrid_hash)

    def path_for(self, scheme: str, config: Any, seed: int,
                 assumption: str = HYBRID_KNOWN) -> Path:
        model = self.hybrid_hash if scheme == TEESLICE else self.model_hash
        key = json.dumps([scheme, config, model, self.data_hash, self.config_hash, seed,
                          assumption])
        digest = hashlib.sha256(key.encode()).hexdigest()[:24]
        return self.root / scheme / f"{digest}.json"

    def get(self, scheme: str, config: Any, seed: int,
            assumption: str = HYBRID_KNOWN) -> Optional[AttackReport]:
        path = self.path_for(scheme, config, seed, assumption)
        try:
            with open(path, "r", encoding="utf-8") as f:
                report = AttackReport.from_dict(json.load(f))
        except FileNotFoundError:
            with self._lock:
                self.misses += 1
            return None
        except (json.JSONDecodeError, KeyError, ValueError) as e:
            logger.warning(f"Ignoring unreadable cache entry {path}: {e}")
            with self._lock:
                self.misses += 1
            return None
        with self._lock:
            self.hits += 1
        return report

    def put(self, report: AttackReport) -> Path:
        path = self.path_for(report.scheme, report.config, report.seed, report.assumption)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(f".{os.getpid()}.{threading.get_ident()}.tmp")
        with open(tmp, "w", encoding="utf-8") as f:
            json.dump(report.to_dict(), f, indent=1, default=str)
        os.replace(tmp, path)
        return path


@dataclass
class SweepResult:
    scheme: str
    metric: str
    delta: float
    cells: List[Tuple[Any, AttackReport]]
    security_black: Dict[str, float]
    baselines: Dict[str, AttackReport] = field(default_factory=dict)
    chosen_index: Optional[int] = None
    one_sided: bool = True
    seeds: List[int] = field(default_factory=list)
    assumption: str = HYBRID_KNOWN
    failures: Dict[str, str] = field(default_factory=dict)
    runs: List[AttackReport] = field(default_factory=list, repr=False)

    @property
    def chosen(self) -> Any:
        return None if self.chosen_index is None else self.cells[self.chosen_index][0]

    @property
    def chosen_report(self) -> Optional[AttackReport]:
        return None if self.chosen_index is None else self.cells[self.chosen_index][1]

    def table(self) -> List[Dict[str, Any]]:
        """One flat row per configuration: index, config, pct_flops_tee and every metric."""
        rows = []
        for i, (config, report) in enumerate(self.cells):
            row: Dict[str, Any] = {"index": i, "config": config,
                                   "pct_flops_tee": report.utility.pct_flops_tee}
            row.update({m: report.metric(m) for m in METRICS})
            rows.append(row)
        return rows

    def to_dict(self) -> Dict[str, Any]:
        return {
            "scheme": self.scheme,
            "metric": self.metric,
            "delta": self.delta,
            "one_sided": self.one_sided,
            "seeds": list(self.seeds),
            "assumption": self.assumption,
            "security_black": dict(self.security_black),
            "chosen": self.chosen,
            "chosen_index": self.chosen_index,
            "cells": [{"config": c, "report": r.to_dict()} for c, r in self.cells],
            "baselines": {k: r.to_dict() for k, r in self.baselines.items()},
            "failures": dict(self.failures),
            "runs": [r.to_dict() for r in self.runs],
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "SweepResult":
        return cls(
            scheme=data["scheme"],
            metric=data["metric"],
            delta=float(data["delta"]),
            cells=[(c["config"], AttackReport.from_dict(c["report"])) for c in data["cells"]],
            security_black={k: float(v) for k, v in data["security_black"].items()},
            baselines={k: AttackReport.from_dict(v)
                       for k, v in data.get("baselines", {}).items()},
            chosen_index=data.get("chosen_index"),
            one_sided=bool(data.get("one_sided", True)),
            seeds=list(data.get("seeds", [])),
            assumption=data.get("assumption", HYBRID_KNOWN),
            failures=dict(data.get("failures", {})),
            runs=[AttackReport.from_dict(r) for r in data.get("runs", [])],
        )


@dataclass
class Frontier:
    scheme: str
    metric: str
    points: List[Tuple[float, float, List[Any]]]
    blackbox: Optional[float] = None
    noshield: Optional[float] = None


def average_reports(reports: Sequence[AttackReport]) -> AttackReport:
    """Mean of every metric over seeds; utility, flags and identity from the members."""
    if not reports:
        raise TSDPValidationError("Cannot average an empty list of reports")
    first = reports[0]
    means = {m: float(np.mean([r.metric(m) for r in reports])) for m in METRICS}
    flags = sorted({f for r in reports for f in r.flags})
    skipped: Dict[str, str] = {}
    for r in reports:
        skipped.update(r.skipped)
    meta = dict(first.meta)
    meta["seeds"] = [r.seed for r in reports]
    return AttackReport(
        scheme=first.scheme,
        config=first.config,
        seed=first.seed,
        utility=first.utility,
        assumption=first.assumption,
        queries=int(sum(r.queries for r in reports)),
        flags=flags,
        skipped=skipped,
        meta=meta,
        **means,
    )


def _satisfies(value: float, black: float, delta: float, one_sided: bool) -> bool:
    gap = value - black if one_sided else abs(value - black)
    return gap < delta


def choose(
    cells: Sequence[Tuple[Any, AttackReport]],
    black: float,
    delta: float,
    one_sided: bool = True,
    metric: str = "ms_accuracy",
) -> Optional[int]:
    """Index of the minimal-utility satisfying cell; ties go to the smaller index."""
    best: Optional[Tuple[float, int]] = None
    for i, (_, report) in enumerate(cells):
        if not _satisfies(report.metric(metric), black, delta, one_sided):
            continue
        candidate = (report.utility.pct_flops_tee, i)
        if best is None or candidate < best:
            best = candidate
    return None if best is None else best[1]


def brute_force_choice(
    rows: Sequence[Dict[str, Any]],
    black: float,
    delta: float,
    one_sided: bool = True,
    metric: str = "ms_accuracy",
) -> Optional[int]:
    """Sweet spot recomputed from flat table rows: filter first, then sort."""
    ok = [r for r in rows if _satisfies(float(r[metric]), black, delta, one_sided)]
    if not ok:
        return None
    ok.sort(key=lambda r: (float(r["pct_flops_tee"]), int(r["index"])))
    return int(ok[0]["index"])


def _run_cells(
    tasks: List[Tuple[str, Any, int]],
    evaluate: Evaluator,
    cache: Optional[CellCache],
    assumption: str,
    workers: int,
) -> Tuple[Dict[Tuple[str, int, int], AttackReport], Dict[str, str]]:
    """Evaluate (scheme, config, seed) tasks; results keyed by (scheme, task index, seed)."""
    results: Dict[Tuple[str, int, int], AttackReport] = {}
    failures: Dict[str, str] = {}
    pending = []
    for idx, (scheme, config, seed) in enumerate(tasks):
        hit = cache.get(scheme, config, seed, assumption) if cache else None
        if hit is not None:
            results[(scheme, idx, seed)] = hit
        else:
            pending.append((idx, scheme, config, seed))
    if cache:
        logger.info(f"Cell cache: {len(tasks) - len(pending)} hits, {len(pending)} to compute")

    def run(item: Tuple[int, str, Any, int]) -> AttackReport:
        _, scheme, config, seed = item
        return evaluate(scheme, config, seed)

    with ThreadPoolExecutor(max_workers=max(1, workers)) as executor:
        futures = {executor.submit(run, item): item for item in pending}
        for future in as_completed(futures):
            idx, scheme, config, seed = futures[future]
            key = cell_key(scheme, config, seed)
            try:
                report = future.result()
            except TSDPError as e:
                logger.cell(key).error(f"Cell failed: {e}")
                failures[key] = str(e)
                continue
            except Exception as e:
                logger.cell(key).exception(f"Cell failed unexpectedly: {e}")
                failures[key] = f"{type(e).__name__}: {e}"
                continue
            if cache:
                cache.put(report)
            results[(scheme, idx, seed)] = report
    return results, failures


def sweep(
    scheme: str,
    grid: Optional[Sequence[Any]] = None,
    lab: Optional[LabSetup] = None,
    metric: str = "ms_accuracy",
    delta: float = 0.05,
    seeds: Sequence[int] = (0,),
    one_sided: bool = True,
    assumption: str = HYBRID_KNOWN,
    cache: Optional[CellCache] = None,
    workers: int = 1,
    evaluate: Optional[Evaluator] = None,
) -> SweepResult:
    """
    Evaluate every (config, seed) cell of `grid` plus the BlackBox and NoShield
    baselines, then choose the sweet spot.

    `evaluate(scheme, config, seed)` defaults to `evaluate_cell` on `lab`. A
    configuration with any failed seed is left out of the cell table and
    listed in `failures`.
    """
    if metric not in METRICS:
        raise TSDPValidationError(f"Unknown metric '{metric}'")
    if delta <= 0:
        raise TSDPValidationError("delta must be > 0")
    if not seeds:
        raise TSDPValidationError("At least one seed is required")
    if evaluate is None and lab is None:
        raise TSDPValidationError("sweep needs a lab or an evaluate function")
    evaluator: Evaluator = evaluate or (
        lambda s, c, sd: evaluate_cell(lab, s, c, sd, assumption)  # type: ignore[arg-type]
    )

    if grid is None:
        if lab is None:
            raise TSDPValidationError("A grid is required when no lab is given")
        grid = [None] if scheme == TEESLICE else scheme_grid(scheme, lab.victim)
    grid = list(grid)
    if not grid:
        raise TSDPValidationError("Configuration grid is empty")

    configs: List[Tuple[str, Any]] = [(scheme, c) for c in grid]
    configs += [(b, None) for b in BASELINES]
    tasks = [(s, c, sd) for s, c in configs for sd in seeds]
    results, failures = _run_cells(tasks, evaluator, cache, assumption, workers)

    averaged: List[Optional[AttackReport]] = []
    for ci, (s, c) in enumerate(configs):
        members = [results.get((s, ci * len(seeds) + k, sd)) for k, sd in enumerate(seeds)]
        averaged.append(None if any(m is None for m in members)
                        else average_reports([m for m in members if m is not None]))

    baselines = {b: r for (b, _), r in zip(configs[len(grid):], averaged[len(grid):])
                 if r is not None}
    if BLACKBOX not in baselines:
        raise TSDPValidationError(
            f"BlackBox baseline failed; cannot evaluate the sweet spot ({failures})"
        )
    security_black = {m: baselines[BLACKBOX].metric(m) for m in METRICS}
    cells = [(c, r) for (_, c), r in zip(configs[:len(grid)], averaged[:len(grid)])
             if r is not None]

    result = SweepResult(scheme=scheme, metric=metric, delta=delta, cells=cells,
                         security_black=security_black, baselines=baselines,
                         one_sided=one_sided, seeds=list(seeds), assumption=assumption,
                         failures=failures,
                         runs=[results[k] for k in sorted(results)])
    result.chosen_index = choose(cells, security_black[metric], delta, one_sided, metric)
    if result.chosen_index is None:
        logger.warning(f"{scheme}: no configuration meets delta={delta} on {metric}")
    else:
        logger.info(f"{scheme}: sweet spot {result.chosen} at pct_flops_tee="
                    f"{result.chosen_report.utility.pct_flops_tee:.4f}")  # type: ignore[union-attr]
    return result


def frontier(result: SweepResult) -> Frontier:
    """Points sorted by utility; configurations with equal utility share one point."""
    if not result.cells:
        raise TSDPValidationError("Frontier needs at least one cell")
    merged: Dict[float, List[Tuple[float, Any]]] = {}
    for config, report in result.cells:
        merged.setdefault(report.utility.pct_flops_tee, []).append(
            (report.metric(result.metric), config))
    points = [
        (pct, float(np.mean([s for s, _ in group])), [c for _, c in group])
        for pct, group in sorted(merged.items())
    ]
    noshield = result.baselines.get(NOSHIELD)
    return Frontier(
        scheme=result.scheme,
        metric=result.metric,
        points=points,
        blackbox=result.security_black.get(result.metric),
        noshield=None if noshield is None else noshield.metric(result.metric),
    )


def frontier_csv(front: Frontier) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=FRONTIER_CSV_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for pct, security, configs in front.points:
        writer.writerow({"kind": "point", "scheme": front.scheme,
                         "config": ";".join("" if c is None else str(c) for c in configs),
                         "pct_flops_tee": pct, "security": security})
    for name, value in ((BLACKBOX, front.blackbox), (NOSHIELD, front.noshield)):
        if value is not None:
            writer.writerow({"kind": "baseline", "scheme": name, "config": "",
                             "pct_flops_tee": "", "security": value})
    return buf.getvalue()
