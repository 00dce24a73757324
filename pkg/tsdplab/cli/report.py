"""
Report matrices: metric x scheme tables built from cell report CSVs.

FUNCTION INDEX:
===============

PUBLIC FUNCTIONS (External API):
--------------------------------
- read_reports_csv(path): Parse a cells CSV back into row dicts
- build_matrix(rows, metrics): Seed-averaged metric x scheme matrix
- render_matrix_rich(matrix, title): rich Table with per-row min/max marked
- render_matrix_text(matrix): Plain-text matrix with */! markers

DATA CLASSES:
-------------
- ReportMatrix: Row labels, column labels and values
"""

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

import numpy as np
from rich.table import Table

from tsdplab.core.attacks import METRICS, REPORT_CSV_COLUMNS
from tsdplab.utils.logging import TSDPDataError, TSDPFileError

_INT_COLUMNS = {"seed", "flops_tee", "flops_gpu", "queries"}
_FLOAT_COLUMNS = set(METRICS) | {"pct_flops_tee", "sim_latency"}


@dataclass
class ReportMatrix:
    rows: List[str]
    columns: List[str]
    values: Dict[str, Dict[str, float]] = field(default_factory=dict)

    def get(self, row: str, column: str) -> Optional[float]:
        return self.values.get(row, {}).get(column)

    def row_extremes(self, row: str) -> Dict[str, str]:
        """Column holding the minimum and maximum of `row` (ties to the first column)."""
        present = [(c, self.values[row][c]) for c in self.columns if c in self.values.get(row, {})]
        if not present:
            return {}
        return {
            "min": min(present, key=lambda cv: cv[1])[0],
            "max": max(present, key=lambda cv: cv[1])[0],
        }


def read_reports_csv(path: Union[str, Path]) -> List[Dict[str, Any]]:
    path = Path(path)
    if not path.exists():
        raise TSDPFileError(f"Report file not found: {path}")
    with open(path, "r", newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        missing = [c for c in REPORT_CSV_COLUMNS if c not in (reader.fieldnames or [])]
        if missing:
            raise TSDPDataError(f"{path} is missing report columns: {missing}")
        rows = []
        for raw in reader:
            row: Dict[str, Any] = dict(raw)
            try:
                for col in _INT_COLUMNS:
                    row[col] = int(raw[col])
                for col in _FLOAT_COLUMNS:
                    row[col] = float(raw[col])
            except ValueError as e:
                raise TSDPDataError(f"{path} line {reader.line_num}: {e}") from e
            row["flags"] = [f for f in raw["flags"].split(";") if f]
            rows.append(row)
    return rows


def build_matrix(
    rows: Sequence[Dict[str, Any]], metrics: Sequence[str] = METRICS
) -> ReportMatrix:
    """
    Average each metric over seeds per column. A column is the scheme, suffixed
    with its configuration when the rows hold more than one for that scheme.
    """
    configs: Dict[str, set] = {}
    for row in rows:
        configs.setdefault(row["scheme"], set()).add(row["config"])

    def column(row: Dict[str, Any]) -> str:
        if len(configs[row["scheme"]]) > 1:
            return f"{row['scheme']}[{row['config']}]"
        return str(row["scheme"])

    samples: Dict[str, Dict[str, List[float]]] = {m: {} for m in list(metrics) + ["pct_flops_tee"]}
    columns: List[str] = []
    for row in rows:
        col = column(row)
        if col not in columns:
            columns.append(col)
        for m in samples:
            samples[m].setdefault(col, []).append(float(row[m]))

    values = {m: {c: float(np.mean(v)) for c, v in per.items()} for m, per in samples.items()}
    return ReportMatrix(rows=list(samples), columns=columns, values=values)


def render_matrix_rich(matrix: ReportMatrix, title: str = "Security / utility matrix") -> Table:
    table = Table(title=title)
    table.add_column("Metric", style="cyan", no_wrap=True)
    for col in matrix.columns:
        table.add_column(col, justify="right")
    for row in matrix.rows:
        marks = matrix.row_extremes(row)
        cells = []
        for col in matrix.columns:
            value = matrix.get(row, col)
            if value is None:
                cells.append("-")
            elif col == marks.get("max"):
                cells.append(f"[bold red]{value:.4f}[/bold red]")
            elif col == marks.get("min"):
                cells.append(f"[bold green]{value:.4f}[/bold green]")
            else:
                cells.append(f"{value:.4f}")
        table.add_row(row, *cells)
    return table


def render_matrix_text(matrix: ReportMatrix) -> str:
    """Fixed-width text; `*` marks the row minimum and `!` the row maximum."""
    width = max([12] + [len(c) + 2 for c in matrix.columns])
    lines = ["metric".ljust(20) + "".join(c.rjust(width) for c in matrix.columns)]
    for row in matrix.rows:
        marks = matrix.row_extremes(row)
        cells = []
        for col in matrix.columns:
            value = matrix.get(row, col)
            text = "-" if value is None else f"{value:.4f}"
            if col == marks.get("max"):
                text += "!"
            elif col == marks.get("min"):
                text += "*"
            cells.append(text.rjust(width))
        lines.append(row.ljust(20) + "".join(cells))
    return "\n".join(lines)
