"""
Export of cell reports and report matrices.

FUNCTION INDEX:
===============

PUBLIC FUNCTIONS (External API):
--------------------------------
- export_reports(rows, format_type, output_file, matrix): Write rows in the given format

PRIVATE FUNCTIONS (Internal Implementation):
-------------------------------------------
- _export_csv(rows, output_file): CSV in REPORT_CSV_COLUMNS order
- _export_jsonl(rows, output_file): One JSON object per cell
- _export_sqlite(rows, output_file): `cell_reports` table
- _export_excel(rows, output_file, matrix): Cells sheet plus a Matrix sheet
"""

import csv
import json
import sqlite3
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

from tsdplab.cli.report import ReportMatrix
from tsdplab.core.attacks import METRICS, REPORT_CSV_COLUMNS
from tsdplab.utils.logging import TSDPValidationError, logger

FORMATS = ("csv", "jsonl", "sqlite", "excel")
_SUFFIX = {"csv": ".csv", "jsonl": ".jsonl", "sqlite": ".db", "excel": ".xlsx"}


def _flat(row: Dict[str, Any]) -> Dict[str, Any]:
    out = {c: row.get(c, "") for c in REPORT_CSV_COLUMNS}
    if isinstance(out["flags"], list):
        out["flags"] = ";".join(out["flags"])
    return out


def export_reports(
    rows: Sequence[Dict[str, Any]],
    format_type: str,
    output_file: Union[str, Path],
    matrix: Optional[ReportMatrix] = None,
) -> Path:
    """
    Export parsed report rows.

    Args:
        rows: Rows as returned by read_reports_csv
        format_type: One of csv, jsonl, sqlite, excel
        output_file: Target path; the format's suffix is added when missing
        matrix: Also written as a second sheet for excel

    Returns:
        Path to the exported file
    """
    if format_type not in FORMATS:
        raise TSDPValidationError(f"Unsupported format: {format_type}")
    if not rows:
        raise TSDPValidationError("No report rows to export")
    path = Path(output_file)
    if path.suffix != _SUFFIX[format_type]:
        path = path.with_name(path.name + _SUFFIX[format_type])

    if format_type == "csv":
        _export_csv(rows, path)
    elif format_type == "jsonl":
        _export_jsonl(rows, path)
    elif format_type == "sqlite":
        _export_sqlite(rows, path)
    else:
        _export_excel(rows, path, matrix)
    logger.info(f"Exported {len(rows)} rows to {path}")
    return path


def _export_csv(rows: Sequence[Dict[str, Any]], output_file: Path) -> None:
    with open(output_file, "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=REPORT_CSV_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow(_flat(row))


def _export_jsonl(rows: Sequence[Dict[str, Any]], output_file: Path) -> None:
    with open(output_file, "w", encoding="utf-8") as f:
        for row in rows:
            data = {c: row.get(c) for c in REPORT_CSV_COLUMNS}
            f.write(json.dumps(data, ensure_ascii=False) + "\n")


def _export_sqlite(rows: Sequence[Dict[str, Any]], output_file: Path) -> None:
    types = {c: "REAL" for c in METRICS}
    types.update({"seed": "INTEGER", "flops_tee": "INTEGER", "flops_gpu": "INTEGER",
                  "queries": "INTEGER", "pct_flops_tee": "REAL", "sim_latency": "REAL"})
    columns_sql = ", ".join(f'"{c}" {types.get(c, "TEXT")}' for c in REPORT_CSV_COLUMNS)
    placeholders = ", ".join("?" for _ in REPORT_CSV_COLUMNS)
    insert_sql = f"INSERT INTO cell_reports VALUES ({placeholders})"  # nosec B608

    if output_file.exists():
        output_file.unlink()
    conn = sqlite3.connect(str(output_file))
    try:
        cursor = conn.cursor()
        cursor.execute(f"CREATE TABLE cell_reports ({columns_sql})")
        for row in rows:
            flat = _flat(row)
            cursor.execute(insert_sql, [flat[c] for c in REPORT_CSV_COLUMNS])
        conn.commit()
    finally:
        conn.close()


def _export_excel(
    rows: Sequence[Dict[str, Any]], output_file: Path, matrix: Optional[ReportMatrix]
) -> None:
    from openpyxl import Workbook
    from openpyxl.styles import Font

    wb = Workbook()
    ws = wb.active
    ws.title = "Cells"
    header_font = Font(bold=True)
    for col_num, name in enumerate(REPORT_CSV_COLUMNS, 1):
        ws.cell(row=1, column=col_num, value=name).font = header_font
    for row_num, row in enumerate(rows, 2):
        flat = _flat(row)
        for col_num, name in enumerate(REPORT_CSV_COLUMNS, 1):
            ws.cell(row=row_num, column=col_num, value=flat[name])

    if matrix is not None:
        ms = wb.create_sheet("Matrix")
        ms.cell(row=1, column=1, value="metric").font = header_font
        for j, col in enumerate(matrix.columns, 2):
            ms.cell(row=1, column=j, value=col).font = header_font
        for i, metric in enumerate(matrix.rows, 2):
            ms.cell(row=i, column=1, value=metric)
            marks = matrix.row_extremes(metric)
            for j, col in enumerate(matrix.columns, 2):
                cell = ms.cell(row=i, column=j, value=matrix.get(metric, col))
                if col == marks.get("max"):
                    cell.font = Font(bold=True, color="C00000")
                elif col == marks.get("min"):
                    cell.font = Font(bold=True, color="008000")

    wb.save(str(output_file))


__all__: List[str] = ["FORMATS", "export_reports"]
