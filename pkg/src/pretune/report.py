"""Consolidated pre-train / fine-tune result tables (CSV, JSON and plain text)."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Sequence

from . import PRETRAIN_STRATEGIES, TUNE_STRATEGIES
from .metrics import MetricReport
from .profiler import ResourceProfile

COLUMNS = (
    "pretrain_strategy",
    "tune_strategy",
    "feature_size",
    "dice_avg",
    "hausdorff_avg_mm",
    "ms_ssim",
    "cls_accuracy",
    "cls_macro_f1",
    "peak_mem_frac",
    "avg_mem_frac",
    "power_frac",
    "sec_per_epoch",
)
METRIC_COLUMNS = COLUMNS[3:8]
RESOURCE_COLUMNS = COLUMNS[8:]
NA = "n/a"
PRETRAIN_ROW = "none"  # tune_strategy of a pre-training row
SCRATCH_SOURCE = "scratch"  # pretrain_strategy of a standalone scratch row

CSV_NAME, JSON_NAME, TXT_NAME = "report.csv", "report.json", "report.txt"


@dataclass
class ReportRow:
    pretrain_strategy: str
    tune_strategy: str
    feature_size: int
    metrics: MetricReport
    profile: ResourceProfile | None = None

    def values(self) -> dict[str, Any]:
        p = self.profile
        return {
            "pretrain_strategy": self.pretrain_strategy,
            "tune_strategy": self.tune_strategy,
            "feature_size": int(self.feature_size),
            "dice_avg": self.metrics.dice_avg,
            "hausdorff_avg_mm": self.metrics.hausdorff_avg_mm,
            "ms_ssim": self.metrics.ms_ssim,
            "cls_accuracy": self.metrics.cls_accuracy,
            "cls_macro_f1": self.metrics.cls_macro_f1,
            "peak_mem_frac": p.peak_mem_frac if p else None,
            "avg_mem_frac": p.avg_mem_frac if p else None,
            "power_frac": p.avg_power_frac if p else None,
            "sec_per_epoch": p.seconds_per_epoch if p else None,
        }


def fmt(v: Any) -> str:
    """Report cell text: 6 significant digits for floats, ``n/a`` for missing or NaN."""
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return NA
    if isinstance(v, bool):
        return str(int(v))
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)


def _parse(col: str, text: str) -> Any:
    if text == NA:
        return None
    if col in ("pretrain_strategy", "tune_strategy"):
        return text
    if col == "feature_size":
        return int(text)
    return float(text)


def _rank(value: str, order: Sequence[str], first: str) -> tuple[int, str]:
    if value == first:
        return (0, value)
    return (1 + order.index(value), value) if value in order else (len(order) + 1, value)


def sort_key(values: dict[str, Any]) -> tuple:
    return (
        values["feature_size"],
        _rank(values["pretrain_strategy"], PRETRAIN_STRATEGIES, SCRATCH_SOURCE),
        _rank(values["tune_strategy"], TUNE_STRATEGIES, PRETRAIN_ROW),
    )


def emit_report(rows: Sequence[ReportRow], out_dir: str | Path) -> dict[str, Path]:
    """Write ``report.csv``, ``report.json`` and ``report.txt`` sorted by (feature size, pre-training, tuning)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    table = sorted((r.values() for r in rows), key=sort_key)
    cells = [[fmt(v[c]) for c in COLUMNS] for v in table]

    paths = {"csv": out_dir / CSV_NAME, "json": out_dir / JSON_NAME, "txt": out_dir / TXT_NAME}
    with paths["csv"].open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(COLUMNS)
        writer.writerows(cells)
    records = [{c: _parse(c, text) for c, text in zip(COLUMNS, row)} for row in cells]
    paths["json"].write_text(json.dumps({"columns": list(COLUMNS), "rows": records}, indent=2) + "\n", encoding="utf-8")
    widths = [max([len(c)] + [len(row[i]) for row in cells]) for i, c in enumerate(COLUMNS)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(COLUMNS, widths)), "  ".join("-" * w for w in widths)]
    lines += ["  ".join(t.ljust(w) for t, w in zip(row, widths)) for row in cells]
    paths["txt"].write_text("\n".join(line.rstrip() for line in lines) + "\n", encoding="utf-8")
    return paths


def read_report(path: str | Path) -> list[dict[str, Any]]:
    """Parse ``report.csv`` back into typed rows (``n/a`` becomes ``None``)."""
    with Path(path).open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != COLUMNS:
            raise ValueError(f"{path} does not carry the report columns")
        return [{c: _parse(c, row[c]) for c in COLUMNS} for row in reader]


def profile_from_history(history) -> ResourceProfile | None:
    """Aggregate per-epoch profiler columns of a training history into one profile."""
    if not len(history):
        return None
    secs = [v for v in history.column("sec_epoch") if v is not None]
    mems = [v for v in history.column("mem_frac") if v is not None]
    peaks = [v for v in history.column("peak_mem_frac") if v is not None] or mems
    powers = [v for v in history.column("power_frac") if v is not None]
    return ResourceProfile(
        peak_mem_frac=max(peaks),
        avg_mem_frac=sum(mems) / len(mems),
        avg_power_frac=sum(powers) / len(powers) if powers else None,
        seconds_per_epoch=sum(secs) / len(secs),
        samples=len(history),
    )
