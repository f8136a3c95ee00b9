"""Pixel confusion counts, F1 and the per-fold report tables."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    def __post_init__(self) -> None:
        if min(self.tp, self.fp, self.tn, self.fn) < 0:
            raise ValueError("confusion counts must be non-negative")

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(
            self.tp + other.tp, self.fp + other.fp, self.tn + other.tn, self.fn + other.fn
        )

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    def as_dict(self) -> dict[str, int]:
        return {"tp": self.tp, "fp": self.fp, "tn": self.tn, "fn": self.fn}


def confusion(pred, truth, valid=None) -> ConfusionCounts:
    """Count TP/FP/TN/FN over the valid pixels of two binary grids."""
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs truth {truth.shape}")
    p = pred.astype(bool)
    t = truth.astype(bool)
    if valid is not None:
        valid = np.asarray(valid, dtype=bool)
        if valid.shape != pred.shape:
            raise ValueError(f"shape mismatch: valid {valid.shape} vs pred {pred.shape}")
        p = p[valid]
        t = t[valid]
    tp = int(np.count_nonzero(p & t))
    fp = int(np.count_nonzero(p & ~t))
    fn = int(np.count_nonzero(~p & t))
    tn = int(p.size) - tp - fp - fn
    return ConfusionCounts(tp, fp, tn, fn)


def f1(c: ConfusionCounts) -> float:
    """``2TP / (2TP + FP + FN)``, and 0 when nothing is positive in either grid."""
    denom = 2 * c.tp + c.fp + c.fn
    return 0.0 if denom == 0 else 2 * c.tp / denom


def mean_std(values: Sequence[float]) -> tuple[float, float]:
    """Mean and population standard deviation."""
    if not values:
        raise ValueError("no values")
    m = math.fsum(values) / len(values)
    var = math.fsum((v - m) ** 2 for v in values) / len(values)
    return m, math.sqrt(var)


# ------------------------------------------------------------------ reports


@dataclass(frozen=True)
class ScoreRow:
    """One F1 score for a (band selection, method, fold) cell."""

    selection: str
    method: str
    fold: str
    f1: float
    repetition: int = 0


@dataclass(frozen=True)
class ReportRow:
    selection: str
    method: str
    folds: tuple[str, ...]
    scores: tuple[Optional[float], ...]
    mean: float
    std: float


@dataclass(frozen=True)
class Report:
    folds: tuple[str, ...]
    rows: tuple[ReportRow, ...]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["selection", "method", *self.folds, "mean", "std"])
        for r in self.rows:
            w.writerow(
                [r.selection, r.method]
                + ["" if s is None else f"{s:.6f}" for s in r.scores]
                + [f"{r.mean:.6f}", f"{r.std:.6f}"]
            )
        return buf.getvalue()

    def to_markdown(self, digits: int = 2) -> str:
        head = ["Bands", "Method", *self.folds, "Mean", "Std"]
        lines = ["| " + " | ".join(head) + " |", "|" + "---|" * len(head)]
        fmt = f"{{:.{digits}f}}"
        for r in self.rows:
            cells = [r.selection, r.method]
            cells += ["" if s is None else fmt.format(s) for s in r.scores]
            cells += [fmt.format(r.mean), fmt.format(r.std)]
            lines.append("| " + " | ".join(cells) + " |")
        return "\n".join(lines) + "\n"

    def row_text(self, selection: str, method: str, digits: int = 2) -> str:
        """Space-separated scores, mean and std of one row."""
        for r in self.rows:
            if (r.selection, r.method) == (selection, method):
                vals = [s for s in r.scores if s is not None] + [r.mean, r.std]
                return " ".join(f"{v:.{digits}f}" for v in vals)
        raise KeyError((selection, method))

    def write(self, out_dir: "str | Path") -> tuple[Path, Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        csv_path = out_dir / "report.csv"
        md_path = out_dir / "report.md"
        csv_path.write_text(self.to_csv(), encoding="utf-8")
        md_path.write_text(self.to_markdown(), encoding="utf-8")
        return csv_path, md_path


def _as_score_rows(records: Iterable) -> list[ScoreRow]:
    rows = []
    for r in records:
        if isinstance(r, ScoreRow):
            rows.append(r)
        elif hasattr(r, "score_row"):
            rows.append(r.score_row())
        elif isinstance(r, dict):
            rows.append(ScoreRow(r["selection"], r["method"], r["fold"], float(r["f1"]),
                                 int(r.get("repetition", 0))))
        else:
            raise TypeError(f"cannot report on {type(r).__name__}")
    return rows


def make_report(records: Iterable) -> Report:
    """Group scores by band selection x method.

    Repetitions of one fold are averaged first; the row mean and population
    std are then taken over folds.
    """
    rows = _as_score_rows(records)
    if not rows:
        raise ValueError("empty input: no records to report")
    folds = tuple(sorted({r.fold for r in rows}))
    groups: dict[tuple[str, str], dict[str, list[float]]] = {}
    for r in rows:
        groups.setdefault((r.selection, r.method), {}).setdefault(r.fold, []).append(r.f1)
    out = []
    for (sel, method), per_fold in groups.items():
        fold_scores = {f: math.fsum(v) / len(v) for f, v in per_fold.items()}
        m, s = mean_std(list(fold_scores.values()))
        out.append(
            ReportRow(sel, method, folds, tuple(fold_scores.get(f) for f in folds), m, s)
        )
    return Report(folds, tuple(out))
