"""Incremental-learning metrics and report serialisation.

Accuracies are fractions in [0, 1] internally; files render them as
percentages with one decimal where humans read them.
"""
from __future__ import annotations

import csv
import io
import json
import os
from dataclasses import asdict, dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from .exceptions import ContractError


def a_avg(accuracies: Sequence[float]) -> float:
    """Mean of the per-task accuracies ``A_0 .. A_T``."""
    acc = [float(a) for a in accuracies]
    if not acc:
        raise ContractError("a_avg: no accuracies")
    return float(np.mean(acc))


def pd(first: float, last: float) -> float:
    """Performance drop ``A_0 - A_T``."""
    return float(first) - float(last)


def hacc(base: float, new: float) -> float:
    """Harmonic mean of base-class and new-class accuracy; 0 when both are 0."""
    if base < 0 or new < 0:
        raise ContractError("hacc: accuracies must be non-negative")
    if base + new == 0:
        return 0.0
    return 2.0 * base * new / (base + new)


def _pct(x: Optional[float]) -> Optional[str]:
    return None if x is None else f"{100.0 * x:.1f}"


@dataclass
class MetricsReport:
    accuracies: List[float]
    base_accuracies: List[Optional[float]]
    new_accuracies: List[Optional[float]]
    config_hash: str = ""
    seed: int = 0
    label: str = "full"
    a_avg: float = field(init=False)
    pd: float = field(init=False)
    hacc: Optional[float] = field(init=False)

    def __post_init__(self):
        self.accuracies = [float(a) for a in self.accuracies]
        self.a_avg = a_avg(self.accuracies)
        self.pd = pd(self.accuracies[0], self.accuracies[-1]) if len(self.accuracies) > 1 else 0.0
        last_b, last_n = self.base_accuracies[-1], self.new_accuracies[-1]
        if len(self.accuracies) > 1 and last_b is not None and last_n is not None:
            self.hacc = hacc(last_b, last_n)
        else:
            self.hacc = None

    @property
    def num_tasks(self) -> int:
        return len(self.accuracies)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["percent"] = {
            "accuracies": [_pct(a) for a in self.accuracies],
            "a_avg": _pct(self.a_avg),
            "pd": _pct(self.pd),
            "hacc": _pct(self.hacc),
        }
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        return cls(d["accuracies"], d["base_accuracies"], d["new_accuracies"],
                   d.get("config_hash", ""), int(d.get("seed", 0)), d.get("label", "full"))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["task", "A_t", "A_o", "A_n"])
        for t, (a, b, n) in enumerate(zip(self.accuracies, self.base_accuracies, self.new_accuracies)):
            w.writerow([t, _pct(a), _pct(b) or "", _pct(n) or ""])
        return buf.getvalue()


def emit(report: MetricsReport, out_dir: str) -> List[str]:
    """Write ``report.json`` and ``curve.csv`` into ``out_dir``."""
    os.makedirs(out_dir, exist_ok=True)
    paths = [os.path.join(out_dir, "report.json"), os.path.join(out_dir, "curve.csv")]
    with open(paths[0], "w") as fh:
        fh.write(report.to_json())
    with open(paths[1], "w") as fh:
        fh.write(report.to_csv())
    return paths


def load_report(path: str) -> MetricsReport:
    with open(path) as fh:
        return MetricsReport.from_dict(json.load(fh))


def mean_report_value(reports: Sequence[MetricsReport], attr: str) -> float:
    vals = [getattr(r, attr) for r in reports]
    return float(np.mean([v for v in vals if v is not None]))
