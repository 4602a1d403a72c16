"""Correlation and rank-agreement statistics."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .exceptions import ParameterError, UndefinedCorrelationError

CSV_FIELDS = ["pearson_r", "r_squared", "spearman_rho", "kendall_tau", "concordance_p", "n"]


@dataclass(frozen=True)
class CorrelationSummary:
    pearson_r: float
    r_squared: float
    spearman_rho: float
    kendall_tau: float
    concordance_p: float
    n: int

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, data: dict) -> CorrelationSummary:
        return cls(**{k: (int(data[k]) if k == "n" else float(data[k])) for k in CSV_FIELDS})

    def csv_row(self, **labels) -> dict:
        row = dict(labels)
        row.update({k: (v if k == "n" else repr(float(v))) for k, v in self.to_dict().items()})
        return row


def concordance_probability(tau: float) -> float:
    """Probability that a random pair is ordered the same way by both variables."""
    return (tau + 1.0) / 2.0


def _validate(xs, ys) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(xs, dtype=float)
    y = np.asarray(ys, dtype=float)
    if x.ndim != 1 or y.ndim != 1 or x.size != y.size:
        raise ParameterError(f"need two 1-D sequences of equal length, got {x.shape} and {y.shape}")
    if x.size < 3:
        raise ParameterError(f"need at least 3 observations, got {x.size}")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise ParameterError("inputs must be finite")
    for name, v in (("xs", x), ("ys", y)):
        if np.all(v == v[0]):
            raise UndefinedCorrelationError(f"{name} is constant; correlation is undefined")
    return x, y


def pearson(xs: Sequence[float], ys: Sequence[float]) -> float:
    x, y = _validate(xs, ys)
    return _pearson(x, y)


def _pearson(x: np.ndarray, y: np.ndarray) -> float:
    dx = x - x.mean()
    dy = y - y.mean()
    denom = math.sqrt(float(dx @ dx) * float(dy @ dy))
    if denom == 0.0:
        raise UndefinedCorrelationError("zero variance after centering")
    return float(np.clip(float(dx @ dy) / denom, -1.0, 1.0))


def average_ranks(values: Sequence[float]) -> np.ndarray:
    """1-based ranks; tied values share the mean of the ranks they span."""
    v = np.asarray(values, dtype=float)
    order = np.argsort(v, kind="mergesort")
    ranks = np.empty(v.size)
    sorted_v = v[order]
    i = 0
    while i < v.size:
        j = i
        while j + 1 < v.size and sorted_v[j + 1] == sorted_v[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def spearman(xs: Sequence[float], ys: Sequence[float]) -> float:
    x, y = _validate(xs, ys)
    return _pearson(average_ranks(x), average_ranks(y))


def kendall_tau_b(xs: Sequence[float], ys: Sequence[float]) -> float:
    """Tie-corrected Kendall tau: ``(C - D) / sqrt((n0 - n1)(n0 - n2))``."""
    x, y = _validate(xs, ys)
    sx = np.sign(x[:, None] - x[None, :])
    sy = np.sign(y[:, None] - y[None, :])
    iu = np.triu_indices(x.size, k=1)
    sx, sy = sx[iu], sy[iu]
    s = float(np.sum(sx * sy))
    untied_x = float(np.count_nonzero(sx))
    untied_y = float(np.count_nonzero(sy))
    return float(np.clip(s / math.sqrt(untied_x * untied_y), -1.0, 1.0))


def correlate(xs: Sequence[float], ys: Sequence[float]) -> CorrelationSummary:
    x, y = _validate(xs, ys)
    r = _pearson(x, y)
    tau = kendall_tau_b(x, y)
    return CorrelationSummary(
        pearson_r=r,
        r_squared=r * r,
        spearman_rho=_pearson(average_ranks(x), average_ranks(y)),
        kendall_tau=tau,
        concordance_p=concordance_probability(tau),
        n=int(x.size),
    )


def summaries_to_csv(rows: list[dict], label_fields: Sequence[str]) -> str:
    """Render ``CorrelationSummary.csv_row`` dicts as CSV text."""
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(label_fields) + CSV_FIELDS, lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    return buf.getvalue()
