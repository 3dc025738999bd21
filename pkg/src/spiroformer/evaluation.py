"""ROC-AUC (Mann-Whitney, midrank ties), Brier score, and trial aggregation."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import MetricError

METRICS = ("roc_auc", "brier")


def _tied_ranks(values: np.ndarray) -> np.ndarray:
    """1-based ranks with ties assigned the group midrank."""
    order = np.argsort(values, kind="mergesort")
    ranks = np.empty(values.size, dtype=np.float64)
    sorted_vals = values[order]
    i = 0
    while i < values.size:
        j = i
        while j + 1 < values.size and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def roc_auc(scores, labels) -> float:
    """P(score_pos > score_neg) + 0.5 P(tie), via the rank-sum identity."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.shape != y.shape or s.ndim != 1:
        raise MetricError(f"scores {s.shape} and labels {y.shape} must be equal 1-D")
    if not np.all(np.isfinite(s)):
        raise MetricError("scores contain non-finite values")
    n_pos = int(np.sum(y == 1))
    n_neg = int(np.sum(y == 0))
    if n_pos + n_neg != y.size:
        raise MetricError("labels must be binary 0/1")
    if n_pos == 0 or n_neg == 0:
        raise MetricError(
            f"ROC-AUC undefined: {n_pos} positive / {n_neg} negative labels"
        )
    ranks = _tied_ranks(s)
    pos_rank_sum = float(ranks[y == 1].sum())
    return (pos_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def brier(probs, labels) -> float:
    """Mean squared difference between predicted probabilities and outcomes."""
    p = np.asarray(probs, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if p.shape != y.shape or p.ndim != 1 or p.size == 0:
        raise MetricError(f"probs {p.shape} and labels {y.shape} must be equal 1-D")
    if np.any(p < 0.0) or np.any(p > 1.0) or not np.all(np.isfinite(p)):
        raise MetricError("probabilities must lie in [0, 1]")
    return float(np.mean((p - y) ** 2))


@dataclass(frozen=True)
class TrialResult:
    endpoint: str
    method: str
    auc: float
    brier: float
    seed: int


@dataclass(frozen=True)
class AggregateRow:
    endpoint: str
    method: str
    metric: str
    mean: float
    sd: float


def trial_aggregate(
    results: Sequence[TrialResult], seeds: Sequence[int] = (1, 2, 3, 4, 5)
) -> list[AggregateRow]:
    """Per (endpoint, method, metric): mean and n-1 standard deviation.

    Every (endpoint, method) group must contain exactly one trial per seed in
    ``seeds``; missing seeds are reported by value.
    """
    want = set(seeds)
    groups: dict[tuple[str, str], dict[int, TrialResult]] = {}
    for r in results:
        key = (r.endpoint, r.method)
        per_seed = groups.setdefault(key, {})
        if r.seed in per_seed:
            raise MetricError(f"duplicate trial for {key} seed {r.seed}")
        per_seed[r.seed] = r
    rows: list[AggregateRow] = []
    for (endpoint, method), per_seed in sorted(groups.items()):
        missing = sorted(want - set(per_seed))
        extra = sorted(set(per_seed) - want)
        if missing or extra:
            raise MetricError(
                f"trials for ({endpoint}, {method}) do not cover the seed set: "
                f"missing {missing}, unexpected {extra}"
            )
        ordered = [per_seed[s] for s in sorted(want)]
        for metric, values in (
            ("roc_auc", [t.auc for t in ordered]),
            ("brier", [t.brier for t in ordered]),
        ):
            arr = np.array(values, dtype=np.float64)
            sd = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
            rows.append(AggregateRow(endpoint, method, metric, float(arr.mean()), sd))
    return rows


def rows_to_csv(rows: Iterable[AggregateRow]) -> str:
    """Render aggregate rows as CSV with stable float formatting."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["endpoint", "method", "metric", "mean", "sd"])
    for r in rows:
        writer.writerow([r.endpoint, r.method, r.metric,
                         f"{r.mean:.10f}", f"{r.sd:.10f}"])
    return buf.getvalue()
