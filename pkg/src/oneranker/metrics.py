"""Ranking metrics and the Step2/Step3 consistency analysis."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np


def rank_order(scores, ids) -> np.ndarray:
    """Indices sorted by score descending, ties by candidate id ascending."""
    scores = np.asarray(scores, dtype=np.float64)
    ids = np.asarray(ids)
    if scores.shape != ids.shape:
        raise ValueError(f"scores {scores.shape} and ids {ids.shape} disagree")
    return np.lexsort((ids, -scores))


def hr_at_k(ranking, positive, k: int) -> int:
    """1 iff the positive id appears in the first k entries of the ranking."""
    ranking = list(ranking)
    n = len(ranking)
    if not 1 <= k <= n:
        raise ValueError(f"k={k} outside [1, {n}]")
    if positive not in ranking:
        raise ValueError(f"positive {positive} not in candidate set")
    return int(positive in ranking[:k])


def ndcg_at_k(order, gains, k: int) -> float:
    """Graded-gain NDCG: DCG over the predicted order, normalized by the
    ideal (descending-gain) DCG. Accumulates sequentially in rank order so
    results are bit-reproducible."""
    gains = np.asarray(gains, dtype=np.float64)
    order = np.asarray(order)
    n = len(gains)
    if not 1 <= k <= n:
        raise ValueError(f"k={k} outside [1, {n}]")
    if (gains < 0).any():
        raise ValueError("gains must be nonnegative")
    if not (gains > 0).any():
        raise ValueError("all gains are zero; NDCG undefined")
    dcg = 0.0
    for rank, idx in enumerate(order[:k], start=1):
        dcg += float(gains[idx]) / math.log2(rank + 1)
    ideal = np.sort(gains)[::-1]
    idcg = 0.0
    for rank in range(1, k + 1):
        idcg += float(ideal[rank - 1]) / math.log2(rank + 1)
    return dcg / idcg


@dataclass
class MetricsRow:
    epoch: int
    split: str
    metric: str
    k: int
    value: float


def write_metrics(rows, path) -> None:
    with open(path, "w") as f:
        f.write("epoch,split,metric,k,value\n")
        for r in rows:
            f.write(f"{r.epoch},{r.split},{r.metric},{r.k},{float(r.value)!r}\n")


def read_metrics(path) -> list:
    rows = []
    with open(path) as f:
        header = f.readline().strip()
        if header != "epoch,split,metric,k,value":
            raise ValueError(f"unexpected metrics header: {header}")
        for line in f:
            epoch, split, metric, k, value = line.strip().split(",")
            rows.append(MetricsRow(int(epoch), split, metric, int(k), float(value)))
    return rows


# ---------------------------------------------------------------------------
# consistency analysis
# ---------------------------------------------------------------------------

@dataclass
class ConsistencyReport:
    """Per-rank |rank2 - rank3| box statistics plus mean top-K overlap."""
    size: int
    deviation_stats: np.ndarray  # (n, 5): min, q1, median, q3, max
    overlap: np.ndarray          # (n,): mean overlap at K = 1..n

    def median_deviation(self) -> float:
        return float(np.median(self.deviation_stats[:, 2]))


def consistency_report(step2_scores, step3_scores, ids=None) -> ConsistencyReport:
    """Compare Step-2 and Step-3 rankings of the same candidate sets.

    For the item at each Step-3 rank r the absolute difference to its
    Step-2 rank is aggregated over instances; overlap(K) is the mean
    fraction of shared items in the two top-K sets.
    """
    if len(step2_scores) != len(step3_scores) or not step2_scores:
        raise ValueError("need equal, nonempty score lists")
    n = len(step2_scores[0])
    deviations = np.zeros((len(step2_scores), n))
    overlaps = np.zeros((len(step2_scores), n))
    for i, (s2, s3) in enumerate(zip(step2_scores, step3_scores)):
        s2, s3 = np.asarray(s2), np.asarray(s3)
        if s2.shape != (n,) or s3.shape != (n,):
            raise ValueError(f"instance {i}: score lengths differ from {n}")
        cand_ids = np.asarray(ids[i]) if ids is not None else np.arange(n)
        o2, o3 = rank_order(s2, cand_ids), rank_order(s3, cand_ids)
        rank2 = np.empty(n, dtype=np.int64)
        rank2[o2] = np.arange(n)
        rank3 = np.empty(n, dtype=np.int64)
        rank3[o3] = np.arange(n)
        deviations[i] = np.abs(rank2[o3] - np.arange(n))
        for k in range(1, n + 1):
            overlaps[i, k - 1] = len(np.intersect1d(o2[:k], o3[:k])) / k
    stats = np.column_stack([
        deviations.min(axis=0),
        np.percentile(deviations, 25, axis=0),
        np.percentile(deviations, 50, axis=0),
        np.percentile(deviations, 75, axis=0),
        deviations.max(axis=0),
    ])
    return ConsistencyReport(size=n, deviation_stats=stats, overlap=overlaps.mean(axis=0))


def write_consistency(report: ConsistencyReport, path) -> None:
    with open(path, "w") as f:
        f.write("rank,min,q1,median,q3,max\n")
        for r in range(report.size):
            vals = ",".join(repr(float(v)) for v in report.deviation_stats[r])
            f.write(f"{r + 1},{vals}\n")
        f.write("k,overlap\n")
        for k in range(report.size):
            f.write(f"{k + 1},{float(report.overlap[k])!r}\n")


def read_consistency(path) -> ConsistencyReport:
    lines = Path(path).read_text().splitlines()
    if lines[0] != "rank,min,q1,median,q3,max":
        raise ValueError(f"unexpected consistency header: {lines[0]}")
    split_at = lines.index("k,overlap")
    stats = np.array([[float(x) for x in line.split(",")[1:]]
                      for line in lines[1:split_at]])
    overlap = np.array([float(line.split(",")[1]) for line in lines[split_at + 1:]])
    if len(stats) != len(overlap):
        raise ValueError("deviation and overlap blocks disagree in length")
    return ConsistencyReport(size=len(stats), deviation_stats=stats, overlap=overlap)
