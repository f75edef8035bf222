"""Image AUROC, pixel AP, the forgetting measure and storage accounting."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Sequence

import numpy as np
from scipy.stats import rankdata

METRICS = ("image_auroc", "pixel_ap")


def image_auroc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Mann-Whitney form: P(anomalous > normal) + 0.5 P(tie), via midranks."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(int)
    if s.shape != y.shape:
        raise ValueError("scores and labels differ in length")
    n_pos, n_neg = int((y == 1).sum()), int((y == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUROC needs both anomalous and normal samples")
    ranks = rankdata(s)
    return float((ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def pixel_ap(maps, gts) -> float:
    """Average precision over all pixels pooled across images.

    AP = sum_k (R_k - R_{k-1}) P_k with thresholds at the descending unique
    scores, so tied pixels enter together.
    """
    maps = [np.asarray(m, dtype=np.float64) for m in maps]
    gts = [np.asarray(g).astype(bool) for g in gts]
    if len(maps) != len(gts) or any(m.shape != g.shape for m, g in zip(maps, gts)):
        raise ValueError("maps and ground truths must match in count and shape")
    s = np.concatenate([m.ravel() for m in maps])
    y = np.concatenate([g.ravel() for g in gts])
    n_pos = int(y.sum())
    if n_pos == 0:
        raise ValueError("pixel AP needs at least one positive pixel")
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    tp = np.cumsum(y)
    last = np.r_[np.nonzero(np.diff(s))[0], len(s) - 1]  # end of each tie group
    tp = tp[last].astype(np.float64)
    precision = tp / (last + 1)
    recall = tp / n_pos
    return float(np.sum(np.diff(np.r_[0.0, recall]) * precision))


@dataclass
class ScoreMatrix:
    """a[gamma][i]: metric on class slot i after training task gamma (NaN = undefined)."""

    a: np.ndarray
    metric_name: str = "image_auroc"

    @classmethod
    def empty(cls, n: int, metric_name: str = "image_auroc") -> "ScoreMatrix":
        return cls(np.full((n, n), np.nan), metric_name)

    @property
    def n(self) -> int:
        return self.a.shape[0]

    def set(self, gamma: int, i: int, value: float) -> None:
        if i > gamma:
            raise ValueError("class slot not yet learned at this task")
        self.a[gamma, i] = value

    def final_row(self) -> np.ndarray:
        return self.a[-1]

    def average(self) -> float:
        row = self.final_row()
        if np.isnan(row).any():
            raise ValueError("final row has undefined entries")
        return float(row.mean())


def forgetting_measure(sm) -> float:
    """Mean over historical classes of (best earlier score - final score).

    For class i the maximum runs over every task from the one that learned
    it through the last one, so a class that only improved contributes 0.
    """
    a = np.asarray(sm.a if isinstance(sm, ScoreMatrix) else sm, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1] or a.shape[0] < 2:
        raise ValueError("forgetting measure needs an N x N matrix with N >= 2")
    n = a.shape[0]
    gaps = []
    for i in range(n - 1):
        hist = a[i:, i]
        if np.isnan(hist).any() or np.isnan(a[n - 1, i]):
            raise ValueError(f"score matrix entry undefined for class slot {i}")
        gaps.append(hist.max() - a[n - 1, i])
    return float(np.mean(gaps))


@dataclass
class StorageTable:
    rows: List[dict] = field(default_factory=list)

    @property
    def total_bytes(self) -> int:
        return sum(r["memory_bytes"] for r in self.rows)

    @property
    def total_raw_bytes(self) -> int:
        return sum(r["raw_bytes"] for r in self.rows)

    @property
    def ratio(self) -> float:
        raw = self.total_raw_bytes
        return self.total_bytes / raw if raw else 0.0

    def to_csv(self) -> str:
        lines = ["class_id,memory_bytes,raw_bytes,ratio"]
        for r in self.rows:
            lines.append(f"{r['class_id']},{r['memory_bytes']},{r['raw_bytes']},{r['ratio']:.6f}")
        lines.append(f"total,{self.total_bytes},{self.total_raw_bytes},{self.ratio:.6f}")
        return "\n".join(lines) + "\n"


def storage_report(memories, raw_bytes_per_class: Sequence[int]) -> StorageTable:
    from .memory import memory_footprint

    if len(memories) != len(raw_bytes_per_class):
        raise ValueError("memories and raw byte counts must align")
    rows = []
    for mem, raw in zip(memories, raw_bytes_per_class):
        b = memory_footprint(mem)["total"]
        rows.append({"class_id": mem.class_id, "memory_bytes": b, "raw_bytes": int(raw), "ratio": b / raw if raw else 0.0})
    return StorageTable(rows)
