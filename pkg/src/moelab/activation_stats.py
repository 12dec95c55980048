"""Per-layer expert activation accounting and load-balance metrics.

An :class:`ActivationLog` accumulates, for every (layer, expert) pair, how
often the expert was selected and the total routing weight it received.
Logs merge associatively, so per-sequence logs can be combined in any order.

The four row metrics (utilization, normalized entropy, Gini, imbalance) all
operate on one layer's count row. The imbalance score is the coefficient of
variation (population std over mean), chosen for scale invariance.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np


@dataclass
class ActivationLog:
    """Counts and routing-weight sums per (layer, expert), plus token total."""

    counts: np.ndarray        # int64 [layers, experts]
    weight_sums: np.ndarray   # float64 [layers, experts]
    tokens_processed: int = 0

    @classmethod
    def empty(cls, num_layers: int, num_experts: int) -> "ActivationLog":
        return cls(
            counts=np.zeros((num_layers, num_experts), dtype=np.int64),
            weight_sums=np.zeros((num_layers, num_experts), dtype=np.float64),
        )

    @property
    def num_layers(self) -> int:
        return self.counts.shape[0]

    @property
    def num_experts(self) -> int:
        return self.counts.shape[1]

    def record(self, layer: int, indices: np.ndarray, weights: np.ndarray) -> None:
        """Record one routed token: the selected experts and their weights."""
        self.counts[layer, indices] += 1
        self.weight_sums[layer, indices] += weights

    def add_tokens(self, n: int) -> None:
        """Bump the token total; call once per token position processed."""
        self.tokens_processed += n

    def copy(self) -> "ActivationLog":
        return ActivationLog(
            counts=self.counts.copy(),
            weight_sums=self.weight_sums.copy(),
            tokens_processed=self.tokens_processed,
        )


def merge(a: ActivationLog, b: ActivationLog) -> ActivationLog:
    """Elementwise sum of two logs over the same (layers, experts) grid."""
    if a.counts.shape != b.counts.shape:
        raise ValueError(f"log shape mismatch: {a.counts.shape} vs {b.counts.shape}")
    return ActivationLog(
        counts=a.counts + b.counts,
        weight_sums=a.weight_sums + b.weight_sums,
        tokens_processed=a.tokens_processed + b.tokens_processed,
    )


def _count_row(counts) -> np.ndarray:
    row = np.asarray(counts, dtype=np.float64)
    if row.ndim != 1 or row.size == 0:
        raise ValueError("expected a non-empty 1-D count row")
    if np.any(row < 0):
        raise ValueError("counts must be non-negative")
    return row


def expert_utilization(counts) -> float:
    """Fraction of experts with at least one activation."""
    row = _count_row(counts)
    return float(np.count_nonzero(row > 0) / row.size)


def normalized_entropy(counts) -> float:
    """Shannon entropy of the activation distribution over ln(num experts).

    0*ln(0) is taken as 0. A single-expert layer is trivially uniform and
    scores 1.0.
    """
    row = _count_row(counts)
    total = row.sum()
    if total <= 0:
        raise ValueError("normalized entropy needs at least one activation")
    if row.size == 1:
        return 1.0
    p = row / total
    nonzero = p[p > 0]
    h = -float(np.sum(nonzero * np.log(nonzero)))
    return h / np.log(row.size)


def gini(counts) -> float:
    """Gini coefficient via mean absolute pairwise difference.

    G = sum_ij |x_i - x_j| / (2 n^2 mu); 0 for a uniform row, (n-1)/n for a
    one-hot row.
    """
    row = _count_row(counts)
    total = row.sum()
    if total <= 0:
        raise ValueError("gini needs at least one activation")
    n = row.size
    diffs = np.abs(row[:, None] - row[None, :]).sum()
    mu = total / n
    return float(diffs / (2.0 * n * n * mu))


def imbalance_score(counts) -> float:
    """Coefficient of variation of the count row: population std / mean."""
    row = _count_row(counts)
    total = row.sum()
    if total <= 0:
        raise ValueError("imbalance score needs at least one activation")
    mean = row.mean()
    return float(row.std() / mean)


def layer_metrics(counts) -> dict:
    return {
        "utilization": expert_utilization(counts),
        "entropy": normalized_entropy(counts),
        "gini": gini(counts),
        "imbalance": imbalance_score(counts),
    }


def metrics_summary(log: ActivationLog) -> dict:
    """Per-layer metric table plus a global aggregate over the flattened grid."""
    layers = {}
    for layer in range(log.num_layers):
        row = log.counts[layer]
        if row.sum() > 0:
            layers[str(layer)] = layer_metrics(row)
        else:
            layers[str(layer)] = None
    flat = log.counts.reshape(-1)
    summary = {
        "layers": layers,
        "global": layer_metrics(flat) if flat.sum() > 0 else None,
        "tokens_processed": log.tokens_processed,
    }
    return summary


def export_heatmap(log: ActivationLog, path) -> None:
    """CSV dump of the activation grid, one row per (layer, expert), layer-major."""
    lines = ["layer,expert,count,weight_sum"]
    for layer in range(log.num_layers):
        for expert in range(log.num_experts):
            count = int(log.counts[layer, expert])
            weight = float(log.weight_sums[layer, expert])
            lines.append(f"{layer},{expert},{count},{weight!r}")
    with open(path, "w", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def write_metrics_json(log: ActivationLog, path) -> None:
    with open(path, "w", newline="\n") as fh:
        json.dump(metrics_summary(log), fh, indent=2)
        fh.write("\n")
