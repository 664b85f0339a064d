"""Coreset analysis metrics and frozen-encoder evaluation.

Labels are analysis-only inputs here; the selection path never sees them.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist, pdist

from . import attack as _attack
from .losses import cross_entropy
from .model import Model
from .rng import philox_rng
from .selection import CoresetResult, MinibatchPartition


def median_bandwidth(points: np.ndarray) -> float:
    """Median pairwise distance heuristic for the RBF kernel."""
    d = pdist(np.asarray(points, dtype=np.float64))
    med = float(np.median(d)) if d.size else 1.0
    return med if med > 0 else 1.0


def mmd(a: np.ndarray, b: np.ndarray, bandwidth: float | None = None) -> float:
    """Squared maximum mean discrepancy, biased V-statistic with an RBF
    kernel exp(-r^2 / (2 h^2)), floored at zero.

    Kernel means accumulate through exact summation, so mmd(a, b) equals
    mmd(b, a) bit for bit. Bandwidth defaults to the median pairwise
    distance over the pooled sample.
    """
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise ValueError("mmd: point sets must be non-empty")
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"mmd: dimension mismatch {a.shape[1]} vs {b.shape[1]}")
    if bandwidth is None:
        bandwidth = median_bandwidth(np.concatenate([a, b]))
    if bandwidth <= 0:
        raise ValueError("mmd: bandwidth must be positive")
    scale = -0.5 / bandwidth**2

    def kmean(x, y):
        k = np.exp(scale * cdist(x, y, "sqeuclidean"))
        return math.fsum(k.ravel()) / k.size

    value = kmean(a, a) + kmean(b, b) - 2.0 * kmean(a, b)
    return max(0.0, value)


@dataclass
class ImbalanceReport:
    ratio: float
    counts: dict[int, int]
    missing: tuple[int, ...] = ()

    @property
    def has_missing(self) -> bool:
        return bool(self.missing)


def imbalance_ratio(labels: np.ndarray, n_classes: int | None = None) -> ImbalanceReport:
    """Largest class count over smallest; +inf (flagged) when a class is absent."""
    labels = np.asarray(labels, dtype=np.intp).ravel()
    if labels.size == 0:
        raise ValueError("imbalance_ratio: empty label set")
    if n_classes is None:
        n_classes = int(labels.max()) + 1
    counts = {c: int(np.sum(labels == c)) for c in range(n_classes)}
    missing = tuple(c for c, k in counts.items() if k == 0)
    if missing:
        return ImbalanceReport(ratio=math.inf, counts=counts, missing=missing)
    values = list(counts.values())
    return ImbalanceReport(ratio=max(values) / min(values), counts=counts)


def selection_frequency(
    partition: MinibatchPartition, results: list[CoresetResult]
) -> tuple[np.ndarray, np.ndarray]:
    """Per-point selection counts across rounds (point selected when its
    batch is). Returns (sorted point ids, counts)."""
    fp = partition.fingerprint()
    for r in results:
        if r.partition_fingerprint != fp:
            raise ValueError("selection_frequency: results come from a different partition")
    ids = partition.point_ids()
    pos = {int(p): i for i, p in enumerate(ids)}
    counts = np.zeros(ids.size, dtype=np.intp)
    for r in results:
        for bid in r.selected:
            for p in partition.batches[bid]:
                counts[pos[int(p)]] += 1
    return ids, counts


# ---------------------------------------------------------------------------
# frozen-encoder evaluation
# ---------------------------------------------------------------------------


def linear_probe(
    model: Model,
    x: np.ndarray,
    y: np.ndarray,
    seed: int = 0,
    test_fraction: float = 0.25,
    lr: float = 0.5,
    max_iters: int = 500,
    tol: float = 1e-6,
) -> tuple[float, float]:
    """Train a linear softmax classifier on frozen embeddings by full-batch
    gradient descent until the loss moves less than ``tol`` (or the
    iteration cap); returns (train accuracy, test accuracy) on a seeded split.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.intp).ravel()
    classes = np.unique(y)
    if classes.size < 2:
        raise ValueError("linear_probe: need at least two classes")
    n_classes = int(classes.max()) + 1
    z = model.embed(x).data

    perm = philox_rng(seed, "probe-split").permutation(x.shape[0])
    n_test = max(1, int(round(test_fraction * x.shape[0])))
    test_idx, train_idx = perm[:n_test], perm[n_test:]
    if np.unique(y[train_idx]).size < 2:
        raise ValueError("linear_probe: training split is single-class")

    zt, yt = z[train_idx], y[train_idx]
    w = np.zeros((z.shape[1], n_classes))
    b = np.zeros(n_classes)
    onehot = np.zeros((yt.size, n_classes))
    onehot[np.arange(yt.size), yt] = 1.0
    prev = math.inf
    for _ in range(max_iters):
        logits = zt @ w + b
        shifted = logits - logits.max(axis=1, keepdims=True)
        e = np.exp(shifted)
        p = e / e.sum(axis=1, keepdims=True)
        loss = float(-np.mean(np.log(p[np.arange(yt.size), yt])))
        if abs(prev - loss) < tol:
            break
        prev = loss
        g = (p - onehot) / yt.size
        w -= lr * (zt.T @ g)
        b -= lr * g.sum(axis=0)

    def accuracy(idx):
        pred = np.argmax(z[idx] @ w + b, axis=1)
        return float(np.mean(pred == y[idx]))

    return accuracy(train_idx), accuracy(test_idx)


def robust_loss(
    model: Model,
    x: np.ndarray,
    y: np.ndarray,
    attack_cfg: _attack.AttackConfig,
) -> float:
    """Mean cross-entropy on worst-case in-ball inputs for held-out data."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    adv = _attack.pgd_ce(model, x, y, attack_cfg)
    branch = "natural" if attack_cfg.identity else "adversarial"
    logits = model.forward(adv, branch=branch)
    return float(cross_entropy(logits, y, reduction="mean").item())
