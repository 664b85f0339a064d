"""Contrastive, adversarial-contrastive, schedule-driven, and supervised
adversarial losses.

Batch reductions: ``sum`` adds the per-pair (or per-sample) losses, matching
the set-sum semantics the selection machinery relies on; ``mean`` divides by
the number of pairs (or samples) and is the training default.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import attack as _attack
from .autodiff import Tensor, Tape, gather_rows, l2_normalize, logsumexp, matmul, mul, sub, transpose
from .divergence import DistanceKind, kl_div, make_distance
from .model import Model

_REDUCTIONS = ("mean", "sum")


@dataclass(frozen=True)
class AugmentedBatch:
    """Two stochastic views per point; view rows pair up positionally."""

    originals: np.ndarray
    view_i: np.ndarray
    view_j: np.ndarray
    strength: float = 1.0

    def __post_init__(self):
        if self.view_i.shape != self.originals.shape or self.view_j.shape != self.originals.shape:
            raise ValueError("AugmentedBatch: views must match the original batch shape")

    @property
    def size(self) -> int:
        return self.originals.shape[0]

    def stacked(self) -> np.ndarray:
        """All 2b views, first-view rows then second-view rows."""
        return np.concatenate([self.view_i, self.view_j], axis=0)


def _one_view(x: np.ndarray, strength: float, rng) -> np.ndarray:
    # additive noise, then per-coordinate dropout, then one global scale per point
    s = strength
    noise = rng.standard_normal(x.shape) * (0.1 * s)
    keep = rng.random(x.shape) >= (0.1 * s)
    # an all-dropped row would be identically zero, which the cosine-similarity
    # losses cannot embed; redraw such rows (rare for non-trivial dimensions)
    dead = ~keep.any(axis=1)
    while dead.any():
        keep[dead] = rng.random((int(dead.sum()), x.shape[1])) >= (0.1 * s)
        dead = ~keep.any(axis=1)
    scale = rng.uniform(1.0 - 0.2 * s, 1.0 + 0.2 * s, size=(x.shape[0], 1))
    return (x + noise) * keep * scale


def augment_batch(x: np.ndarray, strength: float, rng) -> AugmentedBatch:
    """Vector-data augmentation with a tunable strength in [0, 1]."""
    if not 0.0 <= strength <= 1.0:
        raise ValueError(f"augmentation strength must be in [0, 1], got {strength}")
    x = np.asarray(x, dtype=np.float64)
    return AugmentedBatch(
        originals=x,
        view_i=_one_view(x, strength, rng),
        view_j=_one_view(x, strength, rng),
        strength=strength,
    )


def _check_reduction(reduction: str) -> None:
    if reduction not in _REDUCTIONS:
        raise ValueError(f"reduction must be one of {_REDUCTIONS}, got {reduction!r}")


def nt_xent(projections, temperature: float, reduction: str = "mean"):
    """Contrastive loss over stacked pair projections (rows 0..b-1 pair with
    rows b..2b-1). Each pair contributes both anchor directions; every other
    view in the batch enters the denominator."""
    _check_reduction(reduction)
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    p = projections if isinstance(projections, Tensor) else Tensor(projections)
    n = p.data.shape[0]
    if n == 0:
        raise ValueError("empty batch")
    if p.data.ndim != 2 or n % 2 != 0:
        raise ValueError(f"nt_xent: expected (2b, v) projections, got {tuple(p.data.shape)}")
    b = n // 2
    partner = np.concatenate([np.arange(b, 2 * b), np.arange(0, b)])
    hn = l2_normalize(p)
    inv_t = 1.0 / temperature
    pos = mul(mul(hn, gather_rows(hn, partner)).sum(axis=-1), Tensor(inv_t))
    sims = mul(matmul(hn, transpose(hn)), Tensor(inv_t))
    # mask each anchor's own column out of its denominator
    eye = np.eye(n)
    masked = sub(mul(sims, Tensor(1.0 - eye)), Tensor(eye * 1e9))
    per_anchor = sub(logsumexp(masked), pos)
    total = per_anchor.sum()
    return total if reduction == "sum" else total / b


def cl_loss(
    model: Model,
    views,
    temperature: float,
    reduction: str = "mean",
    branch: str = "natural",
    update_stats: bool = False,
):
    """Contrastive loss of a stacked view batch under the model."""
    stacked = views.stacked() if isinstance(views, AugmentedBatch) else np.asarray(views, float)
    if stacked.shape[0] == 0:
        raise ValueError("empty batch")
    proj = model.forward(stacked, branch=branch, update_stats=update_stats)
    return nt_xent(proj, temperature, reduction=reduction)


def acl_loss(
    model: Model,
    batch: AugmentedBatch,
    omega: float,
    attack_cfg: _attack.AttackConfig,
    temperature: float,
    reduction: str = "mean",
    update_stats: bool = False,
    rng=None,
):
    """Adversarial contrastive loss: (1+w) * CL(adversarial) + (1-w) * CL(natural).

    Adversarial views come from the pair attack run on a detached model
    evaluation; the returned loss is differentiable in the parameters.
    """
    if not 0.0 <= omega <= 1.0:
        raise ValueError(f"omega must be in [0, 1], got {omega}")
    if batch.size == 0:
        raise ValueError("empty batch")
    nat = batch.stacked()
    adv = _attack.pgd_pair_batch(model, nat, attack_cfg, temperature, rng=rng)
    loss_adv = cl_loss(
        model, adv, temperature, reduction, branch="adversarial", update_stats=update_stats
    )
    loss_nat = cl_loss(
        model, nat, temperature, reduction, branch="natural", update_stats=update_stats
    )
    return mul(loss_adv, Tensor(1.0 + omega)) + mul(loss_nat, Tensor(1.0 - omega))


def dynacl_schedule(epoch: int, total_epochs: int, period: int, rate: float) -> tuple[float, float]:
    """Piecewise-constant augmentation-strength decay with coupled reweighting.

    strength = 1 - floor(e/K) * K/E, held constant over K-epoch blocks;
    omega = rate * (1 - strength).
    """
    if period < 1:
        raise ValueError("dynacl_schedule: period must be >= 1")
    if not 0 <= epoch < total_epochs:
        raise ValueError(f"dynacl_schedule: epoch {epoch} outside [0, {total_epochs})")
    mu = 1.0 - (epoch // period) * (period / total_epochs)
    return mu, rate * (1.0 - mu)


# ---------------------------------------------------------------------------
# supervised adversarial losses (projection head acts as the classifier)
# ---------------------------------------------------------------------------


def _check_labels(model: Model, y: np.ndarray) -> np.ndarray:
    y = np.asarray(y, dtype=np.intp).ravel()
    c = model.config.projection_dim
    if y.size and (y.min() < 0 or y.max() >= c):
        raise ValueError(f"labels must lie in [0, {c}), got range [{y.min()}, {y.max()}]")
    return y


def cross_entropy(logits, y: np.ndarray, reduction: str = "mean"):
    """Softmax cross-entropy against integer labels."""
    _check_reduction(reduction)
    t = logits if isinstance(logits, Tensor) else Tensor(logits)
    y = np.asarray(y, dtype=np.intp).ravel()
    if t.data.shape[0] != y.size:
        raise ValueError(f"cross_entropy: {t.data.shape[0]} rows vs {y.size} labels")
    onehot = np.zeros(t.data.shape)
    onehot[np.arange(y.size), y] = 1.0
    picked = mul(t, Tensor(onehot)).sum(axis=-1)
    total = sub(logsumexp(t), picked).sum()
    return total if reduction == "sum" else total / y.size


def sat_loss(
    model: Model,
    x: np.ndarray,
    y: np.ndarray,
    attack_cfg: _attack.AttackConfig,
    reduction: str = "mean",
    update_stats: bool = False,
):
    """Cross-entropy on worst-case in-ball inputs (standard adversarial training)."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = _check_labels(model, y)
    adv = _attack.pgd_ce(model, x, y, attack_cfg)
    branch = "natural" if attack_cfg.identity else "adversarial"
    logits = model.forward(adv, branch=branch, update_stats=update_stats)
    return cross_entropy(logits, y, reduction=reduction)


def trades_loss(
    model: Model,
    x: np.ndarray,
    y: np.ndarray,
    trade_off: float,
    attack_cfg: _attack.AttackConfig,
    reduction: str = "mean",
    temperature: float = 1.0,
    update_stats: bool = False,
):
    """Natural cross-entropy plus a weighted KL term to the worst-case inputs.

    The attack maximizes KL(model(x~) || model(x)) with the natural
    distribution held fixed. An identity attack (eps = 0, steps = 0, or
    trade_off = 0) contributes an exactly-zero KL term, so the loss reduces
    to plain cross-entropy on natural data.
    """
    _check_reduction(reduction)
    if trade_off < 0:
        raise ValueError("trades_loss: trade-off must be >= 0")
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = _check_labels(model, y)
    logits_nat = model.forward(x, branch="natural", update_stats=update_stats)
    ce = cross_entropy(logits_nat, y, reduction=reduction)
    if trade_off == 0.0 or attack_cfg.identity:
        return ce
    dist = make_distance(DistanceKind("kl", temperature))
    adv = _attack.pgd_rd(model, x, attack_cfg, dist)
    logits_adv = model.forward(adv, branch="adversarial", update_stats=update_stats)
    kl = kl_div(logits_adv, logits_nat, temperature=temperature)
    if reduction == "mean":
        kl = kl / x.shape[0]
    return ce + mul(kl, Tensor(trade_off))
