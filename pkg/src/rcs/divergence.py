"""Representational divergence: distance between a model's view of natural
points and of their worst-case in-ball perturbations.

Projector outputs are mapped to distributions with a temperature softmax
before applying KL or JS. Set-level divergence uses sum semantics so values
add over partitions of the validation set.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import attack as _attack
from .autodiff import ShapeError, Tape, Tensor, clamp, exp, log, log_softmax, mul, sub
from .model import Model

_KINDS = ("kl", "js")


@dataclass(frozen=True)
class DistanceKind:
    kind: str = "kl"
    temperature: float = 1.0

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ValueError(f"distance kind must be one of {_KINDS}, got {self.kind!r}")
        if self.temperature <= 0:
            raise ValueError("distance temperature must be positive")


@dataclass(frozen=True)
class ValidationSet:
    """Unlabeled points held out of training, used as the selection signal."""

    points: np.ndarray
    indices: np.ndarray | None = None
    note: str = ""

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[0] < 1:
            raise ValueError("ValidationSet needs a non-empty (m, d) array")
        object.__setattr__(self, "points", pts)

    def __len__(self) -> int:
        return self.points.shape[0]


def _check_pair(p, q) -> tuple[Tensor, Tensor]:
    p = p if isinstance(p, Tensor) else Tensor(p)
    q = q if isinstance(q, Tensor) else Tensor(q)
    if p.data.shape != q.data.shape:
        raise ShapeError(f"distance: shapes {tuple(p.data.shape)} vs {tuple(q.data.shape)}")
    return p, q


def kl_div(p_logits, q_logits, temperature: float = 1.0):
    """KL(softmax(p/T) || softmax(q/T)); batched rows reduce by sum.

    Computed from log-softmax terms so extreme logits stay finite.
    """
    p, q = _check_pair(p_logits, q_logits)
    inv = 1.0 / float(temperature)
    lp = log_softmax(mul(p, Tensor(inv)))
    lq = log_softmax(mul(q, Tensor(inv)))
    return mul(exp(lp), sub(lp, lq)).sum()


def js_div(p_logits, q_logits, temperature: float = 1.0):
    """Jensen-Shannon divergence of the two softmax distributions (sum over rows)."""
    p, q = _check_pair(p_logits, q_logits)
    inv = 1.0 / float(temperature)
    lp = log_softmax(mul(p, Tensor(inv)))
    lq = log_softmax(mul(q, Tensor(inv)))
    pp, qq = exp(lp), exp(lq)
    # floor the mixture so fully-underflowed coordinates (where both weights
    # are exactly zero) stay finite; those terms multiply by zero anyway
    m = clamp(mul(pp + qq, Tensor(0.5)), 5e-324, np.inf)
    logm = log(m)
    kl_pm = mul(pp, sub(lp, logm)).sum()
    kl_qm = mul(qq, sub(lq, logm)).sum()
    return mul(kl_pm + kl_qm, Tensor(0.5))


def make_distance(distance: DistanceKind):
    """Distance callable on projector-output logits (Tensor or ndarray)."""
    fn = kl_div if distance.kind == "kl" else js_div
    temp = distance.temperature

    def dist(p_logits, q_logits):
        return fn(p_logits, q_logits, temperature=temp)

    return dist


def rd_point(
    model: Model,
    x: np.ndarray,
    attack_cfg,
    distance: DistanceKind = DistanceKind(),
    branch: str = "adversarial",
) -> float:
    """Divergence of one point from its in-ball worst-case perturbation."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    return rd_set(model, x, attack_cfg, distance=distance, branch=branch)


def rd_set(
    model: Model,
    points,
    attack_cfg,
    distance: DistanceKind = DistanceKind(),
    branch: str = "adversarial",
    with_grad: bool = False,
    last_layer: bool = False,
):
    """Sum of per-point divergences over a validation set.

    With ``with_grad`` the return value is ``(value, gradient)`` where the
    gradient is taken with respect to the flat parameter vector at the
    adversarial points found by the attack (optionally restricted to the
    projection head).
    """
    pts = points.points if isinstance(points, ValidationSet) else np.asarray(points, float)
    if pts.ndim != 2 or pts.shape[0] == 0:
        raise ValueError("rd_set: validation set must be a non-empty (m, d) array")
    dist = make_distance(distance)
    adv = _attack.pgd_rd(model, pts, attack_cfg, dist, branch=branch)
    if not with_grad:
        p = model.forward(adv, branch=branch)
        q = model.forward(pts, branch=branch)
        return float(dist(p, q).item())
    model.zero_grad()
    with Tape() as tape:
        p = model.forward(adv, branch=branch)
        q = model.forward(pts, branch=branch)
        value = dist(p, q)
        tape.backward(value, wrt=model.parameters())
    grad = model.grad_vector(last_layer=last_layer)
    model.zero_grad()
    return float(value.item()), grad
