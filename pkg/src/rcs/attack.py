"""PGD generators: contrastive pair attacks, divergence-maximizing attacks,
supervised attacks, and the one-step special case.

Every attack ascends the signed input gradient of its objective and projects
back into the L-inf ball around the starting point after each step (by
clipping the accumulated delta, so the ball constraint holds exactly).
Attacks evaluate the model in a detached pass: gradients flow to the inputs
only, never into parameters.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import (
    Tape,
    Tensor,
    exp,
    gather_rows,
    l2_normalize,
    log,
    logsumexp,
    matmul,
    mul,
    sub,
    transpose,
)
from .model import Model
from .rng import content_jitter

# When set, every attack verifies its output against the ball and clamp
# constraints before returning (cheap at desk scale).
CHECK_INVARIANTS = True

_BALL_TOL = 1e-12
# deterministic warm start for anchored-distance attacks (content-keyed)
_WARM_START_SEED = 0x5EED
_WARM_START_SCALE = 0.1


class AttackError(RuntimeError):
    """Attack could not proceed (non-finite gradients)."""


@dataclass(frozen=True)
class AttackConfig:
    steps: int
    step_size: float
    eps: float
    clamp: tuple[float, float] | None = None
    random_start: bool = False

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError("AttackConfig: steps must be >= 0")
        if self.step_size <= 0:
            raise ValueError("AttackConfig: step_size must be positive")
        if self.eps < 0:
            raise ValueError("AttackConfig: eps must be >= 0")
        if self.clamp is not None:
            lo, hi = self.clamp
            if not lo < hi:
                raise ValueError(f"AttackConfig: empty clamp interval [{lo}, {hi}]")

    @property
    def identity(self) -> bool:
        return self.steps == 0 or self.eps == 0.0


def rcs_step_size(rho_train: float, steps_train: int, steps_selection: int) -> float:
    """Step size for reduced-step attacks during selection: rho * T / T_sel."""
    if steps_selection < 1:
        raise ValueError("rcs_step_size: selection steps must be >= 1")
    return rho_train * steps_train / steps_selection


def _check_output(x0: np.ndarray, adv: np.ndarray, cfg: AttackConfig) -> None:
    if not CHECK_INVARIANTS:
        return
    gap = np.max(np.abs(adv - x0)) if adv.size else 0.0
    if gap > cfg.eps + _BALL_TOL:
        raise AssertionError(f"attack left the eps-ball: |delta|_inf = {gap} > {cfg.eps}")
    if cfg.clamp is not None and adv.size:
        lo, hi = cfg.clamp
        if adv.min() < lo or adv.max() > hi:
            raise AssertionError("attack output violates the clamp interval")


def _pgd(x0: np.ndarray, cfg: AttackConfig, grad_fn, rng=None, start=None) -> np.ndarray:
    """Shared ascent driver over one ndarray of attack variables."""
    x0 = np.asarray(x0, dtype=np.float64)
    if cfg.identity:
        return x0.copy()
    if cfg.random_start:
        if rng is None:
            raise ValueError("random_start attack needs an rng")
        start = x0 + rng.uniform(-cfg.eps, cfg.eps, size=x0.shape)
    if start is None:
        x = x0.copy()
    else:
        x = x0 + np.clip(np.asarray(start, dtype=np.float64) - x0, -cfg.eps, cfg.eps)
        if cfg.clamp is not None:
            x = np.clip(x, cfg.clamp[0], cfg.clamp[1])
    for step in range(cfg.steps):
        g = grad_fn(x)
        if not np.all(np.isfinite(g)):
            raise AttackError(f"non-finite gradient at step {step}")
        x = x + cfg.step_size * np.sign(g)
        x = x0 + np.clip(x - x0, -cfg.eps, cfg.eps)
        if cfg.clamp is not None:
            x = np.clip(x, cfg.clamp[0], cfg.clamp[1])
    _check_output(x0, x, cfg)
    return x


# ---------------------------------------------------------------------------
# contrastive pair objective with negatives frozen at their step-0 values
# ---------------------------------------------------------------------------


def _pair_loss_frozen(
    h: Tensor, partner: np.ndarray, frozen: np.ndarray | None, mask: np.ndarray | None, t: float
):
    """Contrastive loss of evolving views ``h`` (rows normalized in here)
    against an evolving partner permutation and frozen negative projections.

    ``partner`` maps each row to its positive's row. ``frozen`` holds the
    normalized step-0 projections of the whole augmented batch; ``mask``
    zeroes each row's own and partner's columns in the negative sum.
    """
    hn = l2_normalize(h)
    inv_t = 1.0 / t
    pos = mul(mul(hn, gather_rows(hn, partner)).sum(axis=-1), Tensor(inv_t))
    den = exp(pos)
    if frozen is not None and frozen.shape[0] > 2:
        cross = matmul(hn, transpose(Tensor(frozen)))
        neg = mul(exp(mul(cross, Tensor(inv_t))), Tensor(mask)).sum(axis=-1)
        den = den + neg
    return sub(log(den), pos).sum()


def _normalized_projections(model: Model, points: np.ndarray, branch: str) -> np.ndarray:
    out = model.forward(points, branch=branch).data
    norms = np.sqrt(np.sum(out * out, axis=-1, keepdims=True))
    live = norms > 1e-12
    return (out / np.where(live, norms, 1.0)) * live


def pgd_pair_batch(
    model: Model,
    views: np.ndarray,
    cfg: AttackConfig,
    temperature: float,
    branch: str = "adversarial",
    rng=None,
) -> np.ndarray:
    """Attack all positive pairs of a stacked view batch simultaneously.

    ``views`` holds the first view of every point in rows 0..b-1 and the
    second in rows b..2b-1. Each pair ascends the contrastive loss of the
    evolving pair; the other pairs' entries in the denominators stay frozen
    at their step-0 projections, so pairs evolve independently.
    """
    views = np.asarray(views, dtype=np.float64)
    if views.ndim != 2 or views.shape[0] % 2 != 0 or views.shape[0] == 0:
        raise ValueError(f"pgd_pair_batch: expected (2b, d) views, got {tuple(views.shape)}")
    if cfg.identity:
        return views.copy()
    b = views.shape[0] // 2
    partner = np.concatenate([np.arange(b, 2 * b), np.arange(0, b)])
    frozen = _normalized_projections(model, views, branch)
    n = 2 * b
    mask = np.ones((n, n))
    rows = np.arange(n)
    mask[rows, rows] = 0.0
    mask[rows, partner] = 0.0

    def grad_fn(x):
        leaf = Tensor(x, requires_grad=True)
        with Tape() as tape:
            h = model.forward(leaf, branch=branch)
            loss = _pair_loss_frozen(h, partner, frozen, mask, temperature)
            grads = tape.backward(loss, wrt=[leaf])
        return grads[leaf]

    return _pgd(views, cfg, grad_fn, rng=rng)


def pgd_pair(
    model: Model,
    x_i: np.ndarray,
    x_j: np.ndarray,
    cfg: AttackConfig,
    temperature: float = 0.1,
    negatives: np.ndarray | None = None,
    branch: str = "adversarial",
    rng=None,
) -> tuple[np.ndarray, np.ndarray]:
    """Attack one positive pair; both views step simultaneously.

    ``negatives`` optionally supplies extra points whose projections are
    frozen into the contrastive denominators (they do not evolve).
    """
    x_i = np.atleast_2d(np.asarray(x_i, dtype=np.float64))
    x_j = np.atleast_2d(np.asarray(x_j, dtype=np.float64))
    if x_i.shape != x_j.shape:
        raise ValueError(f"pgd_pair: view shapes differ: {x_i.shape} vs {x_j.shape}")
    if x_i.shape[0] != 1:
        raise ValueError("pgd_pair handles a single pair; use pgd_pair_batch for batches")
    stacked = np.concatenate([x_i, x_j], axis=0)
    if cfg.identity:
        return x_i.copy(), x_j.copy()

    partner = np.array([1, 0])
    frozen = None
    mask = None
    if negatives is not None and len(negatives):
        negs = np.atleast_2d(np.asarray(negatives, dtype=np.float64))
        frozen = np.concatenate(
            [np.zeros((2, model.config.projection_dim)), _normalized_projections(model, negs, branch)]
        )
        n_all = frozen.shape[0]
        mask = np.ones((2, n_all))
        mask[:, :2] = 0.0

    def grad_fn(x):
        leaf = Tensor(x, requires_grad=True)
        with Tape() as tape:
            h = model.forward(leaf, branch=branch)
            loss = _pair_loss_frozen(h, partner, frozen, mask, temperature)
            grads = tape.backward(loss, wrt=[leaf])
        return grads[leaf]

    adv = _pgd(stacked, cfg, grad_fn, rng=rng)
    return adv[:1], adv[1:]


# ---------------------------------------------------------------------------
# divergence-maximizing and supervised attacks
# ---------------------------------------------------------------------------


def pgd_rd(
    model: Model,
    x: np.ndarray,
    cfg: AttackConfig,
    distance_fn,
    branch: str = "adversarial",
    rng=None,
) -> np.ndarray:
    """Maximize a representation distance to the fixed natural anchor.

    The anchor projections are computed once from ``x`` and held constant
    across attack steps; points evolve independently. The natural point is a
    stationary point of the distance (zero gradient), so the ascent starts
    from a small in-ball perturbation derived deterministically from the
    input bytes.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if cfg.identity:
        return x.copy()
    anchor = model.forward(x, branch=branch).data
    start = x + _WARM_START_SCALE * cfg.eps * content_jitter(_WARM_START_SEED, x)

    def grad_fn(xa):
        leaf = Tensor(xa, requires_grad=True)
        with Tape() as tape:
            p = model.forward(leaf, branch=branch)
            loss = distance_fn(p, Tensor(anchor))
            grads = tape.backward(loss, wrt=[leaf])
        return grads[leaf]

    return _pgd(x, cfg, grad_fn, rng=rng, start=start)


def _ce_sum(logits: Tensor, labels: np.ndarray) -> Tensor:
    onehot = np.zeros(logits.data.shape)
    onehot[np.arange(labels.size), labels] = 1.0
    picked = mul(logits, Tensor(onehot)).sum(axis=-1)
    return sub(logsumexp(logits), picked).sum()


def pgd_ce(
    model: Model,
    x: np.ndarray,
    y: np.ndarray,
    cfg: AttackConfig,
    branch: str = "adversarial",
    rng=None,
) -> np.ndarray:
    """Maximize cross-entropy of the classifier head against fixed labels."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.asarray(y, dtype=np.intp).ravel()
    if y.shape[0] != x.shape[0]:
        raise ValueError(f"pgd_ce: {x.shape[0]} points but {y.shape[0]} labels")
    if cfg.identity:
        return x.copy()

    def grad_fn(xa):
        leaf = Tensor(xa, requires_grad=True)
        with Tape() as tape:
            logits = model.forward(leaf, branch=branch)
            loss = _ce_sum(logits, y)
            grads = tape.backward(loss, wrt=[leaf])
        return grads[leaf]

    return _pgd(x, cfg, grad_fn, rng=rng)


def fgsm(
    model: Model,
    x,
    eps: float,
    step_size: float,
    temperature: float = 0.1,
    y: np.ndarray | None = None,
    distance_fn=None,
    clamp: tuple[float, float] | None = None,
    branch: str = "adversarial",
):
    """One-step attack; the step may exceed eps, projection then binds.

    Dispatch: a (x_i, x_j) tuple runs the pair attack, ``y`` runs the
    cross-entropy attack, ``distance_fn`` runs the divergence attack.
    """
    cfg = AttackConfig(steps=1, step_size=step_size, eps=eps, clamp=clamp)
    if isinstance(x, (tuple, list)) and len(x) == 2:
        return pgd_pair(model, x[0], x[1], cfg, temperature=temperature, branch=branch)
    if y is not None:
        return pgd_ce(model, np.asarray(x), y, cfg, branch=branch)
    if distance_fn is not None:
        return pgd_rd(model, np.asarray(x), cfg, distance_fn, branch=branch)
    raise ValueError("fgsm: pass a view pair, labels y, or a distance_fn")
