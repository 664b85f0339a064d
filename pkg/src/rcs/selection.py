"""Greedy batch-wise coreset selection with Taylor-approximated marginal
gains, plus the exact set objective, an exhaustive oracle, and the
approximation-guarantee checker.

The set objective scores a candidate coreset S by the (negated) divergence
on the validation set after a virtual one-step parameter update along the
summed training-loss gradient of S:

    G(S) = -RD(U; theta - eta * sum_{B in S} grad_B)

The greedy loop approximates each marginal gain by eta * qU . qB, where qU
is the divergence gradient at the current virtual parameters and qB the
cached batch gradient (batch gradients are computed once per invocation and
never refreshed, which is the documented approximation).
"""
from __future__ import annotations

import hashlib
import itertools
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import attack as _attack
from .autodiff import Tape
from .divergence import DistanceKind, ValidationSet, make_distance, rd_set
from .losses import acl_loss, augment_batch, sat_loss, trades_loss
from .model import Model
from .rng import content_rng, philox_rng

DEFAULT_ORACLE_CAP = 10_000


class SelectionError(ValueError):
    """Invalid selection request (empty budget, overlap, oracle too large)."""


@dataclass(frozen=True)
class MinibatchPartition:
    """Fixed split of training indices into batch_size-sized minibatches.

    Batch ids are positions in the split; the last batch may be smaller.
    """

    batches: tuple
    n_points: int
    batch_size: int

    def __post_init__(self):
        batches = tuple(np.asarray(b, dtype=np.intp) for b in self.batches)
        object.__setattr__(self, "batches", batches)
        sizes = [len(b) for b in batches]
        if len(batches) != math.ceil(self.n_points / self.batch_size):
            raise ValueError("partition: wrong batch count for n_points/batch_size")
        if sum(sizes) != self.n_points:
            raise ValueError("partition: batches do not cover n_points indices")
        if any(s != self.batch_size for s in sizes[:-1]) or sizes[-1] > self.batch_size:
            raise ValueError("partition: all batches except the last must have batch_size points")
        flat = np.concatenate(batches) if batches else np.array([], dtype=np.intp)
        if len(np.unique(flat)) != flat.size:
            raise ValueError("partition: batches overlap")

    @staticmethod
    def create(indices, batch_size: int, rng=None) -> "MinibatchPartition":
        """Chunk ``indices`` (shuffled first when ``rng`` is given) into batches."""
        idx = np.asarray(indices, dtype=np.intp)
        if batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if rng is not None:
            idx = rng.permutation(idx)
        batches = tuple(idx[i : i + batch_size] for i in range(0, len(idx), batch_size))
        return MinibatchPartition(batches=batches, n_points=len(idx), batch_size=batch_size)

    def __len__(self) -> int:
        return len(self.batches)

    def point_ids(self) -> np.ndarray:
        return np.sort(np.concatenate(self.batches))

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(f"{self.n_points}:{self.batch_size}:".encode())
        for b in self.batches:
            h.update(b.astype("<i8").tobytes())
            h.update(b";")
        return h.hexdigest()

    def budget(self, fraction: float) -> int:
        """Number of batches selected for a subset fraction: floor(k*N/beta)."""
        if not 0.0 < fraction <= 1.0:
            raise ValueError(f"subset fraction must be in (0, 1], got {fraction}")
        return int(math.floor(fraction * self.n_points / self.batch_size))


@dataclass(frozen=True)
class SelectionConfig:
    eta: float = 0.01
    fraction: float = 0.1
    attack: _attack.AttackConfig = _attack.AttackConfig(steps=3, step_size=2 / 255 * 5 / 3, eps=8 / 255)
    distance: DistanceKind = DistanceKind("kl")
    objective: str = "acl"
    temperature: float = 0.1
    omega: float = 0.0
    aug_strength: float = 1.0
    trade_off: float = 6.0
    last_layer: bool = False
    rd_branch: str = "adversarial"
    seed: int = 0
    chunk_size: int | None = None

    def __post_init__(self):
        if self.objective not in ("acl", "sat", "trades"):
            raise ValueError(f"unknown selection objective {self.objective!r}")
        if self.eta < 0:
            raise ValueError("selection learning rate must be non-negative")


@dataclass
class CoresetResult:
    """Outcome of one selection round."""

    selected: list[int]
    gains: list[float]
    grad_evals: int
    evals_trace: list[int]
    wall_time: float
    theta_drift: float
    method: str
    partition_fingerprint: str
    batch_size: int
    n_points: int

    def __post_init__(self):
        if len(set(self.selected)) != len(self.selected):
            raise ValueError("CoresetResult: selected batch ids must be unique")


def write_coreset_csv(result: CoresetResult, path) -> None:
    """Columns: iteration, batch_id, gain, cumulative_grad_evals."""
    lines = ["iteration,batch_id,gain,cumulative_grad_evals"]
    for i, (bid, gain, ge) in enumerate(
        zip(result.selected, result.gains, result.evals_trace), start=1
    ):
        lines.append(f"{i},{bid},{gain!r},{ge}")
    with open(path, "w", newline="") as fh:
        fh.write("\n".join(lines) + "\n")


def read_coreset_ids(path) -> list[int]:
    with open(path) as fh:
        rows = fh.read().strip().split("\n")
    return [int(r.split(",")[1]) for r in rows[1:]]


# ---------------------------------------------------------------------------
# batch gradients and the exact set objective
# ---------------------------------------------------------------------------


def _batch_loss_grad(work: Model, xb, yb, cfg: SelectionConfig) -> np.ndarray:
    work.zero_grad()
    with Tape() as tape:
        if cfg.objective == "acl":
            rng = content_rng(cfg.seed, xb)
            batch = augment_batch(xb, cfg.aug_strength, rng)
            loss = acl_loss(
                work, batch, cfg.omega, cfg.attack, cfg.temperature, reduction="sum", rng=rng
            )
        elif cfg.objective == "sat":
            loss = sat_loss(work, xb, yb, cfg.attack, reduction="sum")
        else:
            loss = trades_loss(work, xb, yb, cfg.trade_off, cfg.attack, reduction="sum")
        tape.backward(loss, wrt=work.parameters())
    vec = work.grad_vector(last_layer=cfg.last_layer)
    work.zero_grad()
    return vec


def precompute_batch_grads(
    model: Model,
    data: np.ndarray,
    partition: MinibatchPartition,
    cfg: SelectionConfig,
    labels: np.ndarray | None = None,
) -> list[np.ndarray]:
    """Training-loss gradient of every minibatch at the snapshot parameters."""
    if cfg.objective != "acl" and labels is None:
        raise SelectionError(f"objective {cfg.objective!r} needs labels")
    grads = []
    for bid, idx in enumerate(partition.batches):
        yb = labels[idx] if labels is not None else None
        vec = _batch_loss_grad(model, data[idx], yb, cfg)
        if not np.all(np.isfinite(vec)):
            raise SelectionError(f"non-finite gradient for batch {bid}")
        grads.append(vec)
    return grads


def taylor_gain(q_u: np.ndarray, q_m: np.ndarray, eta: float) -> float:
    """First-order marginal-gain proxy: eta * qU . qm (constant offset omitted)."""
    q_u = np.asarray(q_u, dtype=np.float64)
    q_m = np.asarray(q_m, dtype=np.float64)
    if q_u.shape != q_m.shape:
        raise ValueError(f"taylor_gain: length mismatch {q_u.shape} vs {q_m.shape}")
    return float(eta * np.dot(q_u, q_m))


@dataclass
class SelectionContext:
    """Shared state for exact-objective evaluations on one snapshot."""

    work: Model
    theta0: np.ndarray
    grads: list
    partition: MinibatchPartition
    data: np.ndarray
    labels: np.ndarray | None
    validation: ValidationSet
    cfg: SelectionConfig
    _cache: dict = field(default_factory=dict)
    _frozen_adv: np.ndarray | None = None

    @property
    def param_slice(self) -> slice:
        return self.work.head_slice() if self.cfg.last_layer else slice(None)

    def virtual_params(self, ids) -> np.ndarray:
        theta = self.theta0.copy()
        for i in ids:
            theta[self.param_slice] = theta[self.param_slice] - self.cfg.eta * self.grads[i]
        return theta

    def g_value(self, ids, frozen_adv: bool = False) -> float:
        """Exact set objective: negated validation divergence after the
        virtual one-step update along the summed batch gradients.

        With ``frozen_adv`` the adversarial validation points are generated
        once at the snapshot parameters and reused for every virtual update,
        making the objective a smooth function of the update (the form the
        first-order gain expansion assumes). The default regenerates them at
        each virtual parameter vector, the literal objective definition.
        """
        key = (frozenset(int(i) for i in ids), frozen_adv)
        if key in self._cache:
            return self._cache[key]
        adv = self.frozen_adv() if frozen_adv else None  # resets work params; do it first
        self.work.set_param_vector(self.virtual_params(sorted(key[0])))
        if frozen_adv:
            dist = make_distance(self.cfg.distance)
            pts = self.validation.points
            val = float(
                dist(
                    self.work.forward(adv, branch=self.cfg.rd_branch),
                    self.work.forward(pts, branch=self.cfg.rd_branch),
                ).item()
            )
        else:
            val = rd_set(
                self.work,
                self.validation,
                self.cfg.attack,
                distance=self.cfg.distance,
                branch=self.cfg.rd_branch,
            )
        self._cache[key] = -float(val)
        return self._cache[key]

    def frozen_adv(self) -> np.ndarray:
        if self._frozen_adv is None:
            self.work.set_param_vector(self.theta0)
            self._frozen_adv = _attack.pgd_rd(
                self.work,
                self.validation.points,
                self.cfg.attack,
                make_distance(self.cfg.distance),
                branch=self.cfg.rd_branch,
            )
        return self._frozen_adv


def build_context(
    model: Model,
    data: np.ndarray,
    partition: MinibatchPartition,
    validation: ValidationSet,
    cfg: SelectionConfig,
    labels: np.ndarray | None = None,
) -> SelectionContext:
    work = model.snapshot().restore()
    grads = precompute_batch_grads(work, data, partition, cfg, labels=labels)
    return SelectionContext(
        work=work,
        theta0=work.param_vector(),
        grads=grads,
        partition=partition,
        data=data,
        labels=labels,
        validation=validation,
        cfg=cfg,
    )


def exact_gain(ctx: SelectionContext, subset, batch_ids, frozen_adv: bool = False) -> float:
    """G(S u B) - G(S); the test oracle for the Taylor proxy."""
    subset = [int(i) for i in subset]
    add = [int(batch_ids)] if np.isscalar(batch_ids) else [int(i) for i in batch_ids]
    if set(subset) & set(add):
        raise SelectionError(f"exact_gain: overlap between S={subset} and B={add}")
    if not add:
        return 0.0
    return ctx.g_value(subset + add, frozen_adv) - ctx.g_value(subset, frozen_adv)


# ---------------------------------------------------------------------------
# selection strategies
# ---------------------------------------------------------------------------


def rcs_greedy(
    model: Model,
    data: np.ndarray,
    partition: MinibatchPartition,
    validation: ValidationSet,
    cfg: SelectionConfig,
    labels: np.ndarray | None = None,
    _ctx: SelectionContext | None = None,
    _budget: int | None = None,
) -> CoresetResult:
    """Greedy batch-wise search.

    One gradient per batch is cached up front; each iteration recomputes the
    validation-divergence gradient at the current virtual parameters, picks
    the remaining batch with the largest proxy gain (ties to the lowest id),
    and applies the virtual update with that batch's cached gradient.
    """
    start = time.perf_counter()
    budget = partition.budget(cfg.fraction) if _budget is None else _budget
    if budget == 0:
        raise SelectionError(
            f"fraction {cfg.fraction} selects zero batches for "
            f"{partition.n_points} points at batch size {partition.batch_size}"
        )
    ctx = _ctx if _ctx is not None else build_context(model, data, partition, validation, cfg, labels)
    n_batches = len(partition)
    evals = n_batches  # one gradient per batch during precompute
    slice_ = ctx.param_slice

    theta = ctx.theta0.copy()
    remaining = list(range(n_batches))
    selected: list[int] = []
    gains: list[float] = []
    evals_trace: list[int] = []
    for _ in range(budget):
        ctx.work.set_param_vector(theta)
        _, q_u = rd_set(
            ctx.work,
            ctx.validation,
            cfg.attack,
            distance=cfg.distance,
            branch=cfg.rd_branch,
            with_grad=True,
            last_layer=cfg.last_layer,
        )
        evals += 1
        best_id, best_gain = -1, -math.inf
        for m in remaining:
            gain = taylor_gain(q_u, ctx.grads[m], cfg.eta)
            if gain > best_gain:
                best_id, best_gain = m, gain
        selected.append(best_id)
        gains.append(best_gain)
        remaining.remove(best_id)
        theta[slice_] = theta[slice_] - cfg.eta * ctx.grads[best_id]
        evals_trace.append(evals)

    return CoresetResult(
        selected=selected,
        gains=gains,
        grad_evals=evals,
        evals_trace=evals_trace,
        wall_time=time.perf_counter() - start,
        theta_drift=float(np.linalg.norm(theta - ctx.theta0)),
        method="rcs",
        partition_fingerprint=partition.fingerprint(),
        batch_size=partition.batch_size,
        n_points=partition.n_points,
    )


def chunked_select(
    model: Model,
    data: np.ndarray,
    partition: MinibatchPartition,
    validation: ValidationSet,
    cfg: SelectionConfig,
    labels: np.ndarray | None = None,
    chunk_size: int = 100,
) -> CoresetResult:
    """Run the greedy search independently over chunks of consecutive batches.

    Each chunk gets budget floor(k * chunk_points / batch_size) and a fresh
    virtual parameter state; a single chunk covering everything is exactly
    the plain greedy search.
    """
    start = time.perf_counter()
    if chunk_size < 1:
        raise SelectionError("chunk size must be >= 1")
    n_batches = len(partition)
    selected: list[int] = []
    gains: list[float] = []
    evals_trace: list[int] = []
    evals = 0
    drift_sq = 0.0
    for lo in range(0, n_batches, chunk_size):
        ids = list(range(lo, min(lo + chunk_size, n_batches)))
        sub_batches = tuple(partition.batches[i] for i in ids)
        sub_n = int(sum(len(b) for b in sub_batches))
        sub_partition = MinibatchPartition(
            batches=sub_batches, n_points=sub_n, batch_size=partition.batch_size
        )
        sub_budget = int(math.floor(cfg.fraction * sub_n / partition.batch_size))
        if sub_budget == 0:
            raise SelectionError(
                f"chunk starting at batch {lo}: fraction {cfg.fraction} selects zero batches"
            )
        part = rcs_greedy(
            model, data, sub_partition, validation, cfg, labels=labels, _budget=sub_budget
        )
        selected.extend(ids[i] for i in part.selected)
        gains.extend(part.gains)
        evals_trace.extend(evals + e for e in part.evals_trace)
        evals += part.grad_evals
        drift_sq += part.theta_drift**2
    return CoresetResult(
        selected=selected,
        gains=gains,
        grad_evals=evals,
        evals_trace=evals_trace,
        wall_time=time.perf_counter() - start,
        theta_drift=math.sqrt(drift_sq),
        method="rcs-chunked",
        partition_fingerprint=partition.fingerprint(),
        batch_size=partition.batch_size,
        n_points=partition.n_points,
    )


def random_select(
    partition: MinibatchPartition, fraction: float, seed: int, label: int = 0
) -> CoresetResult:
    """Uniform batch sample without replacement; the selection baseline.

    ``label`` distinguishes reselection rounds under one seed.
    """
    start = time.perf_counter()
    budget = partition.budget(fraction)
    if budget == 0:
        raise SelectionError(
            f"fraction {fraction} selects zero batches for "
            f"{partition.n_points} points at batch size {partition.batch_size}"
        )
    rng = philox_rng(seed, "random-select", label)
    chosen = rng.choice(len(partition), size=budget, replace=False)
    return CoresetResult(
        selected=[int(c) for c in chosen],
        gains=[0.0] * budget,
        grad_evals=0,
        evals_trace=[0] * budget,
        wall_time=time.perf_counter() - start,
        theta_drift=0.0,
        method="random",
        partition_fingerprint=partition.fingerprint(),
        batch_size=partition.batch_size,
        n_points=partition.n_points,
    )


# ---------------------------------------------------------------------------
# exhaustive oracle and guarantee verification
# ---------------------------------------------------------------------------


@dataclass
class OracleResult:
    best: tuple[int, ...]
    g_star: float
    evaluations: int
    budget: int


def exhaustive_oracle(
    model: Model,
    data: np.ndarray,
    partition: MinibatchPartition,
    validation: ValidationSet,
    cfg: SelectionConfig,
    labels: np.ndarray | None = None,
    cap: int = DEFAULT_ORACLE_CAP,
    _ctx: SelectionContext | None = None,
) -> OracleResult:
    """Evaluate the exact objective on every budget-sized batch subset."""
    budget = partition.budget(cfg.fraction)
    if budget == 0:
        raise SelectionError("fraction selects zero batches")
    total = math.comb(len(partition), budget)
    if total > cap:
        raise SelectionError(
            f"exhaustive oracle would evaluate {total} subsets (cap {cap}); use a smaller instance"
        )
    ctx = _ctx if _ctx is not None else build_context(model, data, partition, validation, cfg, labels)
    best, best_val = None, -math.inf
    evaluations = 0
    for subset in itertools.combinations(range(len(partition)), budget):
        val = ctx.g_value(subset)
        evaluations += 1
        if val > best_val:
            best, best_val = subset, val
    return OracleResult(best=best, g_star=best_val, evaluations=evaluations, budget=budget)


@dataclass(frozen=True)
class GuaranteeParams:
    """Constants for the greedy approximation bound.

    sigma is an empirical surrogate: the smallest per-element offset making
    every enumerated marginal gain of the offset objective positive, plus
    one. The theoretical Lipschitz constants and Taylor remainders that
    define it analytically are unobservable and stay as placeholders.
    """

    sigma: float
    lipschitz_bounds: tuple | None = None
    taylor_remainders: tuple | None = None

    def __post_init__(self):
        if self.sigma < 1.0:
            raise ValueError("sigma must be >= 1")

    @property
    def gamma_star(self) -> float:
        return 1.0 / (2.0 * self.sigma - 1.0)


@dataclass
class GuaranteeReport:
    passed: bool
    monotone_ok: bool
    achieved: float
    optimum: float
    lower_bound: float
    ratio: float
    sigma: float
    gamma_star: float
    weak_bound: bool
    min_proxy_gain: float


def enumerate_trace_gains(ctx: SelectionContext, greedy: CoresetResult) -> list[float]:
    """Exact marginal gains of every candidate batch at every greedy step."""
    gains = []
    for t in range(len(greedy.selected)):
        prefix = greedy.selected[:t]
        base = ctx.g_value(prefix)
        taken = set(prefix)
        for m in range(len(ctx.partition)):
            if m in taken:
                continue
            gains.append(ctx.g_value(prefix + [m]) - base)
    return gains


def estimate_sigma(ctx: SelectionContext, greedy: CoresetResult) -> tuple[GuaranteeParams, list[float]]:
    gains = enumerate_trace_gains(ctx, greedy)
    worst = min(gains) if gains else 0.0
    sigma = 1.0 + max(0.0, -worst) / ctx.partition.batch_size
    return GuaranteeParams(sigma=sigma), gains


def verify_guarantee(
    ctx: SelectionContext,
    greedy: CoresetResult,
    oracle: OracleResult,
    params: GuaranteeParams | None = None,
) -> GuaranteeReport:
    """Check the greedy result against the weak-submodularity lower bound.

    Bound: G(greedy) >= G* - (G* + n_sel * sigma) * exp(-gamma*), with
    n_sel the number of selected points. Also checks that every enumerated
    proxy marginal gain (exact gain + batch_size * sigma) is positive, the
    observable consequence of monotonicity of the offset objective.
    """
    if params is None:
        params, gains = estimate_sigma(ctx, greedy)
    else:
        gains = enumerate_trace_gains(ctx, greedy)
    achieved = ctx.g_value(greedy.selected)
    n_sel_points = int(sum(len(ctx.partition.batches[i]) for i in greedy.selected))
    discount = math.exp(-params.gamma_star)
    lower = oracle.g_star - (oracle.g_star + n_sel_points * params.sigma) * discount
    beta = ctx.partition.batch_size
    min_proxy = min((g + beta * params.sigma for g in gains), default=math.inf)
    monotone_ok = min_proxy > 0.0
    if oracle.g_star != 0.0:
        ratio = achieved / oracle.g_star
    else:
        ratio = 1.0 if achieved == 0.0 else math.inf
    return GuaranteeReport(
        passed=bool(achieved >= lower - 1e-9 and monotone_ok),
        monotone_ok=monotone_ok,
        achieved=achieved,
        optimum=oracle.g_star,
        lower_bound=lower,
        ratio=ratio,
        sigma=params.sigma,
        gamma_star=params.gamma_star,
        weak_bound=discount > 0.9,
        min_proxy_gain=min_proxy,
    )
