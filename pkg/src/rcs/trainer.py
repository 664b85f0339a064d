"""Efficient robust pretraining: warmup on the full set, periodic coreset
reselection on a parameter snapshot, minibatch SGD on the current coreset.

Reselection fires at every epoch e with e % interval == 0 and e >= warmup.
Gradient-evaluation accounting counts one evaluation per training step, one
per batch during selection precompute, and one per greedy iteration for the
validation gradient; random selection costs zero evaluations.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Tape
from .config import ConfigError, ExperimentConfig, resolved_text
from .data import Dataset, DataError, generate, load_dataset, split_validation, DatasetSpec
from .divergence import ValidationSet, rd_set
from .losses import acl_loss, augment_batch, dynacl_schedule, sat_loss, trades_loss
from .model import Model, save_checkpoint
from .rng import philox_rng
from .selection import (
    CoresetResult,
    MinibatchPartition,
    chunked_select,
    random_select,
    rcs_greedy,
    write_coreset_csv,
)

EPOCHS_CSV_HEADER = "epoch,loss_mean,rd_u,train_steps,selection_grad_evals,reselected,coreset_epoch"


@dataclass(frozen=True)
class TrainSchedule:
    epochs: int
    warmup: int
    interval: int
    fraction: float
    lr: float
    lr_schedule: str = "cosine"
    momentum: float = 0.0
    selection_lr: float = 0.01

    def __post_init__(self):
        if not 0 <= self.warmup <= self.epochs:
            raise ValueError("warmup must lie in [0, epochs]")
        if self.interval < 1:
            raise ValueError("interval must be >= 1")
        if not 0 < self.fraction <= 1:
            raise ValueError("fraction must lie in (0, 1]")

    def reselect_at(self, epoch: int) -> bool:
        return epoch % self.interval == 0 and epoch >= self.warmup

    def reselection_epochs(self) -> list[int]:
        return [e for e in range(self.epochs) if self.reselect_at(e)]

    def lr_at(self, epoch: int) -> float:
        if self.lr_schedule == "constant":
            return self.lr
        return self.lr * 0.5 * (1.0 + math.cos(math.pi * epoch / self.epochs))


@dataclass
class EpochRecord:
    epoch: int
    loss_mean: float
    rd_u: float
    train_steps: int
    selection_evals: int
    reselected: bool
    coreset_epoch: int
    consumed: list[int] = field(default_factory=list, repr=False)


@dataclass
class RunResult:
    config: ExperimentConfig
    model: Model
    records: list[EpochRecord]
    coresets: dict[int, CoresetResult]
    partition: MinibatchPartition
    validation: ValidationSet
    dataset: Dataset
    wall_time: float


class SGD:
    """Plain SGD with optional momentum on the model's parameter list."""

    def __init__(self, params, momentum: float = 0.0):
        self.params = params
        self.momentum = momentum
        self.velocity = [np.zeros_like(p.data) for p in params]

    def step(self, lr: float) -> None:
        for p, v in zip(self.params, self.velocity):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            v *= self.momentum
            v += g
            p.data = p.data - lr * v


def _load_or_generate(cfg: ExperimentConfig) -> Dataset:
    if cfg.dataset_path:
        return load_dataset(cfg.dataset_path)
    return generate(
        DatasetSpec(
            n=cfg.dataset_n,
            dim=cfg.dataset_dim,
            classes=cfg.dataset_classes,
            mean_scale=cfg.dataset_mean_scale,
            cov_scale=cfg.dataset_cov_scale,
            seed=cfg.resolved_dataset_seed(),
        )
    )


def prepare_run(cfg: ExperimentConfig):
    """Dataset, validation split, partition, and model for one run."""
    ds = _load_or_generate(cfg)
    if cfg.train_objective in ("sat", "trades") and ds.y is None:
        raise DataError("supervised objectives need a labeled dataset")
    train_idx, val_idx = split_validation(
        ds.n, cfg.validation_fraction, cfg.resolved_dataset_seed()
    )
    validation = ValidationSet(points=ds.x[val_idx], indices=val_idx, note="held-out fraction")
    partition_rng = philox_rng(cfg.seed, "partition") if cfg.train_partition_shuffle else None
    partition = MinibatchPartition.create(train_idx, cfg.train_batch_size, rng=partition_rng)
    model = Model(cfg.encoder_config())
    return ds, validation, partition, model


def _select(cfg, model, ds, partition, validation, omega, strength, epoch) -> CoresetResult:
    """One selection round on a snapshot; the live model is never touched."""
    scfg = cfg.selection_config(omega=omega, aug_strength=strength)
    if cfg.selection_method == "random":
        return random_select(partition, cfg.train_fraction, cfg.seed, label=epoch)
    labels = ds.y if scfg.objective in ("sat", "trades") else None
    if scfg.chunk_size:
        return chunked_select(
            model, ds.x, partition, validation, scfg, labels=labels, chunk_size=scfg.chunk_size
        )
    return rcs_greedy(model, ds.x, partition, validation, scfg, labels=labels)


def pretrain(cfg: ExperimentConfig, out_dir=None) -> RunResult:
    """Run the full pretraining loop for the configured objective."""
    start = time.perf_counter()
    cfg.validate()
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.snapshot").write_text(resolved_text(cfg))

    ds, validation, partition, model = prepare_run(cfg)
    schedule = TrainSchedule(
        epochs=cfg.train_epochs,
        warmup=cfg.warmup_epochs(),
        interval=cfg.train_interval,
        fraction=cfg.train_fraction,
        lr=cfg.train_lr,
        lr_schedule=cfg.train_lr_schedule,
        momentum=cfg.train_momentum,
        selection_lr=cfg.selection_lr,
    )
    params = model.parameters()
    opt = SGD(params, momentum=schedule.momentum)
    attack_train = cfg.train_attack()
    objective = cfg.train_objective
    contrastive = objective in ("acl", "dynacl")

    current = list(range(len(partition)))  # start from the full training set
    coreset_epoch = -1
    records: list[EpochRecord] = []
    coresets: dict[int, CoresetResult] = {}

    for e in range(schedule.epochs):
        if objective == "dynacl":
            strength, omega = dynacl_schedule(
                e, schedule.epochs, cfg.dynacl_period, cfg.dynacl_rate
            )
        else:
            strength, omega = cfg.train_aug_strength, cfg.train_omega

        selection_evals = 0
        reselected = schedule.reselect_at(e)
        if reselected:
            result = _select(cfg, model, ds, partition, validation, omega, strength, e)
            current = list(result.selected)
            coresets[e] = result
            coreset_epoch = e
            selection_evals = result.grad_evals
            if out is not None:
                write_coreset_csv(result, out / f"coreset_{e}.csv")

        order = philox_rng(cfg.seed, "order", e).permutation(np.asarray(current, dtype=np.intp))
        aug_rng = philox_rng(cfg.seed, "aug", e)
        lr = schedule.lr_at(e)
        losses = []
        consumed: list[int] = []
        for bid in order:
            idx = partition.batches[bid]
            xb = ds.x[idx]
            model.zero_grad()
            with Tape() as tape:
                if contrastive:
                    batch = augment_batch(xb, strength, aug_rng)
                    loss = acl_loss(
                        model,
                        batch,
                        omega,
                        attack_train,
                        cfg.train_temperature,
                        reduction="mean",
                        update_stats=True,
                        rng=aug_rng,
                    )
                elif objective == "sat":
                    loss = sat_loss(
                        model, xb, ds.y[idx], attack_train, reduction="mean", update_stats=True
                    )
                else:
                    loss = trades_loss(
                        model,
                        xb,
                        ds.y[idx],
                        cfg.trades_c,
                        attack_train,
                        reduction="mean",
                        update_stats=True,
                    )
                tape.backward(loss, wrt=params)
            opt.step(lr)
            model.zero_grad()
            losses.append(loss.item())
            consumed.append(int(bid))

        rd_u = rd_set(
            model,
            validation,
            cfg.selection_attack(),
            distance=cfg.distance(),
            branch=cfg.rd_branch,
        )
        records.append(
            EpochRecord(
                epoch=e,
                loss_mean=float(np.mean(losses)) if losses else 0.0,
                rd_u=float(rd_u),
                train_steps=len(consumed),
                selection_evals=selection_evals,
                reselected=reselected,
                coreset_epoch=coreset_epoch,
                consumed=consumed,
            )
        )

    wall = time.perf_counter() - start
    result = RunResult(
        config=cfg,
        model=model,
        records=records,
        coresets=coresets,
        partition=partition,
        validation=validation,
        dataset=ds,
        wall_time=wall,
    )
    if out is not None:
        write_epochs_csv(records, out / "epochs.csv")
        save_checkpoint(out / "model_final.rcsm", model)
    return result


def pretrain_acl(cfg: ExperimentConfig, out_dir=None) -> RunResult:
    if cfg.train_objective not in ("acl", "dynacl"):
        raise ConfigError("pretrain_acl needs train.objective acl or dynacl")
    return pretrain(cfg, out_dir=out_dir)


def pretrain_supervised(cfg: ExperimentConfig, method: str | None = None, out_dir=None) -> RunResult:
    if method is not None:
        if method not in ("sat", "trades"):
            raise ConfigError("supervised method must be sat or trades")
        cfg.train_objective = method
    if cfg.train_objective not in ("sat", "trades"):
        raise ConfigError("pretrain_supervised needs train.objective sat or trades")
    return pretrain(cfg, out_dir=out_dir)


def write_epochs_csv(records: list[EpochRecord], path) -> None:
    lines = [EPOCHS_CSV_HEADER]
    for r in records:
        lines.append(
            f"{r.epoch},{r.loss_mean!r},{r.rd_u!r},{r.train_steps},"
            f"{r.selection_evals},{int(r.reselected)},{r.coreset_epoch}"
        )
    with open(path, "w", newline="") as fh:
        fh.write("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# cost accounting
# ---------------------------------------------------------------------------


@dataclass
class SpeedupReport:
    wall_time: float
    actual_evals: int
    predicted_evals: int
    matches: bool
    reselections: int
    mismatches: list[tuple[int, int, int]]  # (epoch, predicted, actual)


def predicted_grad_evals(
    epochs: int,
    warmup: int,
    interval: int,
    fraction: float,
    n_points: int,
    batch_size: int,
    method: str = "rcs",
) -> int:
    """Closed-form gradient-evaluation total.

    warmup * ceil(N/b) training steps, (epochs - warmup) * floor(k*N/b)
    coreset steps, plus ceil(N/b) + floor(k*N/b) per reselection for the
    greedy method. Exact versus actual counters whenever the first
    reselection fires at the warmup boundary (warmup % interval == 0).
    """
    full = math.ceil(n_points / batch_size)
    core = math.floor(fraction * n_points / batch_size)
    reselections = len([e for e in range(epochs) if e % interval == 0 and e >= warmup])
    selection = reselections * (full + core) if method == "rcs" else 0
    return warmup * full + (epochs - warmup) * core + selection


def speedup_report(result: RunResult) -> SpeedupReport:
    cfg = result.config
    n = result.partition.n_points
    beta = result.partition.batch_size
    warmup = cfg.warmup_epochs()
    full = math.ceil(n / beta)
    core = math.floor(cfg.train_fraction * n / beta)
    is_rcs = cfg.selection_method == "rcs"

    mismatches = []
    for r in result.records:
        pred_train = full if r.epoch < warmup else core
        pred_sel = (full + core) if (r.reselected and is_rcs) else 0
        actual = r.train_steps + r.selection_evals
        if pred_train + pred_sel != actual:
            mismatches.append((r.epoch, pred_train + pred_sel, actual))
    predicted = predicted_grad_evals(
        cfg.train_epochs,
        warmup,
        cfg.train_interval,
        cfg.train_fraction,
        n,
        beta,
        method=cfg.selection_method,
    )
    actual_total = sum(r.train_steps + r.selection_evals for r in result.records)
    return SpeedupReport(
        wall_time=result.wall_time,
        actual_evals=actual_total,
        predicted_evals=predicted,
        matches=predicted == actual_total,
        reselections=sum(1 for r in result.records if r.reselected),
        mismatches=mismatches,
    )
