"""Command-line surface: dataset generation, pretraining, selection rounds,
the exhaustive-oracle guarantee check, run-directory analysis, and linear
probing of checkpoints.

Exit codes: 0 success, 1 usage error, 2 runtime error.
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from .analyze import imbalance_ratio, linear_probe, mmd, selection_frequency
from .config import ConfigError, ExperimentConfig, load_config, resolved_text
from .data import DataError, generate, load_dataset, save_dataset, split_validation, DatasetSpec
from .divergence import ValidationSet, rd_set
from .model import Model, load_checkpoint
from .rng import philox_rng
from .selection import (
    MinibatchPartition,
    SelectionError,
    build_context,
    estimate_sigma,
    exhaustive_oracle,
    random_select,
    rcs_greedy,
    read_coreset_ids,
    verify_guarantee,
    write_coreset_csv,
)
from .trainer import pretrain, prepare_run, speedup_report


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="rcs", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic dataset file")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)

    p = sub.add_parser("pretrain", help="run the pretraining loop")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)

    p = sub.add_parser("select", help="run one selection round and dump the coreset")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--method", choices=("rcs", "random"))
    p.add_argument("--k", type=float)
    p.add_argument("--checkpoint")

    p = sub.add_parser("oracle", help="exhaustive search plus guarantee check")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--checkpoint")
    p.add_argument("--cap", type=int, default=10000)

    p = sub.add_parser("analyze", help="recompute metrics from a run directory")
    p.add_argument("--run", required=True)
    p.add_argument("--out")

    p = sub.add_parser("probe", help="linear-probe a checkpoint on labeled data")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--seed", type=int)

    return parser


def _config_for(args) -> ExperimentConfig:
    overrides: dict[str, str] = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = str(args.seed)
    if getattr(args, "method", None) is not None:
        overrides["selection.method"] = args.method
    if getattr(args, "k", None) is not None:
        overrides["train.fraction"] = repr(args.k)
    return load_config(args.config, overrides=overrides)


def _cmd_gen(args) -> int:
    cfg = _config_for(args)
    ds = generate(
        DatasetSpec(
            n=cfg.dataset_n,
            dim=cfg.dataset_dim,
            classes=cfg.dataset_classes,
            mean_scale=cfg.dataset_mean_scale,
            cov_scale=cfg.dataset_cov_scale,
            seed=cfg.resolved_dataset_seed(),
        )
    )
    save_dataset(args.out, ds)
    print(f"wrote {ds.n} x {ds.dim} dataset ({cfg.dataset_classes} classes) to {args.out}")
    return 0


def _cmd_pretrain(args) -> int:
    cfg = _config_for(args)
    result = pretrain(cfg, out_dir=args.out)
    report = speedup_report(result)
    final = result.records[-1]
    print(f"finished {cfg.train_epochs} epochs in {report.wall_time:.2f}s")
    print(f"final epoch loss {final.loss_mean:.6f}, validation divergence {final.rd_u:.6f}")
    print(
        f"gradient evaluations: actual {report.actual_evals}, "
        f"closed-form {report.predicted_evals}, reselections {report.reselections}"
    )
    return 0


def _cmd_select(args) -> int:
    cfg = _config_for(args)
    ds, validation, partition, model = prepare_run(cfg)
    if args.checkpoint:
        model = load_checkpoint(args.checkpoint)
    if cfg.selection_method == "random":
        result = random_select(partition, cfg.train_fraction, cfg.seed)
    else:
        scfg = cfg.selection_config()
        labels = ds.y if scfg.objective in ("sat", "trades") else None
        result = rcs_greedy(model, ds.x, partition, validation, scfg, labels=labels)
    write_coreset_csv(result, args.out)
    print(
        f"selected {len(result.selected)} of {len(partition)} batches "
        f"({result.grad_evals} gradient evaluations) -> {args.out}"
    )
    print("batches:", ",".join(str(i) for i in result.selected))
    return 0


def _cmd_oracle(args) -> int:
    cfg = _config_for(args)
    ds, validation, partition, model = prepare_run(cfg)
    if args.checkpoint:
        model = load_checkpoint(args.checkpoint)
    scfg = cfg.selection_config()
    labels = ds.y if scfg.objective in ("sat", "trades") else None
    ctx = build_context(model, ds.x, partition, validation, scfg, labels=labels)
    greedy = rcs_greedy(model, ds.x, partition, validation, scfg, labels=labels, _ctx=ctx)
    oracle = exhaustive_oracle(
        model, ds.x, partition, validation, scfg, labels=labels, cap=args.cap, _ctx=ctx
    )
    params, _ = estimate_sigma(ctx, greedy)
    report = verify_guarantee(ctx, greedy, oracle, params=params)
    print(f"batches {len(partition)}, budget {oracle.budget}, subsets evaluated {oracle.evaluations}")
    print(f"greedy objective   {report.achieved!r}")
    print(f"optimal objective  {report.optimum!r}")
    print(f"guarantee bound    {report.lower_bound!r}")
    print(f"sigma {report.sigma!r}, gamma* {report.gamma_star!r}, weak_bound {report.weak_bound}")
    print(f"greedy/optimal ratio {report.ratio!r}")
    print("PASS" if report.passed else "FAIL")
    return 0


def _cmd_analyze(args) -> int:
    run = Path(args.run)
    out = Path(args.out) if args.out else run
    out.mkdir(parents=True, exist_ok=True)
    cfg = load_config(run / "config.snapshot")
    ds, validation, partition, _ = prepare_run(cfg)

    coreset_files = sorted(run.glob("coreset_*.csv"), key=lambda p: int(p.stem.split("_")[1]))
    rounds = [(int(p.stem.split("_")[1]), read_coreset_ids(p)) for p in coreset_files]

    lines = ["epoch,mmd,imbalance_ratio,missing_classes"]
    for epoch, ids in rounds:
        points = np.concatenate([partition.batches[i] for i in ids])
        m = mmd(ds.x[points], ds.x[partition.point_ids()])
        if ds.y is not None:
            rep = imbalance_ratio(ds.y[points], n_classes=int(ds.y.max()) + 1)
            ratio, miss = rep.ratio, len(rep.missing)
        else:
            ratio, miss = float("nan"), 0
        lines.append(f"{epoch},{m!r},{ratio!r},{miss}")
    (out / "analysis.csv").write_text("\n".join(lines) + "\n")

    if rounds:
        counts = np.zeros(partition.point_ids().size, dtype=np.intp)
        ids_sorted = partition.point_ids()
        pos = {int(p): i for i, p in enumerate(ids_sorted)}
        for _, ids in rounds:
            for bid in ids:
                for p in partition.batches[bid]:
                    counts[pos[int(p)]] += 1
        freq_lines = ["point_id,count"] + [
            f"{int(p)},{int(c)}" for p, c in zip(ids_sorted, counts)
        ]
        (out / "frequency.csv").write_text("\n".join(freq_lines) + "\n")

    # recompute the final-epoch validation divergence from the checkpoint
    ckpt = run / "model_final.rcsm"
    if ckpt.exists():
        model = load_checkpoint(ckpt)
        recomputed = rd_set(
            model, validation, cfg.selection_attack(), distance=cfg.distance(), branch=cfg.rd_branch
        )
        logged = _read_final_rd(run / "epochs.csv")
        diff = abs(recomputed - logged)
        (out / "rd_check.csv").write_text(
            "logged,recomputed,abs_diff\n" + f"{logged!r},{recomputed!r},{diff!r}\n"
        )
        print(f"validation divergence: logged {logged!r}, recomputed {recomputed!r}")
    print(f"analysis written to {out}")
    return 0


def _read_final_rd(path) -> float:
    with open(path) as fh:
        rows = fh.read().strip().split("\n")
    header = rows[0].split(",")
    col = header.index("rd_u")
    return float(rows[-1].split(",")[col])


def _cmd_probe(args) -> int:
    cfg = _config_for(args)
    ds = (
        load_dataset(cfg.dataset_path)
        if cfg.dataset_path
        else generate(
            DatasetSpec(
                n=cfg.dataset_n,
                dim=cfg.dataset_dim,
                classes=cfg.dataset_classes,
                mean_scale=cfg.dataset_mean_scale,
                cov_scale=cfg.dataset_cov_scale,
                seed=cfg.resolved_dataset_seed(),
            )
        )
    )
    if ds.y is None:
        raise DataError("probe needs a labeled dataset")
    model = load_checkpoint(args.checkpoint)
    train_acc, test_acc = linear_probe(model, ds.x, ds.y, seed=cfg.seed)
    print(f"probe accuracy: train {train_acc:.4f}, test {test_acc:.4f}")
    return 0


_COMMANDS = {
    "gen": _cmd_gen,
    "pretrain": _cmd_pretrain,
    "select": _cmd_select,
    "oracle": _cmd_oracle,
    "analyze": _cmd_analyze,
    "probe": _cmd_probe,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    try:
        return _COMMANDS[args.command](args)
    except (ConfigError, UsageError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (DataError, SelectionError, ValueError, OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
