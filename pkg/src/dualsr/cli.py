"""Command-line entry point: ``dualsr <subcommand>``.

Exit codes: 0 success, 2 configuration error, 3 stage failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import torch

from .checkpoint import CheckpointError, load_checkpoint, make_checkpoint, restore, save_checkpoint
from .data import load_dataset, split_train_val
from .metrics import bench_latency, cost_report, render_markdown
from .models import SpecError, build_dual, build_primal, shipped_spec
from .pipeline import DATA_ENV, PROFILES, ConfigError, ExperimentConfig, StageFailure, run_pipeline, sweep
from .pruning import PruneConfig, prune_model
from .search import ChannelBudget, SearchConfig, search
from .trainer import TrainConfig, TrainingDiverged, train

EXIT_OK, EXIT_CONFIG, EXIT_STAGE = 0, 2, 3

log = logging.getLogger("dualsr")


def _read_json(path):
    if path is None:
        return {}
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e


def _data_root(args) -> str:
    root = args.data_root or os.environ.get(DATA_ENV)
    if not root:
        raise ConfigError(f"no data root: pass --data-root or set {DATA_ENV}")
    return root


def add_data_flags(p):
    p.add_argument("--data-root", help=f"dataset folder (default: ${DATA_ENV})")
    p.add_argument("--scale", type=int, default=4, choices=(2, 4, 8))
    p.add_argument("--patch-size", type=int, help="LR patch side")
    p.add_argument("--batch-size", type=int)
    p.add_argument("--seed", type=int)


def _overrides(args, **extra) -> dict:
    d = {"patch_size": args.patch_size, "batch": args.batch_size, "seed": args.seed, **extra}
    return {k: v for k, v in d.items() if v is not None}


def cmd_train(args) -> int:
    cfg = _read_json(args.config)
    over = _overrides(args, total_iters=args.iters)
    if args.no_dual:
        over["dual_enabled"] = False
    if args.lam is not None:
        over["lambda"] = args.lam
    if args.dual_hr:
        over["dual_hr_enabled"] = True
    try:
        config = TrainConfig.from_dict({**cfg, **over})
    except (ValueError, TypeError) as e:
        raise ConfigError(str(e)) from e
    root = _data_root(args)
    train_set, val_set = load_dataset(root, "train", args.scale), load_dataset(root, "val", args.scale)
    torch.manual_seed(config.seed)
    P = build_primal(shipped_spec(args.variant, args.scale))
    D = build_dual(args.scale)
    res = train(P, D, config, train_set, val_set, out_dir=args.out)
    print(json.dumps(res.log[-1] if res.log else {"step": 0}))
    return EXIT_OK


def cmd_search(args) -> int:
    cfg = _read_json(args.config)
    over = _overrides(args, epochs=args.epochs)
    try:
        config = SearchConfig.from_dict({**cfg, **over, "ratio": args.ratio})
    except (ValueError, TypeError) as e:
        raise ConfigError(str(e)) from e
    P, D = restore(load_checkpoint(args.checkpoint))
    train_set = load_dataset(_data_root(args), "train", P.scale)
    s_train, s_val = split_train_val(train_set)
    res = search(P, D, s_train, s_val, config)
    res.budget.save(args.out)
    print(json.dumps({"widths": res.budget.widths, "params": res.budget.params_budget,
                      "achieved_ratio": res.budget.achieved_ratio}))
    return EXIT_OK


def cmd_prune(args) -> int:
    cfg = _read_json(args.config)
    over = _overrides(args, gamma=args.gamma)
    try:
        config = PruneConfig.from_dict({**cfg, **over})
    except (ValueError, TypeError) as e:
        raise ConfigError(str(e)) from e
    P, D = restore(load_checkpoint(args.checkpoint))
    budget = ChannelBudget.load(args.budget)
    P_hat, plan = prune_model(P, D, budget, load_dataset(_data_root(args), "train", P.scale), config)
    save_checkpoint(make_checkpoint(P_hat, D, 0, stage="pruned", gamma=config.gamma), args.out)
    plan.save(args.plan)
    print(json.dumps({"params": sum(p.numel() for p in P_hat.parameters()), "plan": str(args.plan)}))
    return EXIT_OK


def cmd_eval(args) -> int:
    P, _ = restore(load_checkpoint(args.checkpoint))
    pairs = load_dataset(args.data, "test", P.scale)
    if not len(pairs):
        raise ConfigError(f"no images under {args.data}")
    rep = cost_report(Path(args.checkpoint).stem, P, {Path(args.data).name: pairs})
    Path(args.report).write_text(json.dumps(rep.to_dict(), indent=2) + "\n")
    Path(args.report).with_suffix(".md").write_text(render_markdown([rep]))
    print(render_markdown([rep]))
    return EXIT_OK


def cmd_bench(args) -> int:
    P, _ = restore(load_checkpoint(args.checkpoint))
    lat = bench_latency(P, args.runs, threads=args.threads, strict=args.strict)
    print(json.dumps({"median_s": lat.median_s, "threads": lat.threads, "device": lat.device,
                      "load_avg": lat.load_avg}))
    return EXIT_OK


def _experiment(args) -> ExperimentConfig:
    d = _read_json(args.config)
    for key, value in (("profile", args.profile), ("out_dir", args.out), ("seed", args.seed),
                       ("ratios", args.ratios), ("data_root", args.data_root)):
        if value is not None:
            d[key] = value
    if "profile" not in d and not args.config:
        d["profile"] = "desk"
    return ExperimentConfig.from_dict(d)


def cmd_pipeline(args) -> int:
    reports = run_pipeline(_experiment(args))
    print(render_markdown(reports))
    return EXIT_OK


def cmd_sweep(args) -> int:
    summary = sweep(args.param, args.values, _experiment(args))
    print(json.dumps(summary, indent=2))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dualsr", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train P and D with the dual regression loss")
    p.add_argument("--config", help="JSON TrainConfig")
    p.add_argument("--variant", default="drn_tiny", choices=("drn_tiny", "drn_s_like"))
    p.add_argument("--no-dual", action="store_true", help="plain L1 training (ablation)")
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--dual-hr", action="store_true", help="add the HR cycle term")
    p.add_argument("--iters", type=int)
    p.add_argument("--out", required=True, help="output directory")
    add_data_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("search", help="search per-layer channel numbers")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--ratio", type=float, required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--config", help="JSON SearchConfig")
    p.add_argument("--out", required=True, help="budget JSON path")
    add_data_flags(p)
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("prune", help="greedy channel pruning under a budget")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--budget", required=True)
    p.add_argument("--gamma", type=float)
    p.add_argument("--config", help="JSON PruneConfig")
    p.add_argument("--out", required=True, help="pruned checkpoint path")
    p.add_argument("--plan", required=True, help="PrunePlan JSON path")
    add_data_flags(p)
    p.set_defaults(func=cmd_prune)

    p = sub.add_parser("eval", help="PSNR/SSIM and cost of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="folder with HR/ (and optional LRx{s}/)")
    p.add_argument("--report", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="CPU latency on a 96x96 LR input")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--runs", type=int, default=20)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--strict", action="store_true", help="fail if the machine is busy")
    p.set_defaults(func=cmd_bench)

    for name, func, text in (("pipeline", cmd_pipeline, "run the full compression pipeline"),
                             ("sweep", cmd_sweep, "lambda or gamma sweep")):
        p = sub.add_parser(name, help=text)
        p.add_argument("--config", help="JSON ExperimentConfig")
        p.add_argument("--profile", choices=sorted(PROFILES))
        p.add_argument("--out", help="run directory")
        p.add_argument("--seed", type=int)
        p.add_argument("--ratios", type=float, nargs="+")
        p.add_argument("--data-root")
        if name == "sweep":
            p.add_argument("--param", required=True, choices=("lambda", "gamma"))
            p.add_argument("--values", type=float, nargs="+", required=True)
        p.set_defaults(func=func)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    torch.set_num_threads(1)
    try:
        return args.func(args)
    except (ConfigError, SpecError, CheckpointError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (StageFailure, TrainingDiverged, FileNotFoundError) as e:
        print(f"stage failure: {e}", file=sys.stderr)
        return EXIT_STAGE


if __name__ == "__main__":
    sys.exit(main())
