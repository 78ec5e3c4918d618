"""Experiment orchestration: train -> search -> prune -> finetune -> eval -> bench.

Every stage reads and writes files under the run directory and appends an
entry to an append-only JSONL ledger. A stage whose config hash and input
hashes match a successful ledger entry (with intact outputs) is replayed
instead of recomputed, which makes interrupted runs resumable.
"""
from __future__ import annotations

import copy
import csv
import fcntl
import hashlib
import json
import logging
import os
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import torch

from .checkpoint import file_sha256, load_checkpoint, make_checkpoint, restore, save_checkpoint
from .data import Dataset, load_dataset, make_desk_dataset, split_train_val
from .metrics import COST_INPUT, CONVENTION, CostReport, bench_interleaved, count_cost, evaluate, render_markdown
from .models import build_dual, build_primal, shipped_spec
from .pruning import PruneConfig, prune_model
from .search import ChannelBudget, SearchConfig, search, uniform_budget
from .trainer import TrainConfig, train

log = logging.getLogger(__name__)

DATA_ENV = "DUALSR_DATA_ROOT"
STAGES = ("train", "search", "prune", "finetune", "eval", "bench")
REQUIRES = {"search": "train", "prune": "search", "finetune": "prune", "eval": "train", "bench": "train"}

PROFILES = {
    # Desk scale: a few CPU minutes per stage.
    "desk": {
        "variant": "drn_tiny", "scale": 4, "ratios": [0.3, 0.5, 0.7], "seed": 0,
        "dataset": {"n_train": 32, "n_val": 8, "train_size": 192, "val_size": 96},
        "train": {"total_iters": 2000, "batch": 16, "patch_size": 12, "lr_init": 5e-4,
                  "log_every": 200},
        "search": {"epochs": 10, "steps_per_epoch": 20, "batch": 16, "patch_size": 12,
                   "alpha_lr": 3e-3},
        "prune": {"gamma": 1.0, "probe_batches": 4, "batch": 8, "patch_size": 12},
        "finetune": {"total_iters": 500, "batch": 16, "patch_size": 12, "lr_init": 2e-4,
                     "log_every": 100},
        "latency_runs": 20,
    },
    # Published protocol on a DIV2K-style folder; needs a GPU-class budget.
    "paper-ish": {
        "variant": "drn_s_like", "scale": 4, "ratios": [0.3, 0.5, 0.7], "seed": 0,
        "train": {"total_iters": 300000, "batch": 32, "patch_size": 48, "lr_init": 1e-4,
                  "log_every": 1000, "ckpt_every": 10000},
        "search": {"epochs": 100, "batch": 16, "patch_size": 48},
        "prune": {"gamma": 1.0, "probe_batches": 16, "batch": 16, "patch_size": 48},
        "finetune": {"total_iters": 100000, "batch": 32, "patch_size": 48, "lr_init": 1e-4,
                     "log_every": 1000},
        "latency_runs": 20,
    },
}


class ConfigError(ValueError):
    """Invalid experiment configuration (CLI exit code 2)."""


class StageFailure(RuntimeError):
    """A pipeline stage raised (CLI exit code 3)."""

    def __init__(self, stage: str, cause: BaseException):
        self.stage, self.cause = stage, cause
        super().__init__(f"stage {stage!r} failed: {cause}")


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        out[k] = _merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


@dataclass
class ExperimentConfig:
    out_dir: str
    variant: str = "drn_tiny"
    scale: int = 4
    ratios: List[float] = field(default_factory=lambda: [0.3, 0.5, 0.7])
    seed: int = 0
    stages: List[str] = field(default_factory=lambda: list(STAGES))
    data_root: Optional[str] = None
    dataset: dict = field(default_factory=dict)
    eval_sets: Dict[str, str] = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    search: dict = field(default_factory=dict)
    prune: dict = field(default_factory=dict)
    finetune: dict = field(default_factory=dict)
    latency_runs: int = 20
    profile: Optional[str] = None

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        profile = d.get("profile")
        if profile is not None:
            if profile not in PROFILES:
                raise ConfigError(f"unknown profile {profile!r}; choose from {sorted(PROFILES)}")
            d = _merge(PROFILES[profile], d)
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        if "out_dir" not in d:
            raise ConfigError("out_dir is required")
        return cls(**d).validate()

    @classmethod
    def load(cls, path, **overrides) -> "ExperimentConfig":
        try:
            d = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        return cls.from_dict(_merge(d, {k: v for k, v in overrides.items() if v is not None}))

    def to_dict(self) -> dict:
        return asdict(self)

    def validate(self) -> "ExperimentConfig":
        bad = [s for s in self.stages if s not in STAGES]
        if bad:
            raise ConfigError(f"unknown stages {bad}")
        for s in self.stages:
            need = REQUIRES.get(s)
            if need and need not in self.stages:
                raise ConfigError(f"stage {s!r} requires stage {need!r}")
        for r in self.ratios:
            if not 0 <= r < 1:
                raise ConfigError(f"ratio {r} outside [0, 1)")
        try:
            shipped_spec(self.variant, self.scale)
            self.train_config(), self.finetune_config(), self.prune_config()
            for r in self.ratios:
                if r > 0:
                    self.search_config(r)
        except (ValueError, TypeError, FileNotFoundError) as e:
            raise ConfigError(str(e)) from e
        return self

    def train_config(self, **over) -> TrainConfig:
        return TrainConfig.from_dict({"seed": self.seed, **self.train, **over})

    def finetune_config(self) -> TrainConfig:
        return TrainConfig.from_dict({"seed": self.seed, "train_dual": False, **self.finetune})

    def search_config(self, ratio: float) -> SearchConfig:
        return SearchConfig.from_dict({"seed": self.seed, **self.search, "ratio": ratio})

    def prune_config(self, **over) -> PruneConfig:
        return PruneConfig.from_dict({"seed": self.seed, **self.prune, **over})


def canonical_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()


@dataclass
class RunLedgerEntry:
    stage: str
    config_hash: str
    inputs: Dict[str, str]
    outputs: Dict[str, Dict[str, str]]  # name -> {"path", "sha256"}
    metrics: dict
    wall_time: float
    status: str = "ok"
    error: Optional[str] = None


class RunLedger:
    """Append-only JSONL file; appends hold an exclusive lock."""

    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)

    def append(self, entry: RunLedgerEntry) -> None:
        line = json.dumps(asdict(entry), sort_keys=True) + "\n"
        with open(self.path, "a") as f:
            fcntl.flock(f, fcntl.LOCK_EX)
            try:
                f.write(line)
                f.flush()
                os.fsync(f.fileno())
            finally:
                fcntl.flock(f, fcntl.LOCK_UN)

    def entries(self) -> List[RunLedgerEntry]:
        if not self.path.exists():
            return []
        with open(self.path) as f:
            fcntl.flock(f, fcntl.LOCK_SH)
            try:
                lines = f.read().splitlines()
            finally:
                fcntl.flock(f, fcntl.LOCK_UN)
        return [RunLedgerEntry(**json.loads(l)) for l in lines if l.strip()]

    def completed(self, stage: str, config_hash: str) -> Optional[RunLedgerEntry]:
        """Latest successful entry for (stage, hash) whose outputs still verify."""
        root = self.path.parent
        for e in reversed(self.entries()):
            if e.stage == stage and e.config_hash == config_hash and e.status == "ok":
                if all((root / o["path"]).exists() and file_sha256(root / o["path"]) == o["sha256"]
                       for o in e.outputs.values()):
                    return e
        return None

    def verify(self) -> List[str]:
        """Paths referenced by successful entries that are missing or altered."""
        root, bad = self.path.parent, []
        for e in self.entries():
            if e.status != "ok":
                continue
            for o in e.outputs.values():
                p = root / o["path"]
                if not p.exists() or file_sha256(p) != o["sha256"]:
                    bad.append(o["path"])
        return bad


def _tag(ratio: float) -> str:
    return f"r{round(ratio * 100):02d}"


def _write_json(path: Path, obj) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    return path


class Pipeline:
    """Stage runner bound to one run directory and ledger."""

    def __init__(self, config: ExperimentConfig, ledger: Optional[RunLedger] = None):
        self.cfg = config
        self.out = Path(config.out_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        self.ledger = ledger or RunLedger(self.out / "ledger.jsonl")
        self._data: Optional[Tuple[Dataset, Dataset]] = None

    # data

    def data_root(self) -> Path:
        root = self.cfg.data_root or os.environ.get(DATA_ENV)
        if root:
            root = Path(root)
            if not root.exists() and self.cfg.profile == "desk":
                make_desk_dataset(root, seed=0, **self.cfg.dataset)
            return root
        root = self.out / "data"
        if not (root / "train").exists():
            make_desk_dataset(root, seed=0, **self.cfg.dataset)
        return root

    def datasets(self) -> Tuple[Dataset, Dataset]:
        if self._data is None:
            root = self.data_root()
            train_set = load_dataset(root, "train", self.cfg.scale)
            val_set = load_dataset(root, "val", self.cfg.scale)
            if not len(train_set):
                raise FileNotFoundError(f"no training images under {root}")
            self._data = (train_set, val_set)
        return self._data

    # ledger-backed stage execution

    def run_stage(self, stage: str, config: dict, inputs: Dict[str, Path],
                  fn: Callable[[], Tuple[Dict[str, Path], dict]]) -> RunLedgerEntry:
        input_hashes = {k: file_sha256(p) for k, p in sorted(inputs.items())}
        h = canonical_hash({"stage": stage, "config": config, "inputs": input_hashes})
        done = self.ledger.completed(stage, h)
        if done is not None:
            log.info("%s: replaying completed stage", stage)
            return done
        log.info("%s: running", stage)
        t0 = time.perf_counter()
        try:
            outputs, metrics = fn()
        except Exception as e:
            self.ledger.append(RunLedgerEntry(stage, h, input_hashes, {}, {},
                                              time.perf_counter() - t0, "failed", repr(e)))
            raise StageFailure(stage, e) from e
        outs = {k: {"path": os.path.relpath(p, self.out), "sha256": file_sha256(p)}
                for k, p in sorted(outputs.items())}
        entry = RunLedgerEntry(stage, h, input_hashes, outs, metrics, time.perf_counter() - t0)
        self.ledger.append(entry)
        return entry

    def path(self, entry: RunLedgerEntry, name: str) -> Path:
        return self.out / entry.outputs[name]["path"]

    # stages

    def train_baseline(self, tag: str = "baseline", **over) -> Path:
        cfg = self.cfg.train_config(**over)
        stage_cfg = {"variant": self.cfg.variant, "scale": self.cfg.scale,
                     "data": self.cfg.dataset, "train": cfg.to_dict()}

        def fn():
            train_set, val_set = self.datasets()
            torch.manual_seed(cfg.seed)
            P = build_primal(shipped_spec(self.cfg.variant, self.cfg.scale))
            D = build_dual(self.cfg.scale)
            res = train(P, D, cfg, train_set, val_set, out_dir=self.out / tag)
            ckpt = save_checkpoint(res.checkpoint, self.out / tag / "checkpoint.pt")
            final = res.log[-1] if res.log else {}
            return {"checkpoint": ckpt}, {"val_psnr": final.get("val_psnr"), "primal": final.get("primal")}

        return self.path(self.run_stage(f"train:{tag}", stage_cfg, {}, fn), "checkpoint")

    def search_budget(self, ckpt: Path, ratio: float, kind: str = "searched", tag: Optional[str] = None) -> Path:
        tag = tag or _tag(ratio)
        cfg = self.cfg.search_config(ratio)
        name = "budget.json" if kind == "searched" else f"budget_{kind}.json"

        def fn():
            P, D = restore(load_checkpoint(ckpt))
            if kind == "uniform":
                budget = uniform_budget(P.spec, ratio)
                hist = []
            else:
                train_set, _ = self.datasets()
                s_train, s_val = split_train_val(train_set)
                res = search(P, D, s_train, s_val, cfg)
                budget, hist = res.budget, res.history
                _write_json(self.out / tag / "alphas.json",
                            {n: a.detach().tolist() for n, a in res.state.alphas.items()})
            budget.save(self.out / tag / name)
            return ({"budget": self.out / tag / name},
                    {"widths": budget.widths, "params": budget.params_budget,
                     "achieved_ratio": budget.achieved_ratio, "repaired": len(budget.repaired),
                     "history": hist[-1:] if hist else []})

        return self.path(self.run_stage(f"search:{tag}:{kind}", {"kind": kind, "search": cfg.to_dict()},
                                        {"checkpoint": ckpt}, fn), "budget")

    def prune(self, ckpt: Path, budget_path: Path, tag: str, **over) -> Tuple[Path, Path]:
        cfg = self.cfg.prune_config(**over)

        def fn():
            train_set, _ = self.datasets()
            P, D = restore(load_checkpoint(ckpt))
            budget = ChannelBudget.load(budget_path)
            P_hat, plan = prune_model(P, D, budget, train_set, cfg)
            plan.save(self.out / tag / "plan.json")
            pruned = save_checkpoint(make_checkpoint(P_hat, D, 0, stage="pruned", gamma=cfg.gamma),
                                     self.out / tag / "pruned.pt")
            params = sum(p.numel() for p in P_hat.parameters())
            return {"checkpoint": pruned, "plan": self.out / tag / "plan.json"}, \
                {"params": params, "budget_params": budget.params_budget}

        e = self.run_stage(f"prune:{tag}", {"prune": cfg.to_dict()},
                           {"checkpoint": ckpt, "budget": budget_path}, fn)
        return self.path(e, "checkpoint"), self.path(e, "plan")

    def finetune(self, pruned: Path, tag: str) -> Path:
        cfg = self.cfg.finetune_config()

        def fn():
            train_set, val_set = self.datasets()
            P, D = restore(load_checkpoint(pruned))
            res = train(P, D, cfg, train_set, val_set, out_dir=self.out / tag / "finetune")
            out = self.out / tag / "finetuned.pt"
            (self.out / tag / "finetune" / "checkpoint.pt").replace(out)
            return {"checkpoint": out}, {"val_psnr": res.log[-1]["val_psnr"] if res.log else None}

        return self.path(self.run_stage(f"finetune:{tag}", {"finetune": cfg.to_dict()},
                                        {"checkpoint": pruned}, fn), "checkpoint")

    def compress(self, ckpt: Path, ratio: float, kind: str = "searched", gamma: Optional[float] = None,
                 tag: Optional[str] = None) -> Dict[str, Path]:
        """search (or uniform budget) -> prune -> finetune for one ratio."""
        tag = tag or _tag(ratio)
        budget = self.search_budget(ckpt, ratio, kind, tag)
        over = {} if gamma is None else {"gamma": gamma}
        sub = tag
        if kind != "searched" or gamma is not None:
            sub = f"{tag}/{kind}_g{self.cfg.prune_config(**over).gamma:g}"
        pruned, plan = self.prune(ckpt, budget, sub, **over)
        return {"budget": budget, "plan": plan, "pruned": pruned,
                "finetuned": self.finetune(pruned, sub) if "finetune" in self.cfg.stages else pruned}

    def evaluate(self, models: Dict[str, Path]) -> Dict[str, dict]:
        sets = dict(self.cfg.eval_sets)

        def fn():
            _, val_set = self.datasets()
            data = {"val": val_set}
            for name, root in sets.items():
                data[name] = load_dataset(root, "test", self.cfg.scale)
            rows = {}
            for name, path in models.items():
                P, _ = restore(load_checkpoint(path))
                params, madds = count_cost(P)
                rows[name] = {"params": params, "madds": madds,
                              "scores": {d: list(evaluate(P, pairs)) for d, pairs in data.items() if len(pairs)}}
            return {"eval": _write_json(self.out / "eval.json", rows)}, rows

        return self.run_stage("eval", {"sets": sets, "input": list(COST_INPUT)}, models, fn).metrics

    def bench(self, models: Dict[str, Path]) -> Dict[str, dict]:
        runs = self.cfg.latency_runs

        def fn():
            lats = bench_interleaved({name: restore(load_checkpoint(path))[0] for name, path in models.items()},
                                     runs)
            rows = {name: {"latency_s": lat.median_s, "threads": lat.threads, "device": lat.device,
                           "load_avg": lat.load_avg} for name, lat in lats.items()}
            return {"bench": _write_json(self.out / "bench.json", rows)}, rows

        return self.run_stage("bench", {"runs": runs}, models, fn).metrics


def run_pipeline(config: ExperimentConfig) -> List[CostReport]:
    """Run every configured stage and write report.json / report.md."""
    pipe = Pipeline(config)
    stages = set(config.stages)
    base = pipe.train_baseline()
    models = {"baseline": base}
    artifacts = {}
    for r in config.ratios:
        name = f"{config.variant}@{r:g}"
        if r == 0:
            models[name] = base
            continue
        if "search" not in stages:
            continue
        tag = _tag(r)
        budget = pipe.search_budget(base, r)
        out = {"budget": budget}
        if "prune" in stages:
            pruned, plan = pipe.prune(base, budget, tag)
            out.update(plan=plan, pruned=pruned)
            final = pipe.finetune(pruned, tag) if "finetune" in stages else pruned
            out["final"] = final
            models[name] = final
        artifacts[r] = out
    rows = pipe.evaluate(models) if "eval" in stages else {}
    lat = pipe.bench(models) if "bench" in stages else {}
    reports = []
    for name, path in models.items():
        row = rows.get(name)
        if row is None:
            P, _ = restore(load_checkpoint(path))
            params, madds = count_cost(P)
            row = {"params": params, "madds": madds, "scores": {}}
        b = lat.get(name, {})
        reports.append(CostReport(name, row["params"], row["madds"], b.get("latency_s"),
                                  {d: tuple(v) for d, v in row["scores"].items()},
                                  b.get("threads"), b.get("device")))
    _write_json(pipe.out / "report.json", {
        "convention": CONVENTION, "config": config.to_dict(),
        "artifacts": {str(r): {k: os.path.relpath(v, pipe.out) for k, v in a.items()}
                      for r, a in artifacts.items()},
        "reports": [r.to_dict() for r in reports]})
    (pipe.out / "report.md").write_text(render_markdown(reports))
    return reports


# sweeps

def _plot(rows: Sequence[Tuple[float, float]], param: str, path: Path) -> Path:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    xs, ys = zip(*rows)
    fig, ax = plt.subplots(figsize=(4, 3))
    ax.plot(xs, ys, "o-")
    if min(xs) > 0 and len(xs) > 1:
        ax.set_xscale("log")
    ax.set_xlabel(param)
    ax.set_ylabel("val PSNR (dB)")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def sweep(param: str, values: Sequence[float], base: ExperimentConfig) -> Dict[str, object]:
    """PSNR as a function of lambda (dual weight in training) or gamma (in pruning).

    Writes ``sweep_<param>.csv`` (value, psnr) and ``sweep_<param>.png``.
    A gamma sweep trains and searches once at the first nonzero ratio.
    """
    if param not in ("lambda", "gamma"):
        raise ConfigError("sweep parameter must be 'lambda' or 'gamma'")
    if not values:
        raise ConfigError("sweep needs at least one value")
    pipe = Pipeline(base)
    rows = []
    if param == "lambda":
        for v in values:
            ckpt = pipe.train_baseline(tag=f"lambda_{v:g}", lam=float(v), dual_enabled=v > 0)
            rows.append((float(v), _val_psnr(pipe, ckpt)))
    else:
        ratio = next((r for r in base.ratios if r > 0), 0.3)
        ckpt = pipe.train_baseline()
        for v in values:
            out = pipe.compress(ckpt, ratio, gamma=float(v), tag=f"gamma_{v:g}")
            rows.append((float(v), _val_psnr(pipe, out["finetuned"])))
    csv_path = pipe.out / f"sweep_{param}.csv"
    with open(csv_path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow([param, "psnr"])
        w.writerows(rows)
    png = _plot(rows, param, pipe.out / f"sweep_{param}.png")
    best = max(rows, key=lambda r: r[1])
    summary = {"param": param, "rows": rows, "best": best[0], "csv": str(csv_path), "plot": str(png)}
    if param == "gamma" and 1.0 in [r[0] for r in rows]:
        at_one = dict(rows)[1.0]
        summary["gamma1_vs_min"] = at_one - min(r[1] for r in rows)
        summary["note"] = f"gamma=1 scores {at_one:.3f} dB; best gamma {best[0]:g} scores {best[1]:.3f} dB"
    _write_json(pipe.out / f"sweep_{param}.json", summary)
    return summary


def _val_psnr(pipe: Pipeline, ckpt: Path) -> float:
    _, val_set = pipe.datasets()
    P, _ = restore(load_checkpoint(ckpt))
    return evaluate(P, val_set)[0]
