"""Joint training of the primal model P and dual model D."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .checkpoint import make_checkpoint, save_checkpoint
from .data import ImagePair, PatchBatch, sample_batch
from .metrics import evaluate

log = logging.getLogger(__name__)

LOG_COLUMNS = ("step", "lr", "primal", "dual", "total", "val_psnr")


@dataclass
class TrainConfig:
    lam: float = 0.1
    lr_init: float = 1e-4
    lr_final: float = 1e-7
    schedule: str = "cosine"
    betas: Tuple[float, float] = (0.9, 0.99)
    batch: int = 32
    patch_size: int = 48
    total_iters: int = 1000
    seed: int = 0
    dual_enabled: bool = True
    dual_hr_enabled: bool = False
    train_dual: bool = True  # False keeps D fixed, e.g. when finetuning a compressed P
    log_every: int = 100
    ckpt_every: int = 0

    def __post_init__(self):
        self.betas = tuple(self.betas)
        self.validate()

    def validate(self) -> "TrainConfig":
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if self.lr_final > self.lr_init:
            raise ValueError("lr_final must not exceed lr_init")
        if self.total_iters < 0:
            raise ValueError("total_iters must be >= 0")
        if self.schedule != "cosine":
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if self.batch < 1 or self.patch_size < 1:
            raise ValueError("batch and patch_size must be positive")
        return self

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "lambda" in d:
            d["lam"] = d.pop("lambda")
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lambda"] = d.pop("lam")
        d["betas"] = list(self.betas)
        return d


@dataclass
class LossBreakdown:
    """Primal and dual L1 terms; ``total`` = primal + lam * dual."""
    primal: torch.Tensor
    dual: torch.Tensor
    lam: float

    @property
    def total(self) -> torch.Tensor:
        if self.lam == 0:
            return self.primal
        return self.primal + self.lam * self.dual

    def floats(self) -> Tuple[float, float, float]:
        p, d = float(self.primal.detach()), float(self.dual.detach())
        return p, d, p + self.lam * d


def _as_tensors(batch, dtype=None):
    if isinstance(batch, PatchBatch):
        return batch.tensors(dtype)
    lr, hr = batch
    return lr, hr


def _check(out: torch.Tensor, ref: torch.Tensor, what: str):
    if out.shape != ref.shape:
        raise ValueError(f"{what}: got shape {tuple(out.shape)}, expected {tuple(ref.shape)}")


def dual_regression_loss(P: Callable, D: Callable, batch, lam: float = 0.1) -> LossBreakdown:
    """L1(P(x), y) + lam * L1(D(P(x)), x), each averaged over the batch."""
    lr, hr = _as_tensors(batch)
    sr = P(lr)
    _check(sr, hr, "P(x)")
    primal = F.l1_loss(sr, hr)
    if lam == 0:
        with torch.no_grad():
            back = D(sr)
    else:
        back = D(sr)
    _check(back, lr, "D(P(x))")
    return LossBreakdown(primal, F.l1_loss(back, lr), lam)


def dual_hr_loss(P: Callable, D: Callable, batch, lam: float = 0.1,
                 enabled: bool = True) -> LossBreakdown:
    """Dual regression plus an HR cycle term L1(P(D(y)), y) folded into ``dual``."""
    if not enabled:
        return dual_regression_loss(P, D, batch, lam)
    lr, hr = _as_tensors(batch)
    base = dual_regression_loss(P, D, (lr, hr), lam)
    down = D(hr)
    _check(down, lr, "D(y)")
    cycle = P(down)
    _check(cycle, hr, "P(D(y))")
    return LossBreakdown(base.primal, base.dual + F.l1_loss(cycle, hr), lam)


def cosine_lr(step: int, total: int, lr_init: float, lr_final: float) -> float:
    if total <= 0:
        return lr_init
    return lr_final + (lr_init - lr_final) * (1 + math.cos(math.pi * step / total)) / 2


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, checkpoint: Optional[Path]):
        self.step, self.checkpoint = step, checkpoint
        super().__init__(f"non-finite loss at step {step}; diagnostic checkpoint: {checkpoint}")


@dataclass
class TrainResult:
    checkpoint: dict
    log: List[dict] = field(default_factory=list)


def seed_everything(seed: int) -> None:
    torch.manual_seed(seed)
    np.random.seed(seed % 2 ** 32)
    torch.use_deterministic_algorithms(True)


def write_log(rows: Sequence[dict], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, LOG_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow({k: ("" if r.get(k) is None else r[k]) for k in LOG_COLUMNS})


def train(P: nn.Module, D: nn.Module, config: TrainConfig, data: Sequence[ImagePair],
          val: Optional[Sequence[ImagePair]] = None, out_dir=None) -> TrainResult:
    """Adam on P (and D when dual learning is on) under a cosine schedule.

    Logs a LossBreakdown row every ``log_every`` steps and at the last step.
    A non-finite loss writes ``diverged.pt`` (when ``out_dir`` is set) and raises.
    """
    config.validate()
    out_dir = Path(out_dir) if out_dir is not None else None
    if config.total_iters == 0:
        return TrainResult(make_checkpoint(P, D, 0, train=config.to_dict()), [])
    if not len(data):
        raise ValueError("training data is empty")
    seed_everything(config.seed)
    rng = np.random.default_rng(config.seed)
    lam = config.lam if config.dual_enabled else 0.0
    params = list(P.parameters())
    if config.dual_enabled and config.train_dual:
        params += list(D.parameters())
    else:
        for p in D.parameters():
            p.requires_grad_(False)
    opt = torch.optim.Adam(params, lr=config.lr_init, betas=config.betas)
    dtype = next(P.parameters()).dtype
    rows = []
    P.train()
    D.train()
    for step in range(config.total_iters):
        lr_now = cosine_lr(step, config.total_iters, config.lr_init, config.lr_final)
        for g in opt.param_groups:
            g["lr"] = lr_now
        batch = sample_batch(data, config.batch, rng, config.patch_size).tensors(dtype)
        loss = dual_hr_loss(P, D, batch, lam, enabled=config.dual_hr_enabled)
        total = loss.total
        if not torch.isfinite(total):
            path = None
            if out_dir is not None:
                path = save_checkpoint(make_checkpoint(P, D, step, diverged=True), out_dir / "diverged.pt")
            raise TrainingDiverged(step, path)
        opt.zero_grad(set_to_none=True)
        total.backward()
        opt.step()
        last = step == config.total_iters - 1
        if (step + 1) % max(1, config.log_every) == 0 or last:
            primal, dual, tot = loss.floats()
            row = {"step": step + 1, "lr": lr_now, "primal": primal, "dual": dual, "total": tot,
                   "val_psnr": None}
            if val is not None and len(val):
                row["val_psnr"] = evaluate(P, val)[0]
                P.train()
            rows.append(row)
            log.info("step %d lr %.3g primal %.5f dual %.5f total %.5f val %s", *(
                row[k] for k in LOG_COLUMNS))
        if out_dir is not None and config.ckpt_every and (step + 1) % config.ckpt_every == 0 and not last:
            save_checkpoint(make_checkpoint(P, D, step + 1, train=config.to_dict()),
                            out_dir / "checkpoint.pt")
    for p in D.parameters():
        p.requires_grad_(True)
    ckpt = make_checkpoint(P, D, config.total_iters, train=config.to_dict())
    if out_dir is not None:
        save_checkpoint(ckpt, out_dir / "checkpoint.pt")
        write_log(rows, out_dir / "log.csv")
    return TrainResult(ckpt, rows)
