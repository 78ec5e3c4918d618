"""Differentiable channel-number search under the dual regression loss.

Each prunable layer gets a vector alpha over width factors. During search the
layer output is the softmax(alpha)-weighted sum of the branches that keep the
first c^(v) channels. Alpha steps on validation batches alternate with weight
steps on training batches, then every layer keeps the argmax factor.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .data import ImagePair, sample_batch
from .models import NetworkSpec, SRNet, spec_param_count, truncate
from .trainer import dual_regression_loss, seed_everything

log = logging.getLogger(__name__)

FACTORS = (0.5, 0.6, 0.7, 0.8, 0.9, 1.0)


class BudgetError(RuntimeError):
    """No factor assignment satisfies the parameter gate."""


def _frac(x) -> Fraction:
    return Fraction(str(x)) if isinstance(x, float) else Fraction(x)


def round_half_up(x: Fraction) -> int:
    return math.floor(x + Fraction(1, 2))


def scaled_channels(c: int, ratio, factor) -> int:
    """round(c * (1 - ratio) * factor), halves rounded up, at least 1 (exact arithmetic)."""
    return max(1, round_half_up(c * (1 - _frac(ratio)) * _frac(factor)))


def candidate_channels(c: int, ratio, factors: Sequence[float] = FACTORS) -> List[int]:
    return [scaled_channels(c, ratio, v) for v in factors]


def search_hyperparams() -> dict:
    """Defaults: zero-initialised alphas, Adam(3e-4, (0.9, 0.999)), 100 epochs of batch 16."""
    return {"alpha_init": 0.0, "lr": 3e-4, "betas": (0.9, 0.999), "epochs": 100, "batch": 16}


def width_gate(alpha: torch.Tensor, candidates: Sequence[int], width: int) -> torch.Tensor:
    """Per-channel weight of the softmax mixture of first-c^(v) branches.

    Channel k survives in every branch with c^(v) > k, so its weight is
    1 - sum of softmax weights of branches with c^(v) <= k. Channels kept by
    every branch get exactly 1.
    """
    w = torch.softmax(alpha, dim=0)
    cand = torch.as_tensor(list(candidates), device=alpha.device)
    k = torch.arange(width, device=alpha.device)
    dropped = (cand[None, :] <= k[:, None]).to(w.dtype)
    return 1 - dropped @ w


def relaxed_forward(x: torch.Tensor, weight: torch.Tensor, bias: Optional[torch.Tensor],
                    alpha: torch.Tensor, candidates: Sequence[int], stride: int = 1,
                    padding: int = 1) -> torch.Tensor:
    """Softmax(alpha)-weighted sum of convolutions keeping the first c^(v) filters.

    Narrow branches are zero-padded to the full output width before summing.
    """
    if not torch.isfinite(alpha).all():
        raise ValueError("alpha must be finite")
    if len(candidates) != alpha.numel():
        raise ValueError("one candidate width per alpha entry")
    y = F.conv2d(x, weight, bias, stride, padding)
    return y * width_gate(alpha, candidates, weight.shape[0]).view(1, -1, 1, 1)


@dataclass
class SearchState:
    """Per-layer alphas over ``factors`` for a target ratio."""
    ratio: float
    channels: Dict[str, int]
    factors: Tuple[float, ...] = FACTORS
    alphas: Dict[str, torch.Tensor] = field(default_factory=dict)

    def __post_init__(self):
        if not 0 < self.ratio < 1:
            raise ValueError("ratio must lie in (0, 1)")
        for name in self.channels:
            if name not in self.alphas:
                self.alphas[name] = torch.zeros(len(self.factors), requires_grad=True)
            if self.alphas[name].numel() != len(self.factors):
                raise ValueError(f"alpha for {name!r} needs {len(self.factors)} entries")

    @classmethod
    def for_spec(cls, spec: NetworkSpec, ratio: float, factors=FACTORS) -> "SearchState":
        return cls(ratio, spec.widths(), tuple(factors))

    def candidates(self, name: str) -> List[int]:
        return candidate_channels(self.channels[name], self.ratio, self.factors)

    def weights(self, name: str) -> torch.Tensor:
        return torch.softmax(self.alphas[name], dim=0)

    def parameters(self) -> List[torch.Tensor]:
        return list(self.alphas.values())


class SearchSupernet(nn.Module):
    """P truncated to its widest branch, with every site gated by its alpha mixture."""

    def __init__(self, P: SRNet, state: SearchState):
        super().__init__()
        widest = {n: max(state.candidates(n)) for n in state.channels}
        self.net = truncate(P, widest)
        self.state = state

    def forward(self, x):
        for name, site in self.net.sites().items():
            site.producer.out_gate = width_gate(
                self.state.alphas[name], self.state.candidates(name), site.width)
        return self.net(x)


@dataclass
class BudgetEntry:
    layer: str
    c: int
    v: float
    c_hat: int


@dataclass
class ChannelBudget:
    ratio: float
    entries: List[BudgetEntry]
    params_original: int
    params_budget: int
    repaired: List[str] = field(default_factory=list)
    gated: bool = True

    @property
    def widths(self) -> Dict[str, int]:
        return {e.layer: e.c_hat for e in self.entries}

    @property
    def achieved_ratio(self) -> float:
        """Fraction of parameters removed."""
        return 1 - self.params_budget / self.params_original

    def satisfies_gate(self) -> bool:
        return budget_gate(self.params_budget, self.params_original, self.ratio)

    def to_dict(self) -> dict:
        return {"format": "dualsr-budget/1", "ratio": self.ratio,
                "params_original": self.params_original, "params_budget": self.params_budget,
                "achieved_ratio": self.achieved_ratio, "repaired": self.repaired,
                "gated": self.gated, "layers": [asdict(e) for e in self.entries]}

    @classmethod
    def from_dict(cls, d: dict) -> "ChannelBudget":
        return cls(d["ratio"], [BudgetEntry(**e) for e in d["layers"]], d["params_original"],
                   d["params_budget"], list(d.get("repaired", [])), d.get("gated", True))

    def save(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "ChannelBudget":
        return cls.from_dict(json.loads(Path(path).read_text()))


def budget_gate(params_new: int, params_orig: int, ratio) -> bool:
    """psi(P_hat) <= (1 - r) psi(P), evaluated exactly."""
    return params_new <= (1 - _frac(ratio)) * params_orig


def _site_params(spec: NetworkSpec, name: str) -> int:
    l = spec.layer(name)
    if l.kind == "conv3x3":
        nxt = spec.layers[spec.layers.index(l) + 1]
        return 9 * l.in_channels * l.out_channels + l.out_channels + 9 * l.out_channels * nxt.out_channels
    return 9 * l.in_channels * l.mid_channels + l.mid_channels + 9 * l.mid_channels * l.out_channels


def decode_budget(spec: NetworkSpec, alphas: Mapping[str, Sequence[float]], ratio: float,
                  factors: Sequence[float] = FACTORS, repair: bool = True) -> ChannelBudget:
    """Argmax factor per layer (ties -> smallest factor), then the parameter gate.

    If rounding leaves the gate violated, the layer holding the most
    parameters steps down one factor at a time until it holds.
    """
    factors = tuple(factors)
    order = sorted(range(len(factors)), key=lambda i: factors[i])
    choice = {}
    for l in spec.prunable_layers:
        a = np.asarray(torch.as_tensor(alphas[l.name]).detach().cpu(), dtype=np.float64)
        best = max(a)
        choice[l.name] = next(i for i in order if a[i] == best)
    psi = spec_param_count(spec)

    def widths():
        return {n: scaled_channels(spec.layer(n).width, ratio, factors[i]) for n, i in choice.items()}

    repaired = []
    while True:
        new_spec = spec.with_widths(widths())
        psi_new = spec_param_count(new_spec)
        if budget_gate(psi_new, psi, ratio):
            break
        if not repair:
            raise BudgetError(f"decoded budget has {psi_new} params > (1-{ratio})*{psi}")
        movable = [n for n, i in choice.items() if order.index(i) > 0]
        if not movable:
            raise BudgetError(f"ratio {ratio} unreachable even with the smallest factor everywhere")
        name = max(movable, key=lambda n: _site_params(new_spec, n))
        choice[name] = order[order.index(choice[name]) - 1]
        repaired.append(name)
        log.warning("budget gate violated; stepping %s down to factor %s", name, factors[choice[name]])
    entries = [BudgetEntry(n, spec.layer(n).width, factors[i], widths()[n]) for n, i in choice.items()]
    return ChannelBudget(ratio, entries, psi, psi_new, repaired)


def uniform_budget(spec: NetworkSpec, ratio: float) -> ChannelBudget:
    """Hand-designed policy: keep round(c (1 - r)) channels in every layer; no gate."""
    entries = [BudgetEntry(l.name, l.width, 1.0, scaled_channels(l.width, ratio, 1))
               for l in spec.prunable_layers]
    new = spec.with_widths({e.layer: e.c_hat for e in entries})
    return ChannelBudget(ratio, entries, spec_param_count(spec), spec_param_count(new), gated=False)


@dataclass
class SearchConfig:
    ratio: float = 0.3
    epochs: int = 100
    batch: int = 16
    patch_size: int = 48
    alpha_lr: float = 3e-4
    alpha_betas: Tuple[float, float] = (0.9, 0.999)
    weight_lr: float = 1e-4
    weight_betas: Tuple[float, float] = (0.9, 0.99)
    lam: float = 0.1
    steps_per_epoch: Optional[int] = None
    seed: int = 0

    @classmethod
    def from_dict(cls, d: dict) -> "SearchConfig":
        d = dict(d)
        if "lambda" in d:
            d["lam"] = d.pop("lambda")
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lambda"] = d.pop("lam")
        return d


@dataclass
class SearchResult:
    budget: ChannelBudget
    state: SearchState
    history: List[dict] = field(default_factory=list)


def search(P: SRNet, D: nn.Module, train_data: Sequence[ImagePair], val_data: Sequence[ImagePair],
           config: SearchConfig) -> SearchResult:
    """Alternate alpha steps (validation loss) and weight steps (training loss), then decode.

    D is held fixed; the search network is a copy of P sliced to its widest
    branch, so P itself is not modified.
    """
    if not 0 < config.ratio < 1:
        raise ValueError("ratio must lie in (0, 1)")
    if {p.id for p in train_data} & {p.id for p in val_data}:
        raise ValueError("train and validation splits overlap")
    seed_everything(config.seed)
    rng = np.random.default_rng(config.seed)
    state = SearchState.for_spec(P.spec, config.ratio)
    net = SearchSupernet(P, state)
    dtype = next(P.parameters()).dtype
    for a in state.alphas.values():
        a.data = a.data.to(dtype)
    D_params = [p.requires_grad for p in D.parameters()]
    for p in D.parameters():
        p.requires_grad_(False)
    opt_alpha = torch.optim.Adam(state.parameters(), lr=config.alpha_lr, betas=config.alpha_betas)
    opt_w = torch.optim.Adam(net.net.parameters(), lr=config.weight_lr, betas=config.weight_betas)
    steps = config.steps_per_epoch or max(1, math.ceil(len(train_data) / config.batch))
    history = []
    net.train()
    for epoch in range(config.epochs):
        for _ in range(steps):
            vb = sample_batch(val_data, config.batch, rng, config.patch_size).tensors(dtype)
            loss_val = dual_regression_loss(net, D, vb, config.lam).total
            opt_alpha.zero_grad(set_to_none=True)
            loss_val.backward()
            opt_alpha.step()

            tb = sample_batch(train_data, config.batch, rng, config.patch_size).tensors(dtype)
            loss_train = dual_regression_loss(net, D, tb, config.lam).total
            opt_w.zero_grad(set_to_none=True)
            loss_train.backward()
            opt_w.step()
        history.append({"epoch": epoch + 1, "val_loss": float(loss_val.detach()),
                        "train_loss": float(loss_train.detach())})
    for p, flag in zip(D.parameters(), D_params):
        p.requires_grad_(flag)
    budget = decode_budget(P.spec, {n: a.detach() for n, a in state.alphas.items()},
                           config.ratio, state.factors)
    return SearchResult(budget, state, history)
