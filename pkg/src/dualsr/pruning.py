"""Greedy channel selection guided by feature reconstruction and dual regression.

For a prunable site the consumer convolution's input channels are selected
one at a time, starting from none. Each candidate is scored by the squared
norm of the objective's gradient with respect to that channel's (currently
zero) consumer weights, where the objective is

    MSE(X, X_hat) + gamma * L_DR(P_hat, D)

with X / X_hat the consumer outputs of the original and compressed models.
After every selection the selected weights take one SGD pass over the probe
set. Once a site is finished, the unselected channels are physically removed
from both the producer and the consumer.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn
from torch.func import functional_call

from .data import ImagePair, sample_batch
from .models import SRNet, clone_model, select_channels
from .search import ChannelBudget
from .trainer import dual_regression_loss, seed_everything

log = logging.getLogger(__name__)


def feature_loss(x: torch.Tensor, x_hat: torch.Tensor) -> torch.Tensor:
    """Mean squared error between feature maps."""
    return F.mse_loss(x_hat, x)


@dataclass
class PruneConfig:
    gamma: float = 1.0
    lam: float = 0.1
    probe_batches: int = 16
    batch: int = 16
    patch_size: int = 48
    update_lr: float = 5e-5
    update_epochs: int = 1
    seed: int = 0

    @classmethod
    def from_dict(cls, d: dict) -> "PruneConfig":
        d = dict(d)
        if "lambda" in d:
            d["lam"] = d.pop("lambda")
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lambda"] = d.pop("lam")
        return d


@dataclass
class PrunePlan:
    selected: Dict[str, List[int]]
    gamma: float
    provenance: str  # "dual" when gamma > 0, else "no_dual"
    order: Dict[str, List[int]] = field(default_factory=dict)
    objective: Dict[str, List[float]] = field(default_factory=dict)

    def validate(self, channels: Mapping[str, int], budget: Mapping[str, int]) -> None:
        for name, idx in self.selected.items():
            if len(idx) != budget[name] or len(set(idx)) != len(idx):
                raise ValueError(f"{name}: selection does not match budget {budget[name]}")
            if min(idx) < 0 or max(idx) >= channels[name]:
                raise ValueError(f"{name}: channel index out of range")

    def to_dict(self) -> dict:
        return {"format": "dualsr-plan/1", **asdict(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "PrunePlan":
        d = {k: v for k, v in d.items() if k != "format"}
        return cls(**d)

    def save(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "PrunePlan":
        return cls.from_dict(json.loads(Path(path).read_text()))


class _Capture:
    """Forward hook storing a module's latest output."""

    def __init__(self, module: nn.Module):
        self.value = None
        self.handle = module.register_forward_hook(self._hook)

    def _hook(self, module, inputs, output):
        self.value = output

    def close(self):
        self.handle.remove()


class LayerObjective:
    """Evaluates recon + gamma * dual for one site of a partially pruned model.

    ``P_hat`` is evaluated with the site's consumer weights replaced by an
    explicit tensor, so gradients with respect to zeroed (unselected) channels
    are available. Targets from the original model are cached per probe batch.
    """

    def __init__(self, P: SRNet, P_hat: SRNet, D: nn.Module, layer: str,
                 probe: Sequence[Tuple[torch.Tensor, torch.Tensor]], gamma: float, lam: float):
        self.P_hat, self.D, self.layer = P_hat, D, layer
        self.gamma, self.lam = gamma, lam
        self.probe = probe
        self.site = P_hat.sites()[layer]
        self.key = f"{self.site.consumer_path}.weight"
        ref = P.sites()[layer].consumer
        cap = _Capture(ref)
        with torch.no_grad():
            self.targets = []
            for lr, _ in probe:
                P(lr)
                self.targets.append(cap.value.detach())
        cap.close()

    def batch_value(self, weight: torch.Tensor, i: int):
        lr, hr = self.probe[i]
        cap = _Capture(self.site.consumer)
        try:
            model = lambda x: functional_call(self.P_hat, {self.key: weight}, (x,))
            recon_dual = dual_regression_loss(model, self.D, (lr, hr), self.lam)
            recon = feature_loss(self.targets[i], cap.value)
        finally:
            cap.close()
        dual = recon_dual.total
        return recon, dual

    def value(self, weight: torch.Tensor) -> Tuple[float, float, float]:
        """(recon, dual, total) averaged over the probe set, no gradients."""
        r = d = 0.0
        with torch.no_grad():
            for i in range(len(self.probe)):
                recon, dual = self.batch_value(weight, i)
                r += float(recon)
                d += float(dual)
        n = len(self.probe)
        r, d = r / n, d / n
        return r, d, r + self.gamma * d

    def gradient(self, weight: torch.Tensor) -> Tuple[torch.Tensor, float]:
        """Gradient of the probe-averaged objective w.r.t. the consumer weights."""
        w = weight.detach().clone().requires_grad_(True)
        total = 0.0
        for i in range(len(self.probe)):
            recon, dual = self.batch_value(w, i)
            obj = (recon + self.gamma * dual) / len(self.probe)
            obj.backward()
            total += float(obj.detach())
        return w.grad.detach(), total


def _channel_mask(width: int, selected: Sequence[int], like: torch.Tensor) -> torch.Tensor:
    m = torch.zeros(width, dtype=like.dtype)
    if len(selected):
        m[list(selected)] = 1
    return m.view(1, -1, 1, 1)


def _scores(objective: LayerObjective, weight: torch.Tensor, selected: Sequence[int]):
    masked = weight * _channel_mask(weight.shape[1], selected, weight)
    grad, value = objective.gradient(masked)
    return grad.pow(2).sum(dim=(0, 2, 3)), value


def channel_importance(objective: LayerObjective, weight: torch.Tensor,
                       selected: Sequence[int]) -> torch.Tensor:
    """Squared gradient norm per consumer input channel with only ``selected`` active."""
    return _scores(objective, weight, selected)[0]


def _frozen(*models: nn.Module):
    flags = [[p.requires_grad for p in m.parameters()] for m in models]
    for m in models:
        for p in m.parameters():
            p.requires_grad_(False)
    return flags


def _restore(models, flags):
    for m, fl in zip(models, flags):
        for p, f in zip(m.parameters(), fl):
            p.requires_grad_(f)


@dataclass
class LayerTrace:
    selected: List[int]
    order: List[int]
    objective: List[float]
    fallbacks: int = 0


def prune_layer(P: SRNet, P_hat: SRNet, D: nn.Module, layer: str, c_hat: int, gamma: float,
                probe: Sequence[Tuple[torch.Tensor, torch.Tensor]], lam: float = 0.1,
                update_lr: float = 5e-5, update_epochs: int = 1) -> LayerTrace:
    """Greedily choose ``c_hat`` input channels of ``layer``'s consumer in ``P_hat``.

    ``P_hat``'s consumer weights are overwritten with the finetuned, masked
    weights (unselected columns zero). ``trace.objective`` holds the probe
    objective before the first and after every selection + update.
    """
    site = P_hat.sites()[layer]
    c = site.width
    if not 1 <= c_hat <= c:
        raise ValueError(f"{layer}: budget {c_hat} outside [1, {c}]")
    if c_hat == c:
        return LayerTrace(list(range(c)), list(range(c)), [])
    objective = LayerObjective(P, P_hat, D, layer, probe, gamma, lam)
    work = site.consumer.weight.detach().clone()
    selected: List[int] = []
    trace = LayerTrace([], [], [])
    while len(selected) < c_hat:
        scores, value = _scores(objective, work, selected)
        trace.objective.append(value)
        candidates = [j for j in range(c) if j not in selected]
        cand_scores = scores[candidates]
        if float(cand_scores.max()) == 0.0:
            trace.fallbacks += 1
            mags = work.pow(2).sum(dim=(0, 2, 3))[candidates]
            log.warning("%s: all candidate gradients vanish; using weight magnitude", layer)
            pick = candidates[int(torch.argmax(mags))]
        else:
            pick = candidates[int(torch.argmax(cand_scores))]
        selected.append(pick)
        mask = _channel_mask(c, selected, work)
        for _ in range(update_epochs):
            for i in range(len(probe)):
                w = (work * mask).requires_grad_(True)
                recon, dual = objective.batch_value(w, i)
                (recon + gamma * dual).backward()
                work = work - update_lr * w.grad * mask
    trace.objective.append(objective.value(work * _channel_mask(c, selected, work))[2])
    trace.order = list(selected)
    trace.selected = sorted(selected)
    with torch.no_grad():
        site.consumer.weight.copy_(work * _channel_mask(c, selected, work))
    return trace


def probe_batches(data: Sequence[ImagePair], n: int, batch: int, patch_size: int, seed: int,
                  dtype=torch.float32):
    rng = np.random.default_rng([seed, 0x5EED])
    return [sample_batch(data, batch, rng, patch_size).tensors(dtype) for _ in range(n)]


def check_budget(P: SRNet, budget: ChannelBudget) -> Dict[str, int]:
    channels = P.spec.widths()
    widths = budget.widths
    if set(widths) != set(channels):
        raise ValueError(f"budget layers {sorted(widths)} do not match prunable layers {sorted(channels)}")
    for e in budget.entries:
        if e.c != channels[e.layer]:
            raise ValueError(f"{e.layer}: budget assumes {e.c} channels, model has {channels[e.layer]}")
        if not 1 <= e.c_hat <= e.c:
            raise ValueError(f"{e.layer}: budget {e.c_hat} outside [1, {e.c}]")
    return widths


def prune_model(P: SRNet, D: nn.Module, budget: ChannelBudget, data: Sequence[ImagePair],
                config: PruneConfig) -> Tuple[SRNet, PrunePlan]:
    """Prune every site of P in forward order and return the smaller network.

    P and D are left untouched; the budget is validated before any work.
    """
    widths = check_budget(P, budget)
    seed_everything(config.seed)
    dtype = next(P.parameters()).dtype
    probe = probe_batches(data, config.probe_batches, config.batch, config.patch_size,
                          config.seed, dtype)
    P_hat = clone_model(P)
    flags = _frozen(P, P_hat, D)
    P.eval(), P_hat.eval(), D.eval()
    selected, order, objective = {}, {}, {}
    try:
        for l in P.spec.prunable_layers:
            name = l.name
            trace = prune_layer(P, P_hat, D, name, widths[name], config.gamma, probe, config.lam,
                                config.update_lr, config.update_epochs)
            selected[name], order[name], objective[name] = trace.selected, trace.order, trace.objective
            if len(trace.selected) < l.width:
                P_hat = select_channels(P_hat, {name: trace.selected})
                _frozen(P_hat)
                P_hat.eval()
            log.info("%s: kept %d/%d channels", name, len(trace.selected), l.width)
    finally:
        _restore((P, D), flags[0:1] + flags[2:3])
    for p in P_hat.parameters():
        p.requires_grad_(True)
    plan = PrunePlan(selected, config.gamma, "dual" if config.gamma > 0 else "no_dual", order, objective)
    plan.validate(P.spec.widths(), widths)
    return P_hat, plan


def apply_plan(P: SRNet, plan: PrunePlan) -> SRNet:
    """Physically remove the channels a plan leaves out (no finetuning)."""
    keep = {n: idx for n, idx in plan.selected.items() if len(idx) < P.spec.layer(n).width}
    return select_channels(P, keep) if keep else clone_model(P)


def masked_model(P: SRNet, plan: PrunePlan) -> SRNet:
    """Full-width copy of P with unselected channels zeroed via output gates."""
    M = clone_model(P)
    for name, site in M.sites().items():
        if name in plan.selected:
            gate = torch.zeros(site.width, dtype=site.producer.weight.dtype)
            gate[list(plan.selected[name])] = 1
            site.producer.out_gate = gate
    return M
