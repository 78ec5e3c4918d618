"""Image quality metrics and model cost accounting.

Convention used everywhere: PSNR and SSIM are computed on the Y channel of
ITU-R BT.601 YCbCr after cropping ``scale`` pixels from every border, with a
peak value of 1.0. MAdds count multiply-adds of convolutions only.
"""
from __future__ import annotations

import math
import os
import platform
import statistics
import time
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
from torch import nn

CONVENTION = "Y channel (BT.601), border crop = scale, peak 1.0, 8-bit rounded SR"
PSNR_CAP = 100.0
COST_INPUT = (96, 96)


def rgb_to_y(img: np.ndarray) -> np.ndarray:
    """BT.601 luma for RGB in [0, 1]; output in [16/255, 235/255]."""
    img = np.asarray(img, dtype=np.float64)
    return (16.0 + img[..., 0] * 65.481 + img[..., 1] * 128.553 + img[..., 2] * 24.966) / 255.0


def _prepare(sr, hr, scale: int):
    sr, hr = np.asarray(sr, dtype=np.float64), np.asarray(hr, dtype=np.float64)
    if sr.shape != hr.shape:
        raise ValueError(f"image shapes differ: {sr.shape} vs {hr.shape}")
    if sr.ndim == 3 and sr.shape[-1] == 3:
        sr, hr = rgb_to_y(sr), rgb_to_y(hr)
    if scale:
        sr, hr = sr[scale:-scale, scale:-scale], hr[scale:-scale, scale:-scale]
    if sr.size == 0:
        raise ValueError("border crop leaves an empty image")
    return sr, hr


def psnr(sr: np.ndarray, hr: np.ndarray, scale: int = 0) -> float:
    """PSNR in dB; identical images return PSNR_CAP."""
    sr, hr = _prepare(sr, hr, scale)
    mse = float(np.mean((sr - hr) ** 2))
    if mse == 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    g = np.exp(-((np.arange(size) - (size - 1) / 2) ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    k = len(g)
    rows = np.lib.stride_tricks.sliding_window_view(img, k, axis=0) @ g
    return np.lib.stride_tricks.sliding_window_view(rows, k, axis=1) @ g


def ssim(sr: np.ndarray, hr: np.ndarray, scale: int = 0) -> float:
    """Mean single-scale SSIM: 11x11 Gaussian window (sigma 1.5), K1=0.01, K2=0.03."""
    x, y = _prepare(sr, hr, scale)
    if min(x.shape) < 11:
        raise ValueError("SSIM needs at least 11x11 pixels after cropping")
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    g = _gaussian_window()
    mx, my = _filter_valid(x, g), _filter_valid(y, g)
    sxx = _filter_valid(x * x, g) - mx * mx
    syy = _filter_valid(y * y, g) - my * my
    sxy = _filter_valid(x * y, g) - mx * my
    num = (2 * mx * my + c1) * (2 * sxy + c2)
    den = (mx * mx + my * my + c1) * (sxx + syy + c2)
    return float(np.mean(num / den))


def to_image(t: torch.Tensor) -> np.ndarray:
    """(3, H, W) tensor -> (H, W, 3) float image rounded to the 8-bit grid."""
    img = t.detach().double().clamp(0, 1).permute(1, 2, 0).cpu().numpy()
    return np.round(img * 255.0) / 255.0


@torch.no_grad()
def evaluate(model: nn.Module, pairs: Sequence, scale: Optional[int] = None) -> Tuple[float, float]:
    """Mean (PSNR, SSIM) of ``model`` over ImagePairs."""
    if not len(pairs):
        raise ValueError("no images to evaluate")
    model.eval()
    dtype = next(model.parameters()).dtype
    ps, ss = [], []
    for p in pairs:
        s = scale or p.scale
        lr = torch.from_numpy(np.ascontiguousarray(p.lr.transpose(2, 0, 1)))[None].to(dtype)
        sr = to_image(model(lr)[0])
        ps.append(psnr(sr, p.hr, s))
        ss.append(ssim(sr, p.hr, s))
    return float(np.mean(ps)), float(np.mean(ss))


@dataclass
class ConvRecord:
    name: str
    in_channels: int
    out_channels: int
    kernel: Tuple[int, int]
    out_hw: Tuple[int, int]
    params: int
    madds: int


class MAddsCounter:
    """Records every Conv2d executed while active (forward hooks)."""

    def __init__(self):
        self.records: List[ConvRecord] = []

    @property
    def total(self) -> int:
        return sum(r.madds for r in self.records)

    @contextmanager
    def watch(self, *models: nn.Module):
        handles = []
        for model in models:
            for name, m in model.named_modules():
                if isinstance(m, nn.Conv2d):
                    handles.append(m.register_forward_hook(self._hook(name, m)))
        try:
            yield self
        finally:
            for h in handles:
                h.remove()

    def _hook(self, name, m: nn.Conv2d):
        def hook(module, inputs, output):
            kh, kw = m.kernel_size
            cin = m.in_channels // m.groups
            oh, ow = output.shape[-2:]
            self.records.append(ConvRecord(
                name, m.in_channels, m.out_channels, (kh, kw), (oh, ow),
                sum(p.numel() for p in m.parameters()),
                output.shape[0] * oh * ow * cin * m.out_channels * kh * kw))
        return hook


def count_cost(model: nn.Module, lr_hw: Tuple[int, int] = COST_INPUT,
               in_channels: int = 3) -> Tuple[int, int]:
    """(trainable parameters, MAdds of one forward on a single lr_hw input)."""
    params = sum(p.numel() for p in model.parameters() if p.requires_grad)
    counter = MAddsCounter()
    first = next(model.parameters(), None)
    dtype = first.dtype if first is not None else torch.float32
    with torch.no_grad(), counter.watch(model):
        model(torch.zeros(1, in_channels, *lr_hw, dtype=dtype))
    return params, counter.total


def layer_costs(model: nn.Module, lr_hw: Tuple[int, int] = COST_INPUT) -> List[ConvRecord]:
    counter = MAddsCounter()
    with torch.no_grad(), counter.watch(model):
        model(torch.zeros(1, 3, *lr_hw, dtype=next(model.parameters()).dtype))
    return counter.records


class ContentionError(RuntimeError):
    pass


@dataclass
class LatencyReport:
    median_s: float
    times_s: List[float]
    threads: int
    device: str
    load_avg: float


@contextmanager
def _threads(n: int):
    old = torch.get_num_threads()
    torch.set_num_threads(n)
    try:
        yield
    finally:
        torch.set_num_threads(old)


@torch.no_grad()
def bench_latency(model: nn.Module, runs: int = 20, lr_hw: Tuple[int, int] = COST_INPUT,
                  threads: int = 1, strict: bool = False, max_load: Optional[float] = None
                  ) -> LatencyReport:
    """Median wall-clock seconds of single-image forwards; the warm-up run is dropped.

    With ``strict`` the bench refuses to run when the 1-minute load average
    exceeds ``max_load`` (default: CPU count).
    """
    if runs < 1:
        raise ValueError("runs must be >= 1")
    load = os.getloadavg()[0] if hasattr(os, "getloadavg") else 0.0
    if strict and load > (max_load if max_load is not None else os.cpu_count() or 1):
        raise ContentionError(f"load average {load:.2f} too high for latency benchmarking")
    model.eval()
    x = torch.rand(1, 3, *lr_hw, generator=torch.Generator().manual_seed(0),
                   dtype=next(model.parameters()).dtype)
    times = []
    with _threads(threads):
        model(x)
        for _ in range(runs):
            t0 = time.perf_counter()
            model(x)
            times.append(time.perf_counter() - t0)
    device = f"cpu ({platform.processor() or platform.machine()})"
    return LatencyReport(statistics.median(times), times, threads, device, load)


@torch.no_grad()
def bench_interleaved(models: Dict[str, nn.Module], runs: int = 20, lr_hw: Tuple[int, int] = COST_INPUT,
                      threads: int = 1, strict: bool = False, max_load: Optional[float] = None
                      ) -> Dict[str, LatencyReport]:
    """Like bench_latency for several models, timed round-robin.

    Each round times every model once, so slow drift of the machine (thermal,
    noisy neighbours) hits all models alike instead of whichever ran last.
    """
    if runs < 1:
        raise ValueError("runs must be >= 1")
    load = os.getloadavg()[0] if hasattr(os, "getloadavg") else 0.0
    if strict and load > (max_load if max_load is not None else os.cpu_count() or 1):
        raise ContentionError(f"load average {load:.2f} too high for latency benchmarking")
    inputs = {}
    for name, m in models.items():
        m.eval()
        inputs[name] = torch.rand(1, 3, *lr_hw, generator=torch.Generator().manual_seed(0),
                                  dtype=next(m.parameters()).dtype)
    times = {name: [] for name in models}
    with _threads(threads):
        for name, m in models.items():
            m(inputs[name])
        for _ in range(runs):
            for name, m in models.items():
                t0 = time.perf_counter()
                m(inputs[name])
                times[name].append(time.perf_counter() - t0)
    device = f"cpu ({platform.processor() or platform.machine()})"
    return {name: LatencyReport(statistics.median(t), t, threads, device, load) for name, t in times.items()}


@dataclass
class CostReport:
    name: str
    params: int
    madds: int
    latency_s: Optional[float] = None
    scores: Dict[str, Tuple[float, float]] = field(default_factory=dict)
    threads: Optional[int] = None
    device: Optional[str] = None
    convention: str = CONVENTION

    @property
    def params_M(self) -> float:
        return self.params / 1e6

    @property
    def madds_G(self) -> float:
        return self.madds / 1e9

    def to_dict(self) -> dict:
        d = asdict(self)
        d["scores"] = {k: list(v) for k, v in self.scores.items()}
        d["params_M"], d["madds_G"] = self.params_M, self.madds_G
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CostReport":
        keep = {k: v for k, v in d.items() if k not in ("params_M", "madds_G")}
        keep["scores"] = {k: tuple(v) for k, v in keep.get("scores", {}).items()}
        return cls(**keep)


def cost_report(name: str, model: nn.Module, datasets: Optional[Dict[str, Sequence]] = None,
                latency_runs: int = 0, lr_hw: Tuple[int, int] = COST_INPUT) -> CostReport:
    params, madds = count_cost(model, lr_hw)
    rep = CostReport(name, params, madds)
    for dname, pairs in (datasets or {}).items():
        rep.scores[dname] = evaluate(model, pairs)
    if latency_runs:
        lat = bench_latency(model, latency_runs, lr_hw)
        rep.latency_s, rep.threads, rep.device = lat.median_s, lat.threads, lat.device
    return rep


def render_markdown(reports: Sequence[CostReport]) -> str:
    """Table in the column order Method | #Params | #MAdds | latency | per-dataset PSNR / SSIM."""
    datasets = sorted({d for r in reports for d in r.scores})
    head = ["Method", "#Params (M)", "#MAdds (G)", "CPU Latency (s)"] + \
           [f"{d} PSNR / SSIM" for d in datasets]
    lines = [f"_Metric convention: {CONVENTION}; MAdds on a "
             f"{COST_INPUT[0]}x{COST_INPUT[1]} LR input._", "",
             "| " + " | ".join(head) + " |", "|" + "---|" * len(head)]
    for r in reports:
        lat = f"{r.latency_s:.3f}" if r.latency_s is not None else "--"
        cells = [r.name, f"{r.params_M:.3f}", f"{r.madds_G:.2f}", lat]
        for d in datasets:
            cells.append(f"{r.scores[d][0]:.2f} / {r.scores[d][1]:.3f}" if d in r.scores else "--")
        lines.append("| " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"
