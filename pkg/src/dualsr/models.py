"""Primal and dual super-resolution networks built from a declarative spec.

Every channel width that compression may touch lives in a *site*: a producer
convolution whose output channels are consumed by exactly one other
convolution. Narrowing a site means dropping producer output rows and the
matching consumer input columns, so nothing else in the graph changes.
"""
from __future__ import annotations

import copy
import json
import math
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence

import torch
import torch.nn.functional as F
from torch import nn

SUPPORTED_SCALES = (2, 4, 8)
LAYER_KINDS = ("conv3x3", "downsample_block", "residual_block", "upsample_block")
BLOCK_KINDS = LAYER_KINDS[1:]
SPEC_DIR = Path(__file__).parent / "specs"


class SpecError(ValueError):
    """A NetworkSpec that cannot be instantiated."""

    def __init__(self, layer: Optional[str], message: str):
        self.layer = layer
        super().__init__(f"layer {layer!r}: {message}" if layer else message)


@dataclass(frozen=True)
class LayerSpec:
    name: str
    kind: str
    in_channels: int
    out_channels: int
    mid_channels: Optional[int] = None
    prunable: bool = False

    @property
    def width(self) -> int:
        """Channel count c_l of the layer's compressible width."""
        return self.out_channels if self.kind == "conv3x3" else self.mid_channels


@dataclass
class NetworkSpec:
    layers: List[LayerSpec]
    scale: int
    variant: str = "custom"
    param_budget: Optional[int] = None

    def __post_init__(self):
        self.layers = [l if isinstance(l, LayerSpec) else LayerSpec(**l) for l in self.layers]

    def layer(self, name: str) -> LayerSpec:
        for l in self.layers:
            if l.name == name:
                return l
        raise KeyError(name)

    @property
    def prunable_layers(self) -> List[LayerSpec]:
        return [l for l in self.layers if l.prunable]

    def widths(self) -> Dict[str, int]:
        return {l.name: l.width for l in self.prunable_layers}

    def with_widths(self, widths: Mapping[str, int]) -> "NetworkSpec":
        """Copy of the spec with the given prunable widths substituted."""
        unknown = set(widths) - {l.name for l in self.prunable_layers}
        if unknown:
            raise SpecError(sorted(unknown)[0], "not a prunable layer")
        layers = list(self.layers)
        for i, l in enumerate(layers):
            if l.name not in widths:
                continue
            k = int(widths[l.name])
            if l.kind == "conv3x3":
                layers[i] = replace(l, out_channels=k)
                layers[i + 1] = replace(layers[i + 1], in_channels=k)
            else:
                layers[i] = replace(l, mid_channels=k)
        return NetworkSpec(layers, self.scale, self.variant, None)

    def validate(self) -> "NetworkSpec":
        if self.scale not in SUPPORTED_SCALES:
            raise SpecError(None, f"unsupported scale {self.scale}")
        if not self.layers:
            raise SpecError(None, "spec has no layers")
        names = [l.name for l in self.layers]
        if len(set(names)) != len(names):
            raise SpecError(None, "layer names must be unique")
        first, last = self.layers[0], self.layers[-1]
        if first.kind != "conv3x3" or last.kind != "conv3x3":
            raise SpecError(first.name if first.kind != "conv3x3" else last.name,
                            "first and last layers must be conv3x3")
        if first.prunable or last.prunable:
            raise SpecError(first.name if first.prunable else last.name,
                            "input and output convolutions are not prunable")
        width, skips, n_down = 3, [], 0
        for i, l in enumerate(self.layers):
            if l.kind not in LAYER_KINDS:
                raise SpecError(l.name, f"unknown kind {l.kind!r}")
            chans = [l.in_channels, l.out_channels]
            if l.kind in BLOCK_KINDS:
                if l.mid_channels is None:
                    raise SpecError(l.name, "blocks need mid_channels")
                chans.append(l.mid_channels)
            if any(int(c) != c or c < 1 for c in chans):
                raise SpecError(l.name, "channel counts must be positive integers")
            if l.in_channels != width:
                raise SpecError(l.name, f"expects {l.in_channels} input channels, "
                                        f"previous layer provides {width}")
            if l.kind == "conv3x3":
                if l.prunable and self.layers[i + 1].kind != "conv3x3":
                    raise SpecError(l.name, "a prunable conv3x3 must feed another conv3x3")
                width = l.out_channels
            elif l.kind == "downsample_block":
                skips.append(width)
                n_down += 1
                width = l.out_channels
            elif l.kind == "residual_block":
                if l.out_channels != l.in_channels:
                    raise SpecError(l.name, "residual blocks preserve width")
                width = l.out_channels
            else:
                if l.out_channels % 4:
                    raise SpecError(l.name, "sub-pixel output must be divisible by 4")
                if not skips:
                    raise SpecError(l.name, "upsample block without a matching downsample")
                width = l.out_channels // 4 + skips.pop()
        if skips:
            raise SpecError(None, f"{len(skips)} downsample block(s) without an upsample")
        if width != 3:
            raise SpecError(last.name, "network must end with 3 output channels")
        if 2 ** n_down > self.scale:
            raise SpecError(None, "more downsample stages than the scale allows")
        return self

    def to_dict(self) -> dict:
        return {"format": "dualsr-spec/1", "variant": self.variant, "scale": self.scale,
                "param_budget": self.param_budget,
                "layers": [asdict(l) for l in self.layers]}

    @classmethod
    def from_dict(cls, d: Mapping) -> "NetworkSpec":
        return cls([LayerSpec(**l) for l in d["layers"]], int(d["scale"]),
                   d.get("variant", "custom"), d.get("param_budget"))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "NetworkSpec":
        return cls.from_dict(json.loads(Path(path).read_text()))


def unet_spec(scale: int, base: int, n_resblocks: int, variant: str) -> NetworkSpec:
    """U-Net layout: log2(scale) downsample stages, residual body, mirrored upsampling."""
    if scale not in SUPPORTED_SCALES:
        raise ValueError(f"unsupported scale {scale}")
    phases = int(math.log2(scale))
    widths = [base * 2 ** p for p in range(phases + 1)]
    layers = [LayerSpec("head", "conv3x3", 3, base)]
    for p in range(phases):
        layers.append(LayerSpec(f"down{p + 1}", "downsample_block", widths[p],
                                widths[p + 1], widths[p + 1], True))
    for b in range(n_resblocks):
        layers.append(LayerSpec(f"body{b + 1}", "residual_block", widths[-1],
                                widths[-1], widths[-1], True))
    cin = widths[-1]
    for p in range(phases, 0, -1):
        layers.append(LayerSpec(f"up{p}", "upsample_block", cin, 4 * widths[p - 1],
                                widths[p], True))
        cin = 2 * widths[p - 1]
    layers.append(LayerSpec("tail", "conv3x3", cin, 3))
    return NetworkSpec(layers, scale, variant)


def drn_tiny(scale: int = 4) -> NetworkSpec:
    return unet_spec(scale, 16, 2, "drn_tiny")


def drn_s_like(scale: int = 4) -> NetworkSpec:
    return unet_spec(scale, 32, 6, "drn_s_like")


def shipped_spec(variant: str, scale: int) -> NetworkSpec:
    """Load one of the spec files committed with the package."""
    return NetworkSpec.load(SPEC_DIR / f"{variant}_x{scale}.json").validate()


class SlimConv2d(nn.Conv2d):
    """Conv2d whose outputs can be narrowed to the first k channels or gated.

    Narrowing zeroes every output channel past ``active_out``, so downstream
    layers see exactly what a physically truncated network would feed them
    and no gradient reaches the dropped filters. The kept channels come from
    the same kernel call as the full forward, hence a full-width slice is
    bitwise identical to no slice. ``out_gate`` multiplies each output channel
    (masks for pruning, softmax mixtures for width search).
    """

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.active_out: Optional[int] = None
        self.out_gate: Optional[torch.Tensor] = None

    def forward(self, x):
        y = super().forward(x)
        k = self.active_out
        if k is not None and k < self.out_channels:
            keep = torch.zeros(self.out_channels, dtype=y.dtype, device=y.device)
            keep[:k] = 1
            y = y * keep.view(1, -1, 1, 1)
        if self.out_gate is not None:
            y = y * self.out_gate.view(1, -1, 1, 1).to(y.dtype)
        return y


def conv3x3(cin, cout, stride=1):
    return SlimConv2d(cin, cout, 3, stride, 1)


class ConvLayer(nn.Module):
    def __init__(self, cin, cout, act: bool):
        super().__init__()
        self.conv = conv3x3(cin, cout)
        self.act = nn.ReLU() if act else nn.Identity()

    def forward(self, x):
        return self.act(self.conv(x))


class ConvPair(nn.Module):
    """producer conv -> activation -> consumer conv; the mid width is prunable."""

    def __init__(self, cin, mid, cout, stride=1, act=None):
        super().__init__()
        self.conv1 = conv3x3(cin, mid, stride)
        self.act = act if act is not None else nn.ReLU()
        self.conv2 = nn.Conv2d(mid, cout, 3, 1, 1)

    def forward(self, x):
        return self.conv2(self.act(self.conv1(x)))


class DownBlock(ConvPair):
    def __init__(self, cin, mid, cout):
        super().__init__(cin, mid, cout, stride=2, act=nn.LeakyReLU(0.2))


class ResidualBlock(ConvPair):
    def forward(self, x):
        return x + super().forward(x)


class UpBlock(ConvPair):
    """Sub-pixel upsampling: the consumer conv emits 4x channels for a 2x shuffle."""

    def __init__(self, cin, mid, cout):
        super().__init__(cin, mid, cout)
        self.shuffle = nn.PixelShuffle(2)

    def forward(self, x):
        return self.shuffle(super().forward(x))


@dataclass
class Site:
    """A prunable width: ``producer`` output channels feed only ``consumer``."""
    name: str
    producer: SlimConv2d
    consumer: nn.Conv2d
    producer_path: str
    consumer_path: str

    @property
    def width(self) -> int:
        return self.producer.out_channels


class SRNet(nn.Module):
    """Primal model P: LR image (N,3,h,w) -> SR image (N,3,s*h,s*w).

    The input is bicubically upsampled, processed at HR resolution by the
    layer graph, and the result is added back to the upsampled input.
    """

    def __init__(self, spec: NetworkSpec):
        super().__init__()
        spec.validate()
        self.spec = spec
        self.scale = spec.scale
        blocks = []
        for i, l in enumerate(spec.layers):
            if l.kind == "conv3x3":
                blocks.append(ConvLayer(l.in_channels, l.out_channels, act=i < len(spec.layers) - 1))
            elif l.kind == "downsample_block":
                blocks.append(DownBlock(l.in_channels, l.mid_channels, l.out_channels))
            elif l.kind == "residual_block":
                blocks.append(ResidualBlock(l.in_channels, l.mid_channels, l.out_channels))
            else:
                blocks.append(UpBlock(l.in_channels, l.mid_channels, l.out_channels))
        self.layers = nn.ModuleList(blocks)

    def forward(self, x):
        base = F.interpolate(x, scale_factor=self.scale, mode="bicubic", align_corners=False)
        h, skips = base, []
        for l, block in zip(self.spec.layers, self.layers):
            if l.kind == "downsample_block":
                skips.append(h)
                h = block(h)
            elif l.kind == "upsample_block":
                h = torch.cat([block(h), skips.pop()], dim=1)
            else:
                h = block(h)
        return h + base

    def sites(self) -> Dict[str, Site]:
        out = {}
        for i, l in enumerate(self.spec.layers):
            if not l.prunable:
                continue
            block = self.layers[i]
            if l.kind == "conv3x3":
                out[l.name] = Site(l.name, block.conv, self.layers[i + 1].conv,
                                   f"layers.{i}.conv", f"layers.{i + 1}.conv")
            else:
                out[l.name] = Site(l.name, block.conv1, block.conv2,
                                   f"layers.{i}.conv1", f"layers.{i}.conv2")
        return out

    def clear_gates(self) -> None:
        for m in self.modules():
            if isinstance(m, SlimConv2d):
                m.active_out = None
                m.out_gate = None


class DualNet(nn.Module):
    """Dual model D: HR-resolution image -> LR image via stride-2 stages."""

    def __init__(self, scale: int, width: int = 16):
        super().__init__()
        if scale not in SUPPORTED_SCALES:
            raise ValueError(f"unsupported scale {scale}; expected one of {SUPPORTED_SCALES}")
        self.scale = scale
        self.width = width
        stages = []
        for _ in range(int(math.log2(scale))):
            stages.append(nn.Sequential(
                nn.Conv2d(3, width, 3, 2, 1), nn.LeakyReLU(0.2), nn.Conv2d(width, 3, 3, 1, 1)))
        self.stages = nn.Sequential(*stages)

    def forward(self, y):
        return self.stages(y)


def build_primal(spec: NetworkSpec) -> SRNet:
    return SRNet(spec)


def build_dual(scale: int, width: int = 16) -> DualNet:
    return DualNet(scale, width)


def count_params(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


def spec_param_count(spec: NetworkSpec) -> int:
    """psi(P) straight from the spec: 3x3 convolutions with bias."""
    total = 0
    for l in spec.layers:
        if l.kind == "conv3x3":
            total += 9 * l.in_channels * l.out_channels + l.out_channels
        else:
            total += 9 * l.in_channels * l.mid_channels + l.mid_channels
            total += 9 * l.mid_channels * l.out_channels + l.out_channels
    return total


def slice_width(model: SRNet, layer: str, k: int) -> SRNet:
    """Restrict a prunable layer to its first ``k`` channels (in place).

    The producer's remaining outputs are zeroed, so the consumer sees what a
    physically truncated network would feed it.
    Undo with ``model.clear_gates()``.
    """
    sites = model.sites()
    if layer not in sites:
        raise ValueError(f"layer {layer!r} is not prunable")
    site = sites[layer]
    if not 1 <= k <= site.width:
        raise ValueError(f"k={k} outside [1, {site.width}] for layer {layer!r}")
    site.producer.active_out = None if k == site.width else k
    return model


def select_channels(model: SRNet, keep: Mapping[str, Sequence[int]]) -> SRNet:
    """Materialise a smaller network keeping only the listed channels per site.

    Producer output rows and consumer input columns are copied in the given
    index order; everything else is copied unchanged.
    """
    sites = model.sites()
    widths = {}
    for name, idx in keep.items():
        if name not in sites:
            raise ValueError(f"layer {name!r} is not prunable")
        idx = list(idx)
        c = sites[name].width
        if not idx or len(set(idx)) != len(idx) or min(idx) < 0 or max(idx) >= c:
            raise ValueError(f"invalid channel selection for {name!r}")
        widths[name] = len(idx)
    new = SRNet(model.spec.with_widths(widths))
    state = {k: v.detach().clone() for k, v in model.state_dict().items()}
    for name, idx in keep.items():
        s = sites[name]
        index = torch.as_tensor(list(idx), dtype=torch.long)
        state[f"{s.producer_path}.weight"] = state[f"{s.producer_path}.weight"][index]
        state[f"{s.producer_path}.bias"] = state[f"{s.producer_path}.bias"][index]
        state[f"{s.consumer_path}.weight"] = state[f"{s.consumer_path}.weight"][:, index]
    new.load_state_dict(state)
    return new.to(next(model.parameters()).dtype)


def truncate(model: SRNet, widths: Mapping[str, int]) -> SRNet:
    """Physically keep the first ``widths[name]`` channels of each named site."""
    return select_channels(model, {n: range(k) for n, k in widths.items()})


def clone_model(model: nn.Module) -> nn.Module:
    m = copy.deepcopy(model)
    if isinstance(m, SRNet):
        m.clear_gates()
    return m
