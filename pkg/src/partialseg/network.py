"""Conditioned encoder-decoder producing paired per-class channels.

The network sees the target image concatenated with (image, mask) channel
pairs for each conditional class and emits 2m independent sigmoid channels:
channel 2j scores class j inside its conditional region, channel 2j+1 scores
class j outside it. Class probability maps and hard segmentations are
recovered by summing each channel pair.
"""
from __future__ import annotations

import dataclasses
import math

import numpy as np
import torch
from torch import nn

from .pairing import ConditionalSet, DualSample


@dataclasses.dataclass(frozen=True)
class BackboneConfig:
    num_classes: int
    cond_classes: tuple[int, ...]
    depth: int = 4
    base_filters: int = 32
    image_size: tuple[int, int] = (64, 64)

    def __post_init__(self):
        object.__setattr__(self, "cond_classes", tuple(int(c) for c in self.cond_classes))
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if len(set(self.cond_classes)) != len(self.cond_classes):
            raise ValueError(f"duplicate conditional classes: {self.cond_classes}")
        for c in self.cond_classes:
            if not 0 <= c < self.num_classes:
                raise ValueError(f"conditional class {c} outside 0..{self.num_classes - 1}")
        if self.depth < 1:
            raise ValueError(f"depth must be >= 1, got {self.depth}")
        if self.base_filters < 4:
            raise ValueError(f"base_filters must be >= 4, got {self.base_filters}")
        h, w = self.image_size
        scale = 2**self.depth
        if h % scale or w % scale:
            raise ValueError(f"image size {self.image_size} not divisible by 2^depth={scale}")

    @property
    def in_channels(self) -> int:
        return 1 + 2 * len(self.cond_classes)

    @property
    def out_channels(self) -> int:
        return 2 * self.num_classes

    def to_json_dict(self) -> dict:
        return dataclasses.asdict(self) | {"image_size": list(self.image_size)}

    @classmethod
    def from_json_dict(cls, d: dict) -> "BackboneConfig":
        return cls(
            num_classes=int(d["num_classes"]),
            cond_classes=tuple(int(c) for c in d["cond_classes"]),
            depth=int(d["depth"]),
            base_filters=int(d["base_filters"]),
            image_size=tuple(int(v) for v in d["image_size"]),
        )


def _norm(channels: int) -> nn.GroupNorm:
    return nn.GroupNorm(math.gcd(8, channels), channels)


class _DoubleConv(nn.Sequential):
    def __init__(self, c_in: int, c_out: int):
        super().__init__(
            nn.Conv2d(c_in, c_out, 3, padding=1),
            _norm(c_out),
            nn.ReLU(inplace=True),
            nn.Conv2d(c_out, c_out, 3, padding=1),
            _norm(c_out),
            nn.ReLU(inplace=True),
        )


class PairwiseUNet(nn.Module):
    """UNet-style backbone with a 2m-channel sigmoid head (no softmax: the
    channels score overlapping region hypotheses, not exclusive classes)."""

    def __init__(self, config: BackboneConfig):
        super().__init__()
        self.config = config
        widths = [config.base_filters * 2**i for i in range(config.depth + 1)]
        self.encoders = nn.ModuleList()
        c_prev = config.in_channels
        for c in widths[:-1]:
            self.encoders.append(_DoubleConv(c_prev, c))
            c_prev = c
        self.pool = nn.MaxPool2d(2)
        self.bottleneck = _DoubleConv(widths[-2], widths[-1])
        self.upsample = nn.Upsample(scale_factor=2, mode="bilinear", align_corners=False)
        self.decoders = nn.ModuleList()
        c_prev = widths[-1]
        for c in reversed(widths[:-1]):
            self.decoders.append(_DoubleConv(c_prev + c, c))
            c_prev = c
        self.head = nn.Conv2d(c_prev, config.out_channels, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim != 4 or x.shape[1] != self.config.in_channels:
            raise ValueError(
                f"expected input (B, {self.config.in_channels}, H, W), got {tuple(x.shape)}"
            )
        skips = []
        for enc in self.encoders:
            x = enc(x)
            skips.append(x)
            x = self.pool(x)
        x = self.bottleneck(x)
        for dec, skip in zip(self.decoders, reversed(skips)):
            x = self.upsample(x)
            x = dec(torch.cat([x, skip], dim=1))
        return torch.sigmoid(self.head(x))


def pack_inputs(
    image,
    cond: ConditionalSet,
    conditional_input: bool = True,
    dtype: torch.dtype = torch.float32,
) -> torch.Tensor:
    """Stack [target image, (cond image, cond mask) per slot] into (C, H, W).

    Soft masks (dual-branch pseudo-labels) pass through as live tensors so
    gradients reach them. ``conditional_input=False`` zeroes every conditional
    channel while keeping the channel count."""
    target = torch.as_tensor(image, dtype=dtype)
    channels = [target]
    for pair in cond.pairs:
        channels.append(torch.as_tensor(pair.image, dtype=dtype))
        channels.append(torch.as_tensor(pair.input_mask()).to(dtype))
    x = torch.stack(channels, dim=0)
    if not conditional_input:
        x = torch.cat([x[:1], torch.zeros_like(x[1:])], dim=0)
    return x


def forward_prim(model: nn.Module, image, cond: ConditionalSet, conditional_input: bool = True) -> torch.Tensor:
    """Single-sample forward of the primal branch: (2m, H, W) probabilities."""
    dtype = next(model.parameters()).dtype
    x = pack_inputs(image, cond, conditional_input, dtype=dtype)
    return model(x.unsqueeze(0))[0]


def forward_dual(model: nn.Module, dual: DualSample, conditional_input: bool = True) -> torch.Tensor:
    """Single-sample forward of the dual branch on the swapped inputs."""
    dtype = next(model.parameters()).dtype
    x = pack_inputs(dual.dual_image, dual.dual_cond, conditional_input, dtype=dtype)
    return model(x.unsqueeze(0))[0]


def assemble_segmentation(pred: torch.Tensor, background_pair: bool) -> tuple[torch.Tensor, torch.Tensor]:
    """Class probability maps and hard labels from paired channels.

    ``pred`` is (2m, H, W) or (B, 2m, H, W). Each class probability is the
    capped sum of its two channels. When background has no conditional slot
    (``background_pair=False``) its channel pair is never positively
    supervised, so the background score is 1 - max foreground probability
    instead. Ties resolve to the lowest class index.
    """
    squeeze = pred.ndim == 3
    p = pred.unsqueeze(0) if squeeze else pred
    if p.shape[1] % 2:
        raise ValueError(f"prediction needs an even channel count, got {p.shape[1]}")
    probs = torch.clamp(p[:, 0::2] + p[:, 1::2], max=1.0)
    if not background_pair:
        bg = 1.0 - probs[:, 1:].max(dim=1).values
        probs = torch.cat([bg.unsqueeze(1), probs[:, 1:]], dim=1)
    labels = probs.argmax(dim=1)
    if squeeze:
        return probs[0], labels[0]
    return probs, labels


def clone_parameters(model: nn.Module) -> dict[str, torch.Tensor]:
    return {k: v.detach().clone() for k, v in model.state_dict().items()}


def load_parameters(model: nn.Module, params: dict[str, torch.Tensor]) -> None:
    model.load_state_dict(params)


def parameters_equal(a: nn.Module, b: nn.Module) -> bool:
    sa, sb = a.state_dict(), b.state_dict()
    return sa.keys() == sb.keys() and all(torch.equal(sa[k], sb[k]) for k in sa)


def parameter_drift(a: nn.Module, b: nn.Module) -> float:
    """Max-norm distance between two parameter sets of the same architecture."""
    sa, sb = a.state_dict(), b.state_dict()
    if sa.keys() != sb.keys() or any(sa[k].shape != sb[k].shape for k in sa):
        raise ValueError("parameter sets do not share an architecture")
    drift = 0.0
    for k in sa:
        if sa[k].numel():
            drift = max(drift, float((sa[k] - sb[k]).abs().max()))
    return drift


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def build_model(config: BackboneConfig, seed: int | None = None) -> PairwiseUNet:
    """Construct a backbone, optionally with seeded weight initialization."""
    if seed is not None:
        torch.manual_seed(seed)
    return PairwiseUNet(config)
