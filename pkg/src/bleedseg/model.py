"""Attention U-Net: architecture, parameter sets and differentiable forward.

Parameters live outside the network in named ``ParamSet`` dicts so that the
student and teacher copies, the moving-average update and checkpointing all
operate on plain named arrays; the forward pass binds a ParamSet to the
architecture with ``torch.func.functional_call``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, fields, replace
from functools import lru_cache

import torch
import torch.nn.functional as F
from torch import nn
from torch.func import functional_call

from .losses import LossBreakdown, LossWeights, consistency_loss, ce_loss, dice_loss, total_loss


@dataclass(frozen=True)
class ModelConfig:
    in_channels: int = 3
    num_classes: int = 2
    depth: int = 4  # number of 2x down-sampling stages
    base_channels: int = 16
    attention_enabled: bool = True
    cse_reduction: int = 2

    def __post_init__(self):
        if self.depth < 2:
            raise ValueError(f"depth must be >= 2, got {self.depth}")
        if self.base_channels < 1 or self.cse_reduction < 1:
            raise ValueError("base_channels and cse_reduction must be >= 1")
        if self.in_channels < 1 or self.num_classes < 2:
            raise ValueError("need in_channels >= 1 and num_classes >= 2")

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class NoiseConfig:
    """Additive Gaussian input noise; the student and teacher passes draw independently."""

    sigma: float = 0.1
    enabled: bool = True

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError(f"noise sigma must be >= 0, got {self.sigma}")

    @classmethod
    def from_dict(cls, d: dict) -> "NoiseConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown noise config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class ParamSet:
    """Named parameter arrays for one model copy (student or teacher)."""

    arrays: dict[str, torch.Tensor]
    role: str = "student"

    def names(self) -> list[str]:
        return list(self.arrays)


class ChannelGate(nn.Module):
    """cSE branch: sigmoid channel weights from a globally pooled descriptor."""

    def __init__(self, channels: int, reduction: int):
        super().__init__()
        hidden = max(channels // reduction, 1)
        self.fc1 = nn.Linear(channels, hidden)
        self.fc2 = nn.Linear(hidden, channels)

    def forward(self, x):
        z = x.mean(dim=(-2, -1))
        s = torch.sigmoid(self.fc2(F.relu(self.fc1(z))))
        return x * s[..., None, None]


class SpatialGate(nn.Module):
    """sSE branch: sigmoid spatial map from a 1x1 convolution."""

    def __init__(self, channels: int):
        super().__init__()
        self.conv = nn.Conv2d(channels, 1, kernel_size=1)

    def forward(self, x):
        return x * torch.sigmoid(self.conv(x))


class SCSEBlock(nn.Module):
    """Sum of the channel and spatial recalibration branches."""

    def __init__(self, channels: int, reduction: int):
        super().__init__()
        self.channel_gate = ChannelGate(channels, reduction)
        self.spatial_gate = SpatialGate(channels)

    def forward(self, x):
        return self.channel_gate(x) + self.spatial_gate(x)


class DoubleConv(nn.Module):
    def __init__(self, cin: int, cout: int):
        super().__init__()
        self.conv = nn.Sequential(
            nn.Conv2d(cin, cout, 3, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(cout, cout, 3, padding=1),
            nn.ReLU(inplace=True),
        )

    def forward(self, x):
        return self.conv(x)


class AttentionUNet(nn.Module):
    """U-Net whose encoder and decoder stages each end in an scSE block.

    Down-sampling is 2x2 max-pool; up-sampling is 2x nearest-neighbor followed
    by a 3x3 convolution; skip connections concatenate. No normalization
    layers. With attention disabled the gate modules are plain identities and
    carry no parameters.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.cfg = config
        chs = [config.base_channels * 2 ** i for i in range(config.depth + 1)]

        def gate(c):
            if not config.attention_enabled:
                return nn.Identity()
            return SCSEBlock(c, config.cse_reduction)

        enc = []
        cin = config.in_channels
        for c in chs[:-1]:
            enc.append(DoubleConv(cin, c))
            cin = c
        self.enc = nn.ModuleList(enc)
        self.enc_attn = nn.ModuleList(gate(c) for c in chs[:-1])
        self.bottom = DoubleConv(chs[-2], chs[-1])
        self.up = nn.ModuleList(
            nn.Conv2d(chs[i + 1], chs[i], 3, padding=1) for i in reversed(range(config.depth))
        )
        self.dec = nn.ModuleList(
            DoubleConv(2 * chs[i], chs[i]) for i in reversed(range(config.depth))
        )
        self.dec_attn = nn.ModuleList(gate(chs[i]) for i in reversed(range(config.depth)))
        self.head = nn.Conv2d(chs[0], config.num_classes, 1)

    def forward(self, x):
        unbatched = x.dim() == 3
        if unbatched:
            x = x.unsqueeze(0)
        h, w = x.shape[-2:]
        div = 2 ** self.cfg.depth
        if h % div or w % div:
            raise ValueError(f"input size {h}x{w} must be divisible by 2^depth = {div}")
        skips = []
        for stage, attn in zip(self.enc, self.enc_attn):
            x = attn(stage(x))
            skips.append(x)
            x = F.max_pool2d(x, 2)
        x = self.bottom(x)
        for up, dec, attn, skip in zip(self.up, self.dec, self.dec_attn, reversed(skips)):
            x = up(F.interpolate(x, scale_factor=2, mode="nearest"))
            x = attn(dec(torch.cat([skip, x], dim=1)))
        x = self.head(x)
        return x.squeeze(0) if unbatched else x


@lru_cache(maxsize=8)
def _module_for(config: ModelConfig) -> AttentionUNet:
    # the cached module's own parameters are never read; functional_call
    # substitutes every one of them
    return AttentionUNet(config)


_GATE_PREFIXES = ("enc_attn.", "dec_attn.")


def unet_forward(params: ParamSet, config: ModelConfig, image: torch.Tensor) -> torch.Tensor:
    """Run the network functionally: logits for a (3,H,W) or (N,3,H,W) input."""
    module = _module_for(config)
    arrays = params.arrays
    if not config.attention_enabled:
        arrays = {k: v for k, v in arrays.items() if not k.startswith(_GATE_PREFIXES)}
    expected = {name for name, _ in module.named_parameters()}
    if set(arrays) != expected:
        missing = sorted(expected - set(arrays))
        extra = sorted(set(arrays) - expected)
        raise ValueError(f"ParamSet does not match architecture; missing={missing} extra={extra}")
    return functional_call(module, arrays, (image,))


def softmax_probs(logits: torch.Tensor) -> torch.Tensor:
    """Per-pixel softmax over the class channel."""
    return torch.softmax(logits, dim=-3)


def inject_noise(image: torch.Tensor, noise: NoiseConfig,
                 generator: torch.Generator) -> torch.Tensor:
    """Add clamped Gaussian noise; a disabled or zero-sigma config is a no-op."""
    if not noise.enabled or noise.sigma == 0.0:
        return image
    g = torch.empty_like(image).normal_(0.0, 1.0, generator=generator)
    return (image + noise.sigma * g).clamp_(0.0, 1.0)


def _fan_in(shape: torch.Size) -> int:
    if len(shape) == 4:  # conv weight (out, in, kh, kw)
        return shape[1] * shape[2] * shape[3]
    if len(shape) == 2:  # linear weight (out, in)
        return shape[1]
    raise ValueError(f"unexpected weight shape {tuple(shape)}")


def init_params(config: ModelConfig, seed: int) -> ParamSet:
    """Deterministic init: weights uniform in +-1/sqrt(fan_in), biases zero."""
    module = _module_for(config)
    gen = torch.Generator().manual_seed(seed)
    arrays = {}
    for name, p in module.named_parameters():
        t = torch.empty(p.shape, dtype=torch.float32)
        if name.endswith("bias"):
            t.zero_()
        else:
            bound = 1.0 / math.sqrt(_fan_in(p.shape))
            t.uniform_(-bound, bound, generator=gen)
        arrays[name] = t
    return ParamSet(arrays=arrays, role="student")


def clone_params(params: ParamSet, role: str = "teacher") -> ParamSet:
    """Deep copy; mutating either copy never affects the other."""
    return ParamSet(arrays={k: v.detach().clone() for k, v in params.arrays.items()},
                    role=role)


def to_input_tensor(pixels, dtype=torch.float32) -> torch.Tensor:
    """(H, W, 3) [0,1] array -> (3, H, W) tensor."""
    import numpy as np

    arr = np.ascontiguousarray(np.asarray(pixels).transpose(2, 0, 1))
    return torch.from_numpy(arr).to(dtype)


@dataclass
class LossInputs:
    """Everything the total loss needs besides the student parameters.

    Pixel tensors arrive with noise already applied, so the loss is a pure
    function of (student params, inputs); the consistency tensors are the same
    underlying images under two independent noise draws.
    """

    labeled_pixels: torch.Tensor  # (N, C, H, W)
    labeled_masks: torch.Tensor  # (N, H, W) integer classes
    weights: LossWeights
    student_consistency_pixels: torch.Tensor | None = None
    teacher_consistency_pixels: torch.Tensor | None = None
    teacher: ParamSet | None = None


def compute_total_loss(student: ParamSet, config: ModelConfig,
                       inputs: LossInputs) -> LossBreakdown:
    """Supervised CE + Dice on labeled pixels plus the teacher-consistency MSE.

    Returns scalar tensors so the total stays differentiable; no gradients
    flow through the teacher.
    """
    probs = softmax_probs(unet_forward(student, config, inputs.labeled_pixels))
    ce = ce_loss(probs, inputs.labeled_masks)
    dice = dice_loss(probs, inputs.labeled_masks)
    if inputs.student_consistency_pixels is not None:
        if inputs.teacher is None or inputs.teacher_consistency_pixels is None:
            raise ValueError("consistency pixels given without a teacher")
        s_probs = softmax_probs(
            unet_forward(student, config, inputs.student_consistency_pixels))
        with torch.no_grad():
            t_probs = softmax_probs(
                unet_forward(inputs.teacher, config, inputs.teacher_consistency_pixels))
        cons = consistency_loss(s_probs, t_probs)
    else:
        cons = torch.zeros((), dtype=inputs.labeled_pixels.dtype)
    return total_loss(ce, dice, cons, inputs.weights)


def grad_total_loss(student: ParamSet, config: ModelConfig, inputs: LossInputs
                    ) -> tuple[dict[str, torch.Tensor], LossBreakdown]:
    """Gradient of the total loss for every student parameter, plus the loss values."""
    arrays = student.arrays
    if not config.attention_enabled:
        arrays = {k: v for k, v in arrays.items() if not k.startswith(_GATE_PREFIXES)}
    tracked = {k: v.detach().clone().requires_grad_(True) for k, v in arrays.items()}
    breakdown = compute_total_loss(ParamSet(tracked, student.role), config, inputs)
    grads = torch.autograd.grad(breakdown.total, list(tracked.values()))
    return ({k: g.detach() for k, g in zip(tracked, grads)}, breakdown.floats())
