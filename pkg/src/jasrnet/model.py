"""JASRNet: shared encoder, fused deep features, SR and alignment heads."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import NamedTuple, Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

FUSION_MODES = ("add", "concat", "off")
HEADS = ("sr_only", "align_only", "both")


@dataclass(frozen=True)
class ModelConfig:
    channels: int = 128
    extraction_blocks: int = 32
    alignment_stages: int = 3
    num_landmarks: int = 68
    fusion_mode: str = "add"
    long_skip: bool = True
    heads: str = "both"
    input_size: int = 128
    heatmap_size: int = 16

    def violations(self) -> list:
        errs = []
        if self.channels <= 0:
            errs.append(f"channels must be > 0 (got {self.channels})")
        if self.extraction_blocks < 1:
            errs.append(f"extraction_blocks must be >= 1 (got {self.extraction_blocks})")
        if self.alignment_stages not in (1, 2, 3):
            errs.append(f"alignment_stages must be 1, 2 or 3 (got {self.alignment_stages})")
        if self.num_landmarks < 1:
            errs.append(f"num_landmarks must be >= 1 (got {self.num_landmarks})")
        if self.fusion_mode not in FUSION_MODES:
            errs.append(f"fusion_mode must be one of {FUSION_MODES} (got {self.fusion_mode!r})")
        if self.heads not in HEADS:
            errs.append(f"heads must be one of {HEADS} (got {self.heads!r})")
        if self.heatmap_size < 1 or self.input_size != 8 * self.heatmap_size:
            errs.append(f"input_size must be 8 * heatmap_size (got {self.input_size} / {self.heatmap_size})")
        if self.long_skip and self.heads == "align_only":
            errs.append("long_skip needs the SR head")
        return errs

    def validate(self) -> "ModelConfig":
        errs = self.violations()
        if errs:
            raise ValueError("invalid ModelConfig: " + "; ".join(errs))
        return self

    @property
    def has_sr(self) -> bool:
        return self.heads in ("sr_only", "both")

    @property
    def has_align(self) -> bool:
        return self.heads in ("align_only", "both")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


class FeaturePyramid(NamedTuple):
    h0: torch.Tensor
    h1: torch.Tensor
    h2: torch.Tensor
    h3: torch.Tensor


class ModelOutput(NamedTuple):
    sr_image: Optional[torch.Tensor]
    stage_heatmaps: Optional[list]

    @property
    def heatmaps(self) -> Optional[torch.Tensor]:
        return None if self.stage_heatmaps is None else self.stage_heatmaps[-1]


def conv3x3(cin, cout, stride=1):
    return nn.Conv2d(cin, cout, 3, stride=stride, padding=1)


class ResidualBlock(nn.Module):
    """conv-ReLU-conv plus identity, no normalization."""

    def __init__(self, channels):
        super().__init__()
        self.conv1 = conv3x3(channels, channels)
        self.conv2 = conv3x3(channels, channels)

    def forward(self, x):
        return x + self.conv2(F.relu(self.conv1(x)))


class Encoder(nn.Module):
    def __init__(self, c, t):
        super().__init__()
        self.conv = conv3x3(3, c)
        self.res1 = ResidualBlock(c)
        self.res2 = ResidualBlock(c)
        self.res3 = ResidualBlock(c)
        self.res4 = ResidualBlock(c)
        self.extract = nn.Sequential(*[ResidualBlock(c) for _ in range(t)])

    def forward(self, x):
        h0 = self.res1(F.relu(self.conv(x)))
        h1 = self.res2(F.max_pool2d(h0, 2))
        h2 = self.res3(F.max_pool2d(h1, 2))
        h3 = self.extract(self.res4(F.max_pool2d(h2, 2)))
        return FeaturePyramid(h0, h1, h2, h3)


class Fusion(nn.Module):
    """H = g3(g2(g1(H0) + H1) + H2) + H3 with stride-2 linear convolutions g.

    In ``concat`` mode each ``+`` becomes channel concatenation followed by a
    3x3 convolution back to C channels.
    """

    def __init__(self, c, mode):
        super().__init__()
        self.mode = mode
        self.g = nn.ModuleList([conv3x3(c, c, stride=2) for _ in range(3)])
        if mode == "concat":
            self.merge = nn.ModuleList([conv3x3(2 * c, c) for _ in range(3)])

    def forward(self, pyramid):
        skips = (pyramid.h1, pyramid.h2, pyramid.h3)
        x = pyramid.h0
        for i, (g, skip) in enumerate(zip(self.g, skips)):
            if self.mode == "add":
                x = g(x) + skip
            else:
                x = self.merge[i](torch.cat([g(x), skip], dim=1))
        return x


class SRHead(nn.Module):
    def __init__(self, c, long_skip):
        super().__init__()
        self.res1 = ResidualBlock(c)
        self.res2 = ResidualBlock(c)
        self.skip = nn.ModuleList([conv3x3(c, c) for _ in range(3)]) if long_skip else None
        self.up = nn.ModuleList([conv3x3(c, 4 * c) for _ in range(3)])
        self.out = conv3x3(c, 3)

    def forward(self, h, skip_source=None):
        x = self.res2(self.res1(h))
        if self.skip is not None:
            if skip_source is None:
                raise ValueError("long skip connection needs the encoder's first residual block output")
            s = skip_source
            for conv in self.skip:
                s = F.max_pool2d(F.relu(conv(s)), 2)
            x = x + s
        for conv in self.up:
            x = F.relu(F.pixel_shuffle(conv(x), 2))
        return self.out(x)


class AlignStage(nn.Module):
    def __init__(self, c, k, n_blocks, first):
        super().__init__()
        self.entry = None if first else conv3x3(c + k, c)
        self.blocks = nn.Sequential(*[ResidualBlock(c) for _ in range(n_blocks)])
        self.proj = nn.Conv2d(c, k, 1)

    def forward(self, h, prev=None):
        x = h if self.entry is None else F.relu(self.entry(torch.cat([h, prev], dim=1)))
        return self.proj(self.blocks(x))


class AlignHead(nn.Module):
    def __init__(self, c, k, stages):
        super().__init__()
        self.stages = nn.ModuleList(
            [AlignStage(c, k, 2, True)] + [AlignStage(c, k, 3, False) for _ in range(stages - 1)])

    def forward(self, h):
        out = []
        prev = None
        for stage in self.stages:
            prev = stage(h, prev)
            out.append(prev)
        return out


class JASRNet(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config.validate()
        c = config.channels
        self.encoder = Encoder(c, config.extraction_blocks)
        self.fusion = None if config.fusion_mode == "off" else Fusion(c, config.fusion_mode)
        self.sr = SRHead(c, config.long_skip) if config.has_sr else None
        self.align = (AlignHead(c, config.num_landmarks, config.alignment_stages)
                      if config.has_align else None)

    def encode(self, x) -> FeaturePyramid:
        n = self.config.input_size
        if x.dim() != 4 or x.shape[1] != 3 or x.shape[2] != n or x.shape[3] != n:
            raise ValueError(f"expected input N x 3 x {n} x {n}, got {tuple(x.shape)}")
        return self.encoder(x)

    def fuse(self, pyramid: FeaturePyramid):
        return pyramid.h3 if self.fusion is None else self.fusion(pyramid)

    def forward(self, x) -> ModelOutput:
        pyramid = self.encode(x)
        h = self.fuse(pyramid)
        sr = self.sr(h, pyramid.h0) if self.sr is not None else None
        hms = self.align(h) if self.align is not None else None
        return ModelOutput(sr, hms)


DAMPED_INIT_SCALE = 0.1


def _damped_weights(model: nn.Module) -> set:
    names = set()
    for name, m in model.named_modules():
        if isinstance(m, ResidualBlock):
            names.add(f"{name}.conv2.weight")
        elif isinstance(m, AlignStage):
            names.add(f"{name}.proj.weight")
        elif isinstance(m, SRHead):
            names.add(f"{name}.out.weight")
    return names


def init_parameters(model: nn.Module, seed: int, damping: float = DAMPED_INIT_SCALE) -> None:
    """He fan-in normal weights, zero biases, drawn from a private generator.

    The closing convolution of every residual branch and the two linear
    output projections are shrunk by ``damping`` so deep un-normalized
    stacks start near the identity with small outputs.
    """
    damped = _damped_weights(model)
    gen = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for name, p in model.named_parameters():
            if name.endswith(".bias"):
                p.zero_()
            else:
                fan_in = p[0].numel()
                std = (2.0 / fan_in) ** 0.5
                if name in damped:
                    std *= damping
                p.copy_(torch.randn(p.shape, generator=gen, dtype=torch.float64).mul_(std).to(p.dtype))


def build(config: ModelConfig, seed: int = 0, dtype=torch.float32) -> JASRNet:
    model = JASRNet(config)
    model.to(dtype)
    init_parameters(model, seed)
    return model


def count_parameters(config: ModelConfig) -> int:
    """Closed-form count of trainable scalars for ``config`` (no model is built)."""
    config.validate()
    c, k = config.channels, config.num_landmarks

    def conv(cin, cout, ks=3):
        return ks * ks * cin * cout + cout

    res = 2 * conv(c, c)
    n = conv(3, c) + 4 * res + config.extraction_blocks * res
    if config.fusion_mode == "add":
        n += 3 * conv(c, c)
    elif config.fusion_mode == "concat":
        n += 3 * conv(c, c) + 3 * conv(2 * c, c)
    if config.has_sr:
        n += 2 * res + 3 * conv(c, 4 * c) + conv(c, 3)
        if config.long_skip:
            n += 3 * conv(c, c)
    if config.has_align:
        n += 2 * res + conv(c, k, 1)
        n += (config.alignment_stages - 1) * (conv(c + k, c) + 3 * res + conv(c, k, 1))
    return n


def model_parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad)
