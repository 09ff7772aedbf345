"""Shared encoder, classification branch, decoder + segmentation branch.

The encoder is a small 4-stage convolutional pyramid (strides 4, 8, 16, 32
with the default stem; a stride-2 stem halves every level for small inputs)
with one multi-head self-attention block at stage 4; the attention maps are
exposed for the affinity loss. Both heads are 1x1 convolutions. Object-aware
scaling (ofd_scale) multiplies every pyramid level by the upsampled maximum
object score from the classification branch.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from enum import Enum

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import ModelConfig
from .errors import DimensionError

STRIDES = (4, 8, 16, 32)


@dataclass
class ImageBatch:
    pixels: torch.Tensor   # B x 3 x H x W, normalized
    labels: torch.Tensor   # B x K, entries 0/1
    ids: list[str]


@dataclass
class MultiLevelFeatures:
    levels: list[torch.Tensor]    # four tensors, level i at the encoder's stride i
    attention: torch.Tensor       # B x m x hw x hw over the stage-4 grid


class SegSource(Enum):
    SEG_BRANCH = "seg"
    CLS_BRANCH = "cls"


@dataclass
class SegMap:
    probs: torch.Tensor           # B x (K+1) x H x W, channel 0 = background
    source: SegSource


def _gn(ch: int) -> nn.GroupNorm:
    return nn.GroupNorm(min(4, ch), ch)


class _ConvBlock(nn.Module):
    def __init__(self, cin: int, cout: int, stride: int):
        super().__init__()
        self.conv = nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False)
        self.norm = _gn(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, stride=1, padding=1, bias=False)
        self.norm2 = _gn(cout)

    def forward(self, x):
        x = F.gelu(self.norm(self.conv(x)))
        return F.gelu(self.norm2(self.conv2(x)))


class _SelfAttention(nn.Module):
    """Single attention block over the stage-4 token grid."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.scale = (dim // heads) ** -0.5
        self.qkv = nn.Linear(dim, dim * 3, bias=True)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x):
        # x: B x C x h x w -> tokens B x hw x C
        b, c, h, w = x.shape
        t = x.flatten(2).transpose(1, 2)
        qkv = self.qkv(t).reshape(b, h * w, 3, self.heads, c // self.heads)
        q, k, v = qkv.permute(2, 0, 3, 1, 4)
        attn = torch.softmax((q @ k.transpose(-2, -1)) * self.scale, dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, h * w, c)
        out = t + self.proj(out)
        return out.transpose(1, 2).reshape(b, c, h, w), attn


class Encoder(nn.Module):
    """4-level pyramid; forward returns MultiLevelFeatures."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        w = cfg.widths
        self.strides = cfg.strides
        # same parameter shapes for either stem; only the second block's
        # stride changes
        self.stage1 = nn.Sequential(_ConvBlock(3, w[0] // 2, 2),
                                    _ConvBlock(w[0] // 2, w[0], cfg.stem_stride // 2))
        self.stage2 = _ConvBlock(w[0], w[1], 2)
        self.stage3 = _ConvBlock(w[1], w[2], 2)
        self.stage4 = _ConvBlock(w[2], w[3], 2)
        self.attn = _SelfAttention(w[3], cfg.attn_heads)

    def forward(self, pixels: torch.Tensor) -> MultiLevelFeatures:
        x1 = self.stage1(pixels)
        x2 = self.stage2(x1)
        x3 = self.stage3(x2)
        x4 = self.stage4(x3)
        x4, attn = self.attn(x4)
        return MultiLevelFeatures(levels=[x1, x2, x3, x4], attention=attn)


class Decoder(nn.Module):
    """Project each level, upsample to the stride-4 grid, concatenate, fuse,
    then upsample the fused map to full resolution."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.decoder_dim
        self.proj = nn.ModuleList([nn.Conv2d(c, d, 1) for c in cfg.widths])
        self.fuse = nn.Conv2d(4 * d, d, 1)

    def forward(self, levels: list[torch.Tensor], out_size: tuple[int, int]) -> torch.Tensor:
        base = levels[0].shape[-2:]
        parts = []
        for p, x in zip(self.proj, levels):
            y = p(x)
            if y.shape[-2:] != base:
                y = F.interpolate(y, size=base, mode="bilinear", align_corners=False)
            parts.append(y)
        fused = self.fuse(torch.cat(parts, dim=1))
        return F.interpolate(fused, size=out_size, mode="bilinear", align_corners=False)


class TwinBranchNet(nn.Module):
    """Shared encoder with a classification head and a decoded segmentation head."""

    def __init__(self, cfg: ModelConfig, num_classes: int):
        super().__init__()
        self.cfg = cfg
        self.num_classes = num_classes
        self.encoder = Encoder(cfg)
        self.cls_head = nn.Conv2d(cfg.widths[-1], num_classes, 1, bias=False)
        self.decoder = Decoder(cfg)
        self.seg_head = nn.Conv2d(cfg.decoder_dim, num_classes + 1, 1)


def extract_features(batch: ImageBatch, encoder: Encoder) -> MultiLevelFeatures:
    h, w = batch.pixels.shape[-2:]
    s = getattr(encoder, "strides", STRIDES)[-1]
    if h % s != 0 or w % s != 0:
        raise DimensionError(f"input {h}x{w} is not divisible by encoder stride {s}")
    return encoder(batch.pixels)


def localization_seed(x4: torch.Tensor, cls_head: nn.Module) -> torch.Tensor:
    """Raw per-class score map C at the stage-4 grid (B x K x h x w)."""
    return cls_head(x4)


def classify_image(x4: torch.Tensor, cls_head: nn.Module) -> torch.Tensor:
    """Image-level logits: spatial max of the per-class score map.

    Max pooling after the 1x1 head keeps the logit equal to the seed's
    spatial peak for every class, which ties the two outputs together.
    """
    if not torch.isfinite(x4).all():
        raise ValueError("non-finite values in stage-4 features")
    return localization_seed(x4, cls_head).amax(dim=(-2, -1))


def object_prior(normalized_seed: torch.Tensor) -> torch.Tensor:
    """Maximum object score per location: B x K x h x w -> B x 1 x h x w."""
    return normalized_seed.amax(dim=-3, keepdim=True)


def upsample_bilinear(x: torch.Tensor, target: tuple[int, int]) -> torch.Tensor:
    """Bilinear (align_corners=False) upsampling; refuses to downsample."""
    squeeze = x.dim() == 3
    if squeeze:
        x = x.unsqueeze(0)
    a, b = x.shape[-2:]
    A, B = target
    if A < a or B < b:
        raise ValueError(f"target {target} is smaller than source ({a}, {b})")
    if (A, B) != (a, b):
        x = F.interpolate(x, size=(A, B), mode="bilinear", align_corners=False)
    return x.squeeze(0) if squeeze else x


def ofd_scale(features: MultiLevelFeatures, prior: torch.Tensor,
              detach_prior: bool = True) -> MultiLevelFeatures:
    """Scale every pyramid level by the upsampled object prior.

    prior: B x 1 x h x w in [0, 1] at the stage-4 grid.
    """
    if detach_prior:
        prior = prior.detach()
    scaled = []
    for x in features.levels:
        p = prior
        if p.shape[-2:] != x.shape[-2:]:
            p = upsample_bilinear(p, tuple(x.shape[-2:]))
        scaled.append(x * p)
    return replace(features, levels=scaled)


def segment(features: MultiLevelFeatures, decoder: Decoder, seg_head: nn.Module,
            out_size: tuple[int, int]) -> SegMap:
    """Per-pixel probabilities over background + K classes at full resolution."""
    z = decoder(features.levels, out_size)
    logits = seg_head(z)
    return SegMap(probs=torch.softmax(logits, dim=1), source=SegSource.SEG_BRANCH)
