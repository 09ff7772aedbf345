"""Spatial propagation for the classification branch.

par_refine diffuses score maps with a pixel-adaptive kernel: for each pixel
the dilated 8-neighborhood is weighted by a Gaussian affinity in color and
position, weights softmax-normalized per pixel, and the (channel-shared)
convex combination applied for a fixed number of iterations. bsp_wrap and
fixed_bg_wrap attach a background channel before propagation; mlp_affinity
projects the encoder's attention stack into a symmetric affinity matrix for
the affinity loss.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import KernelConfig
from .errors import ConfigError
from .model import SegMap, SegSource

_NEIGHBORHOOD8 = ((-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1))


@dataclass
class PropagationKernel:
    offsets: tuple[tuple[int, int], ...]
    sigma_rgb: float = 0.3
    sigma_pos: float = 2.0
    iterations: int = 10

    @classmethod
    def from_config(cls, cfg: KernelConfig) -> "PropagationKernel":
        offsets = []
        for d in cfg.dilations:
            for dy, dx in _NEIGHBORHOOD8:
                o = (dy * d, dx * d)
                if o not in offsets:
                    offsets.append(o)
        return cls(offsets=tuple(offsets), sigma_rgb=cfg.sigma_rgb,
                   sigma_pos=cfg.sigma_pos, iterations=cfg.iterations)


class BgOrigin(Enum):
    FIXED_THRESHOLD = "fixed"
    SEG_BRANCH = "seg"


@dataclass
class BackgroundScore:
    map: torch.Tensor      # H x W or B x H x W, values in [0, 1]
    origin: BgOrigin


def _shift(x: torch.Tensor, dy: int, dx: int) -> torch.Tensor:
    """out[..., i, j] = x[..., i+dy, j+dx], zero outside the image."""
    h, w = x.shape[-2:]
    pad = (max(0, -dx), max(0, dx), max(0, -dy), max(0, dy))
    y = F.pad(x, pad)
    i0, j0 = max(0, dy), max(0, dx)
    return y[..., i0:i0 + h, j0:j0 + w]


def _pair_weights(image: torch.Tensor, positions, kernel: PropagationKernel):
    """Softmax-normalized neighbor weights, one map per offset.

    Returns (weights O x B x 1 x H x W, isolated B x 1 x H x W); offsets
    outside the image get zero weight, (0,0) entries are excluded.
    """
    b, _, h, w = image.shape
    ones = torch.ones(b, 1, h, w, dtype=image.dtype, device=image.device)
    inv_rgb = 1.0 / (2 * kernel.sigma_rgb ** 2)
    inv_pos = 1.0 / (2 * kernel.sigma_pos ** 2)
    logits = []
    for dy, dx in positions:
        if dy == 0 and dx == 0:
            logits.append(torch.full_like(ones, float("-inf")))
            continue
        valid = _shift(ones, dy, dx)
        col = ((image - _shift(image, dy, dx)) ** 2).sum(dim=1, keepdim=True)
        logit = -col * inv_rgb - float(dy * dy + dx * dx) * inv_pos
        logits.append(torch.where(valid > 0, logit, torch.full_like(logit, float("-inf"))))
    stack = torch.stack(logits, dim=0)
    peak = stack.amax(dim=0, keepdim=True)
    peak = torch.where(torch.isfinite(peak), peak, torch.zeros_like(peak))
    expw = torch.exp(stack - peak)
    expw = torch.where(torch.isfinite(stack), expw, torch.zeros_like(expw))
    norm = expw.sum(dim=0)
    return expw / norm.clamp_min(1e-30), (norm == 0)


def par_refine(scores: torch.Tensor, image: torch.Tensor,
               kernel: PropagationKernel) -> torch.Tensor:
    """Iterated pixel-adaptive neighborhood averaging, channel-shared weights.

    scores: c x H x W or B x c x H x W; image: matching 3-channel RGB in [0,1].
    Out-of-image neighbors carry zero weight; a pixel with no valid neighbor
    keeps its value.
    """
    squeeze = scores.dim() == 3
    if squeeze:
        scores = scores.unsqueeze(0)
        image = image.unsqueeze(0) if image.dim() == 3 else image
    if kernel.iterations == 0:
        out = scores
        return out.squeeze(0) if squeeze else out
    h, w = scores.shape[-2:]
    weights, isolated = _pair_weights(image, kernel.offsets, kernel)
    pad = max(max(abs(dy), abs(dx)) for dy, dx in kernel.offsets)
    out = scores
    for _ in range(kernel.iterations):
        padded = F.pad(out, (pad, pad, pad, pad))
        acc = None
        for o, (dy, dx) in enumerate(kernel.offsets):
            view = padded[..., pad + dy:pad + dy + h, pad + dx:pad + dx + w]
            term = weights[o] * view
            acc = term if acc is None else acc + term
        out = torch.where(isolated, out, acc)
    return out.squeeze(0) if squeeze else out


def fixed_bg_wrap(seed_up: torch.Tensor, beta: float) -> torch.Tensor:
    """Prepend a constant background channel to the upsampled seed."""
    if not 0.0 < beta < 1.0:
        raise ConfigError(f"fixed background threshold must be in (0, 1), got {beta}")
    squeeze = seed_up.dim() == 3
    x = seed_up.unsqueeze(0) if squeeze else seed_up
    bg = torch.full_like(x[:, :1], beta)
    out = torch.cat([bg, x], dim=1)
    return out.squeeze(0) if squeeze else out


def bsp_wrap(seed_up: torch.Tensor, bg: BackgroundScore) -> torch.Tensor:
    """Prepend the segmentation branch's own background score (detached)."""
    if bg.origin is not BgOrigin.SEG_BRANCH:
        raise ValueError(f"bsp_wrap requires a SEG_BRANCH background, got {bg.origin}")
    squeeze = seed_up.dim() == 3
    x = seed_up.unsqueeze(0) if squeeze else seed_up
    m = bg.map.unsqueeze(0) if bg.map.dim() == 2 else bg.map
    if m.shape[-2:] != x.shape[-2:] or m.shape[0] != x.shape[0]:
        raise ValueError(
            f"background map shape {tuple(bg.map.shape)} does not match seed "
            f"shape {tuple(seed_up.shape)}")
    # feedback into the segmentation branch stays confined to the explicit loss
    out = torch.cat([m.unsqueeze(1).detach(), x], dim=1)
    return out.squeeze(0) if squeeze else out


def classification_segmap(s_hat: torch.Tensor, image: torch.Tensor,
                          kernel: PropagationKernel) -> SegMap:
    """Propagate the wrapped map and clamp scores back onto [0, 1]."""
    refined = par_refine(s_hat, image, kernel)
    return SegMap(probs=refined.clamp(0.0, 1.0), source=SegSource.CLS_BRANCH)


def mlp_affinity(attention: torch.Tensor, weight: torch.Tensor,
                 bias: torch.Tensor) -> torch.Tensor:
    """Project m attention maps into one symmetric affinity matrix in [0, 1].

    attention: m x hw x hw or B x m x hw x hw; weight: m; bias: scalar.
    """
    squeeze = attention.dim() == 3
    x = attention.unsqueeze(0) if squeeze else attention
    logits = torch.einsum("bmpq,m->bpq", x, weight) + bias
    a = torch.sigmoid(logits)
    a = 0.5 * (a + a.transpose(-2, -1))
    return a.squeeze(0) if squeeze else a


class AffinityHead(nn.Module):
    """Learned per-head mixing of attention maps into the affinity matrix."""

    def __init__(self, heads: int):
        super().__init__()
        self.weight = nn.Parameter(torch.full((heads,), 1.0 / heads))
        self.bias = nn.Parameter(torch.zeros(()))

    def forward(self, attention: torch.Tensor) -> torch.Tensor:
        return mlp_affinity(attention, self.weight, self.bias)
