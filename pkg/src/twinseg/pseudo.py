"""Pseudo-annotation machinery.

Branch outputs become integer label maps through per-class normalization,
absent-class filtering, and channel argmax (ties to the lowest index, so
background wins). Multi-scale/flip fusion averages probability maps for
pseudo-label export.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .model import SegMap, SegSource

IGNORE_INDEX = 255
# finite stand-in for -inf: survives interpolation and propagation without
# producing NaNs, yet can never win an argmax after clamping to [0, 1]
NEG_SURROGATE = -1.0e9

SEED_NORM_EPS = 1e-5


def seed_normalize(raw: torch.Tensor) -> torch.Tensor:
    """ReLU then per-class spatial max normalization onto [0, 1].

    raw: ... x K x h x w (batched or not); the max is taken per class map.
    """
    v = raw.relu()
    peak = v.amax(dim=(-2, -1), keepdim=True)
    return v / (peak + SEED_NORM_EPS)


def filter_absent_classes(scores: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Exclude object channels whose image-level label is 0.

    scores: (K or K+1) x H x W, or batched with a leading dim; a K+1 map
    keeps channel 0 (background) untouched. Excluded channels are set to a
    large negative surrogate so no argmax can select them.
    """
    squeeze = scores.dim() == 3
    if squeeze:
        scores = scores.unsqueeze(0)
        y = y.unsqueeze(0) if y.dim() == 1 else y
    if (y.sum(dim=1) == 0).any():
        raise ValueError("image-level label vector has no positive class")
    b, c, h, w = scores.shape
    k = y.shape[1]
    if c == k:
        keep = y
    elif c == k + 1:
        keep = torch.cat([torch.ones(b, 1, dtype=y.dtype, device=y.device), y], dim=1)
    else:
        raise ValueError(f"scores have {c} channels but labels describe {k} classes")
    keep = keep.view(b, c, 1, 1).bool()
    out = torch.where(keep, scores, torch.full_like(scores, NEG_SURROGATE))
    return out.squeeze(0) if squeeze else out


def argmax_labels(s: SegMap | torch.Tensor) -> torch.Tensor:
    """Per-pixel channel argmax; ties break to the lowest channel index."""
    probs = s.probs if isinstance(s, SegMap) else s
    return probs.argmax(dim=-3)


def reliable_labels(labels: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Replace label entries outside the confidence mask with ignore."""
    return torch.where(mask.bool(), labels, torch.full_like(labels, IGNORE_INDEX))


def downsample_labels_nearest(labels: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    """Nearest-neighbor downsampling for integer label maps."""
    squeeze = labels.dim() == 2
    x = labels if not squeeze else labels.unsqueeze(0)
    x = F.interpolate(x.unsqueeze(1).float(), size=size, mode="nearest").squeeze(1).long()
    return x.squeeze(0) if squeeze else x


def _snap32(v: float) -> int:
    return max(32, int(round(v / 32)) * 32)


def fuse_multiscale(infer: Callable[[torch.Tensor], torch.Tensor], image: torch.Tensor,
                    scales: Sequence[float], flip: bool) -> SegMap:
    """Average probability maps over scales (and flips), then renormalize.

    infer maps a 3 x h x w image to a (K+1) x h x w probability tensor.
    Scaled sizes snap to multiples of 32 to satisfy the encoder stride.
    """
    if not scales:
        raise ValueError("scales must be non-empty")
    h, w = image.shape[-2:]
    acc = None
    for s in scales:
        nh, nw = _snap32(h * s), _snap32(w * s)
        variants = [False, True] if flip else [False]
        for flipped in variants:
            x = image
            if flipped:
                x = torch.flip(x, dims=[-1])
            if (nh, nw) != (h, w):
                x = F.interpolate(x.unsqueeze(0), size=(nh, nw), mode="bilinear",
                                  align_corners=False).squeeze(0)
            probs = infer(x)
            if probs.shape[-2:] != (h, w):
                probs = F.interpolate(probs.unsqueeze(0), size=(h, w), mode="bilinear",
                                      align_corners=False).squeeze(0)
            if flipped:
                probs = torch.flip(probs, dims=[-1])
            acc = probs if acc is None else acc + probs
    fused = acc / acc.sum(dim=0, keepdim=True).clamp_min(1e-12)
    return SegMap(probs=fused, source=SegSource.SEG_BRANCH)


def export_label_png(labels: torch.Tensor, path) -> None:
    """Write an integer label map as a single-channel 8-bit PNG."""
    arr = labels.detach().cpu().numpy().astype(np.uint8)
    Image.fromarray(arr, mode="L").save(path)


def load_label_png(path) -> torch.Tensor:
    with Image.open(path) as im:
        return torch.from_numpy(np.asarray(im, dtype=np.int64))
