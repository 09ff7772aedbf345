"""Interactional supervision: confidence masks, cross losses, and the
gated total objective.

Both cross losses consume gradient-stopped pseudo labels and masks; only
the predicted map in the first argument receives gradient. Empty masks
yield a zero loss that stays attached to the graph.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

from .config import SupervisionConfig
from .model import SegMap
from .pseudo import IGNORE_INDEX

RENORM_DELTA = 1e-8
LOG_EPS = 1e-12


def _probs(s) -> torch.Tensor:
    return s.probs if isinstance(s, SegMap) else s


def mask_confident_cls(s_c, sigma_c: float) -> torch.Tensor:
    """M^c: locations where the top propagated score clears sigma_c (strict)."""
    probs = _probs(s_c)
    return (probs.amax(dim=-3) > sigma_c).detach()


def mask_confident_seg(s_s, y_s: torch.Tensor, sigma_s: float) -> torch.Tensor:
    """M^s: confident non-background predictions of the segmentation branch."""
    probs = _probs(s_s)
    return ((y_s != 0) & (probs.amax(dim=-3) > sigma_s)).detach()


def _check_labels(y: torch.Tensor, num_channels: int) -> None:
    valid = (y >= 0) & (y < num_channels) | (y == IGNORE_INDEX)
    if not valid.all():
        bad = y[~valid].flatten()[0].item()
        raise ValueError(f"label value {bad} outside 0..{num_channels - 1} / ignore")


def _masked_ce(logp_true: torch.Tensor, mask: torch.Tensor, anchor: torch.Tensor) -> torch.Tensor:
    count = mask.sum()
    if count.item() == 0:
        return anchor.sum() * 0.0
    return -(logp_true * mask).sum() / count


def loss_c2s(s_s, y_c: torch.Tensor, m_c: torch.Tensor) -> torch.Tensor:
    """Cross-entropy of the segmentation map against Y^c on M^c."""
    probs = _probs(s_s)
    y = y_c.detach()
    mask = m_c.detach().bool() & (y != IGNORE_INDEX)
    _check_labels(y, probs.shape[-3])
    y_safe = torch.where(mask, y, torch.zeros_like(y))
    p_true = probs.gather(-3, y_safe.unsqueeze(-3)).squeeze(-3)
    return _masked_ce(p_true.clamp_min(LOG_EPS).log(), mask, probs)


def loss_s2c(s_c, y_s: torch.Tensor, m_s: torch.Tensor) -> torch.Tensor:
    """Cross-entropy of the renormalized propagated map against Y^s on M^s.

    Propagated scores are not softmax outputs, so columns are renormalized
    to a distribution first; the delta keeps all-zero columns uniform.
    """
    probs = _probs(s_c)
    k1 = probs.shape[-3]
    y = y_s.detach()
    mask = m_s.detach().bool() & (y != IGNORE_INDEX)
    _check_labels(y, k1)
    q = (probs + RENORM_DELTA) / (probs.sum(dim=-3, keepdim=True) + k1 * RENORM_DELTA)
    y_safe = torch.where(mask, y, torch.zeros_like(y))
    q_true = q.gather(-3, y_safe.unsqueeze(-3)).squeeze(-3)
    return _masked_ce(q_true.clamp_min(LOG_EPS).log(), mask, probs)


def loss_cls(c: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Multi-label soft-margin loss, mean over classes (and batch)."""
    return (y * F.softplus(-c) + (1.0 - y) * F.softplus(c)).mean()


def loss_affinity(a: torch.Tensor, y_low: torch.Tensor) -> torch.Tensor:
    """Balanced pairwise BCE against pseudo affinity labels.

    a: hw x hw (or B x hw x hw) in [0, 1]; y_low: h x w labels with ignore.
    Positive pairs share a non-ignore label, negative pairs differ; the two
    sides are averaged separately and summed with weight 1/2 each.
    """
    squeeze = a.dim() == 2
    if squeeze:
        a = a.unsqueeze(0)
        y_low = y_low.unsqueeze(0)
    b = a.shape[0]
    y = y_low.detach().reshape(b, -1)
    valid = (y != IGNORE_INDEX)
    pair_valid = valid.unsqueeze(2) & valid.unsqueeze(1)
    same = (y.unsqueeze(2) == y.unsqueeze(1)) & pair_valid
    diff = (~(y.unsqueeze(2) == y.unsqueeze(1))) & pair_valid
    n_pos = same.sum()
    n_neg = diff.sum()
    total = a.sum() * 0.0
    if n_pos.item() > 0:
        total = total + 0.5 * (-(a.clamp_min(LOG_EPS).log()) * same).sum() / n_pos
    if n_neg.item() > 0:
        total = total + 0.5 * (-((1.0 - a).clamp_min(LOG_EPS).log()) * diff).sum() / n_neg
    return total


@dataclass
class LossReport:
    l_cls: float
    l_c2s: float
    l_s2c: float
    l_aff: float
    total: torch.Tensor
    active_flags: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        total = self.total
        if isinstance(total, torch.Tensor):
            total = float(total.detach())
        return {
            "l_cls": self.l_cls, "l_c2s": self.l_c2s, "l_s2c": self.l_s2c,
            "l_aff": self.l_aff, "total": total,
            **{f"on_{k}": int(v) for k, v in self.active_flags.items()},
        }


def total_loss(l_cls: torch.Tensor, l_c2s: torch.Tensor, l_s2c: torch.Tensor,
               l_aff: torch.Tensor, cfg: SupervisionConfig, iteration: int,
               c2s_enabled: bool = True, s2c_enabled: bool = True) -> LossReport:
    """Gated weighted sum; inactive terms are excluded from the graph."""
    c2s_on = iteration >= cfg.warmup_c2s and c2s_enabled
    s2c_on = iteration >= cfg.warmup_s2c and s2c_enabled
    aff_on = cfg.lambda3 > 0
    total = l_cls
    if c2s_on:
        total = total + cfg.lambda1 * l_c2s
    if s2c_on:
        total = total + cfg.lambda2 * l_s2c
    if aff_on:
        total = total + cfg.lambda3 * l_aff
    return LossReport(
        l_cls=float(l_cls.detach()), l_c2s=float(l_c2s.detach()),
        l_s2c=float(l_s2c.detach()), l_aff=float(l_aff.detach()),
        total=total,
        active_flags={"cls": True, "c2s": c2s_on, "s2c": s2c_on, "aff": aff_on},
    )
