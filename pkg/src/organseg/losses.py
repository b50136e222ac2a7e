"""Hybrid segmentation/classification objective and its reference formulas.

All segmentation losses take probabilities ``[B, C, H, W]`` with the
background channel last (after softmax and, when enabled, recalibration),
never logits.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

PROB_FLOOR = 1e-7


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 1.0  # batch dice
    beta: float = 1.0  # spatially balanced focal
    gamma: float = 1.0  # region cross entropy

    def __post_init__(self):
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise ValueError("loss weights must be non-negative")

    @property
    def all_zero(self) -> bool:
        return self.alpha == 0 and self.beta == 0 and self.gamma == 0


@dataclass
class LossBreakdown:
    batch_dice: torch.Tensor
    sb_focal: torch.Tensor
    region_ce: torch.Tensor
    total: torch.Tensor

    def as_floats(self) -> dict:
        return {k: float(getattr(self, k).detach()) for k in ("batch_dice", "sb_focal", "region_ce", "total")}


def batch_dice_loss(p_hat, g, availability=None, smooth: float = 1.0):
    """Dice over the whole batch treated as one sample, organ classes only.

    A class contributes only if it has ground-truth mass in the batch among
    the samples where it is annotated; the loss is ``1 - mean`` of the
    contributing per-class dice values.
    """
    n_org = g.shape[1] - 1
    p = p_hat[:, :n_org]
    t = g[:, :n_org]
    if availability is not None:
        m = torch.as_tensor(availability, dtype=p.dtype, device=p.device)[..., None, None]
        p = p * m
        t = t * m
    inter = (p * t).sum(dim=(0, 2, 3))
    psum = p.sum(dim=(0, 2, 3))
    gsum = t.sum(dim=(0, 2, 3))
    present = gsum > 0
    if not bool(present.any()):
        warnings.warn("batch has no annotated organ voxels; batch dice contributes 0", stacklevel=2)
        return p_hat.sum() * 0.0
    dice = (2.0 * inter + smooth) / (psum + gsum + smooth)
    return 1.0 - dice[present].mean()


def sb_focal_loss(p_hat, g):
    """Focal term with exponent 2 and per-class inverse-volume weights.

    Normalized by the number of pixels in one slice; classes absent from
    the batch ground truth are skipped.
    """
    N = g.shape[-2] * g.shape[-1]
    p = p_hat.clamp(PROB_FLOOR, 1.0)
    per_class = (g * (1.0 - p) ** 2 * torch.log(p)).sum(dim=(0, 2, 3))
    volume = g.sum(dim=(0, 2, 3))
    present = volume > 0
    w = torch.where(present, 1.0 / torch.where(present, volume, torch.ones_like(volume)),
                    torch.zeros_like(volume))
    return -(w * per_class).sum() / N


def region_ce_loss(region_logits, labels):
    labels = torch.as_tensor(labels, dtype=torch.long, device=region_logits.device)
    R = region_logits.shape[-1]
    if labels.numel() and (int(labels.min()) < 0 or int(labels.max()) >= R):
        raise ValueError(f"region label out of range [0, {R})")
    return F.cross_entropy(region_logits, labels)


def hybrid_loss(p_hat, g, availability, region_logits, labels, weights: LossWeights,
                smooth: float = 1.0) -> LossBreakdown:
    bd = batch_dice_loss(p_hat, g, availability, smooth)
    sf = sb_focal_loss(p_hat, g)
    ce = region_ce_loss(region_logits, labels)
    total = weights.alpha * bd + weights.beta * sf + weights.gamma * ce
    return LossBreakdown(bd, sf, ce, total)


def dice_value(p, g):
    """Single-sample, single-class dice ``2 sum(p g) / (sum p + sum g)``."""
    return 2.0 * (p * g).sum() / (p.sum() + g.sum())


def dice_gradient_reference(p, g) -> np.ndarray:
    """Closed-form gradient of :func:`dice_value` with respect to ``p``."""
    p = np.asarray(p, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    denom = p.sum() + g.sum()
    if denom == 0:
        raise ZeroDivisionError("dice gradient undefined when p and g are both all-zero")
    return 2.0 * (g * np.sum(p + g) - np.sum(p * g)) / denom ** 2


def participation_frequency(organ_slice_count: int, total_slices: int, B: int) -> float:
    """Expected share of batches in which an organ contributes to batch dice."""
    if total_slices <= 0:
        raise ValueError("total_slices must be positive")
    if not 0 <= organ_slice_count <= total_slices:
        raise ValueError("organ_slice_count must lie in [0, total_slices]")
    if B < 1:
        raise ValueError("batch size must be >= 1")
    return min(organ_slice_count * B / total_slices, 1.0)


def frequency_table(counts: dict, total_slices: int, B: int = 16) -> dict:
    """Per-organ participation at batch size 1 and ``B``, plus the ratio of
    the most to least frequent organ under both."""
    rows = {
        name: {
            "slices": int(n),
            "freq_b1": participation_frequency(n, total_slices, 1),
            f"freq_b{B}": participation_frequency(n, total_slices, B),
        }
        for name, n in counts.items()
    }
    nonzero = {k: v for k, v in rows.items() if v["slices"] > 0}
    ratio = {}
    if len(nonzero) >= 2:
        hi = max(nonzero, key=lambda k: nonzero[k]["slices"])
        lo = min(nonzero, key=lambda k: nonzero[k]["slices"])
        ratio = {
            "most": hi, "least": lo,
            "ratio_b1": nonzero[hi]["freq_b1"] / nonzero[lo]["freq_b1"],
            f"ratio_b{B}": nonzero[hi][f"freq_b{B}"] / nonzero[lo][f"freq_b{B}"],
        }
    return {"total_slices": int(total_slices), "batch_size": B, "organs": rows, "ratio": ratio}
