"""Composite cascade objective.

Per patch::

    total = (1 - lam) * dice + lam * bce + mse_bone + soft_weight * mse_soft

``dice`` and ``bce`` cover the whole patch. ``mse_bone`` is the mean squared
error over the attention region R (predicted segmentation, binarized and
dilated); ``mse_soft`` covers the complement of R. Region construction does
not carry gradient.
"""

from __future__ import annotations

import enum
from dataclasses import asdict, dataclass

import numpy as np
import torch

from .errors import ConfigError
from .models.unet import ModelOutputs
from .morphology import StructuringElement, dilate_array

BCE_EPS = 1e-7


class EmptyRegionRule(str, enum.Enum):
    SKIP_TERM = "skip_term"
    ZERO_TERM = "zero_term"


@dataclass(frozen=True)
class LossConfig:
    lam: float = 0.5
    dice_smooth: float = 1e-5
    empty_region_rule: EmptyRegionRule = EmptyRegionRule.SKIP_TERM
    soft_weight: float = 1.0
    binarize_threshold: float = 0.5
    dilation_iters: int = 2
    element: StructuringElement = StructuringElement.FACE6

    def __post_init__(self):
        object.__setattr__(self, "empty_region_rule", EmptyRegionRule(self.empty_region_rule))
        object.__setattr__(self, "element", StructuringElement(self.element))
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError("lambda must lie in [0, 1]")
        if self.soft_weight < 0:
            raise ConfigError("soft_weight must be >= 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["empty_region_rule"] = self.empty_region_rule.value
        d["element"] = self.element.value
        return d


@dataclass
class LossBreakdown:
    dice: torch.Tensor
    bce: torch.Tensor
    mse_bone: torch.Tensor
    mse_soft: torch.Tensor
    total: torch.Tensor
    region_size: int
    mse_global: torch.Tensor | float = 0.0  # single-task objective

    def as_floats(self) -> dict:
        out = {}
        for k in ("dice", "bce", "mse_bone", "mse_soft", "mse_global", "total"):
            v = getattr(self, k)
            out[k] = float(v.detach()) if torch.is_tensor(v) else float(v)
        out["region_size"] = int(self.region_size)
        return out


def soft_dice_loss(pred_prob: torch.Tensor, gt: torch.Tensor, smooth: float = 1e-5) -> torch.Tensor:
    inter = (pred_prob * gt).sum()
    return 1.0 - (2.0 * inter + smooth) / (pred_prob.sum() + gt.sum() + smooth)


def bce_loss(pred_prob: torch.Tensor, gt: torch.Tensor, eps: float = BCE_EPS) -> torch.Tensor:
    p = pred_prob.clamp(eps, 1.0 - eps)
    return -(gt * torch.log(p) + (1.0 - gt) * torch.log1p(-p)).mean()


def masked_mse(pred: torch.Tensor, gt: torch.Tensor, region, rule=EmptyRegionRule.SKIP_TERM) -> torch.Tensor | None:
    """Mean squared error over ``region``; an empty region yields ``None``
    under ``skip_term`` and an exact zero under ``zero_term``."""
    if pred.shape != gt.shape:
        raise ValueError(f"pred {tuple(pred.shape)} and gt {tuple(gt.shape)} differ in shape")
    mask = torch.as_tensor(getattr(region, "voxels", region), dtype=torch.bool, device=pred.device)
    n = int(mask.sum())
    if n == 0:
        return None if EmptyRegionRule(rule) is EmptyRegionRule.SKIP_TERM else pred.sum() * 0.0
    return ((pred - gt)[mask] ** 2).sum() / n


def bone_region(seg_logits: torch.Tensor, cfg: LossConfig) -> np.ndarray:
    """Stop-gradient attention region from one patch's segmentation logits."""
    prob = torch.sigmoid(seg_logits.detach()).cpu().numpy()
    return dilate_array(prob > cfg.binarize_threshold, cfg.element, cfg.dilation_iters)


def _zero(ref: torch.Tensor) -> torch.Tensor:
    return ref.new_zeros(())


def composite_loss_single(seg_logits, bone, soft, gt_seg, gt_ct, cfg: LossConfig, regression: bool = True) -> LossBreakdown:
    """Loss for one patch; all tensors shaped ``(P_H, P_W, P_D)``.

    With ``regression=False`` only the segmentation terms are active.
    """
    prob = torch.sigmoid(seg_logits)
    dice = soft_dice_loss(prob, gt_seg, cfg.dice_smooth)
    bce = bce_loss(prob, gt_seg)
    mse_bone = mse_soft = _zero(dice)
    size = 0
    if regression:
        region = torch.from_numpy(bone_region(seg_logits, cfg)).to(seg_logits.device)
        size = int(region.sum())
        mb = masked_mse(bone, gt_ct, region, cfg.empty_region_rule)
        ms = masked_mse(soft, gt_ct, ~region, cfg.empty_region_rule)
        mse_bone = mb if mb is not None else mse_bone
        mse_soft = ms if ms is not None else mse_soft
    total = (1.0 - cfg.lam) * dice + cfg.lam * bce + mse_bone + cfg.soft_weight * mse_soft
    return LossBreakdown(dice, bce, mse_bone, mse_soft, total, size)


def _mean_breakdown(parts: list[LossBreakdown]) -> LossBreakdown:
    n = len(parts)
    fields = {}
    for k in ("dice", "bce", "mse_bone", "mse_soft", "total"):
        fields[k] = torch.stack([getattr(p, k) for p in parts]).sum() / n
    glob = [p.mse_global for p in parts]
    mse_global = torch.stack(glob).sum() / n if torch.is_tensor(glob[0]) else 0.0
    return LossBreakdown(region_size=sum(p.region_size for p in parts), mse_global=mse_global, **fields)


def composite_loss(outputs: ModelOutputs, gt_seg, gt_ct, cfg: LossConfig = LossConfig(), regression_mask=None) -> LossBreakdown:
    """Batch-mean of the per-patch cascade loss.

    ``outputs`` fields and targets are ``(B, 1, P, P, P)`` tensors.
    ``regression_mask`` (length B, bool) switches the HU terms off for
    segmentation-only patches.
    """
    B = outputs.seg_logits.shape[0]
    parts = []
    for i in range(B):
        reg = True if regression_mask is None else bool(regression_mask[i])
        parts.append(
            composite_loss_single(
                outputs.seg_logits[i, 0], outputs.bone_hu[i, 0], outputs.soft_hu[i, 0],
                gt_seg[i, 0], gt_ct[i, 0], cfg, reg,
            )
        )
    return _mean_breakdown(parts)


def single_task_loss(outputs: ModelOutputs, gt_ct) -> LossBreakdown:
    """Global MSE for the direct MRI-to-CT baseline."""
    mse = ((outputs.direct - gt_ct) ** 2).mean()
    z = _zero(mse)
    return LossBreakdown(z, z, z, z, mse, region_size=0, mse_global=mse)
