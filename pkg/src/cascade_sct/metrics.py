"""Image-similarity and overlap metrics for synthetic CT evaluation."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import numpy as np
from scipy import ndimage, stats

from .errors import ConfigError, DataError, UndefinedCorrelationError
from .volume import BinaryMask3D, Volume3D

SSIM_WINDOW = 7
K1, K2 = 0.01, 0.03
BRAIN_FOREGROUND_HU = -500.0


def _arr(x) -> np.ndarray:
    if isinstance(x, (Volume3D, BinaryMask3D)):
        return np.asarray(x.data, dtype=np.float64)
    return np.asarray(x, dtype=np.float64)


def _same_shape(a, b):
    if a.shape != b.shape:
        raise DataError(f"shape mismatch: {a.shape} vs {b.shape}")


def dice_jaccard(a, b) -> tuple[float, float]:
    """Overlap of two binary masks; two empty masks score (1, 1)."""
    a = _arr(a).astype(bool)
    b = _arr(b).astype(bool)
    _same_shape(a, b)
    inter = int(np.count_nonzero(a & b))
    sa, sb = int(np.count_nonzero(a)), int(np.count_nonzero(b))
    union = sa + sb - inter
    if union == 0:
        return 1.0, 1.0
    return 2.0 * inter / (sa + sb), inter / union


def pearson(a, b) -> float:
    x, y = _arr(a).ravel(), _arr(b).ravel()
    _same_shape(x, y)
    if x.size < 2:
        raise UndefinedCorrelationError("correlation needs at least two voxels")
    dx, dy = x - x.mean(), y - y.mean()
    sxx, syy = float(dx @ dx), float(dy @ dy)
    if sxx == 0.0 or syy == 0.0:
        raise UndefinedCorrelationError("correlation undefined for a constant input")
    return float(np.clip((dx @ dy) / math.sqrt(sxx * syy), -1.0, 1.0))


def spearman(a, b) -> float:
    """Pearson correlation of midranks (ties share their average rank)."""
    x, y = _arr(a).ravel(), _arr(b).ravel()
    _same_shape(x, y)
    return pearson(stats.rankdata(x, method="average"), stats.rankdata(y, method="average"))


def ssim3d(a, b, data_range: float, window: int = SSIM_WINDOW) -> float:
    """Mean SSIM over all fully-contained uniform ``window``^3 neighbourhoods.

    Local statistics use population (1/N) moments.
    """
    x, y = _arr(a), _arr(b)
    _same_shape(x, y)
    if data_range <= 0:
        raise ConfigError("data_range must be positive")
    if any(s < window for s in x.shape):
        raise ConfigError(f"SSIM window {window} larger than volume {x.shape}")
    c1, c2 = (K1 * data_range) ** 2, (K2 * data_range) ** 2

    def local_mean(v):
        m = ndimage.uniform_filter(v, size=window, mode="constant")
        lo = window // 2
        hi = [s - (window - 1 - lo) for s in v.shape]
        return m[lo : hi[0], lo : hi[1], lo : hi[2]]

    mx, my = local_mean(x), local_mean(y)
    vx = local_mean(x * x) - mx * mx
    vy = local_mean(y * y) - my * my
    cxy = local_mean(x * y) - mx * my
    smap = ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
    return float(smap.mean())


def psnr(a, b, data_range: float) -> float:
    x, y = _arr(a), _arr(b)
    _same_shape(x, y)
    mse = float(np.mean((x - y) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(data_range**2 / mse)


def mae_region(pred, gt, region) -> float:
    p, g = _arr(pred), _arr(gt)
    _same_shape(p, g)
    r = _arr(region).astype(bool)
    _same_shape(p, r)
    if not r.any():
        raise DataError("MAE region is empty")
    return float(np.abs(p - g)[r].mean())


def brain_region(ct) -> np.ndarray:
    """Whole-head foreground of a ground-truth CT."""
    return _arr(ct) > BRAIN_FOREGROUND_HU


@dataclass
class MetricsRecord:
    subject_id: str
    pearson: float
    spearman: float
    dice: float
    jaccard: float
    ssim: float
    psnr_db: float
    mae_bone_hu: float
    mae_brain_hu: float

    def as_dict(self) -> dict:
        return asdict(self)


METRIC_FIELDS = tuple(f.name for f in fields(MetricsRecord) if f.name != "subject_id")
METRIC_LABELS = {
    "pearson": "Pearson",
    "spearman": "Spearman",
    "dice": "Dice",
    "jaccard": "Jaccard",
    "ssim": "SSIM",
    "psnr_db": "PSNR",
    "mae_bone_hu": "MAE (Bone)",
    "mae_brain_hu": "MAE (Brain)",
}
LOWER_IS_BETTER = {"mae_bone_hu", "mae_brain_hu"}


def compute_metrics(subject_id: str, sct, gt_ct, pred_skull, gt_skull) -> MetricsRecord:
    """Full metric record for one subject.

    Intensity metrics use the whole volume with data range max(gt) - min(gt);
    bone MAE uses the ground-truth skull mask, brain MAE the head foreground.
    """
    pred, gt = _arr(sct), _arr(gt_ct)
    data_range = float(gt.max() - gt.min()) or 1.0
    dice, jac = dice_jaccard(pred_skull, gt_skull)
    return MetricsRecord(
        subject_id=subject_id,
        pearson=pearson(pred, gt),
        spearman=spearman(pred, gt),
        dice=dice,
        jaccard=jac,
        ssim=ssim3d(pred, gt, data_range),
        psnr_db=psnr(pred, gt, data_range),
        mae_bone_hu=mae_region(pred, gt, gt_skull),
        mae_brain_hu=mae_region(pred, gt, brain_region(gt)),
    )
