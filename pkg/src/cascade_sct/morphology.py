"""Binary dilation, cascade attention regions and single-task post-processing."""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import ndimage

from .errors import ConfigError, DataError
from .volume import HU_FLOOR, BinaryMask3D, Volume3D


class StructuringElement(str, enum.Enum):
    FACE6 = "face6"
    EDGE18 = "edge18"
    VERTEX26 = "vertex26"

    def structure(self) -> np.ndarray:
        rank = {"face6": 1, "edge18": 2, "vertex26": 3}[self.value]
        return ndimage.generate_binary_structure(3, rank)


class RegionSource(str, enum.Enum):
    PREDICTED = "predicted_seg"
    GROUND_TRUTH = "ground_truth_seg"


def _mask_array(mask) -> np.ndarray:
    if isinstance(mask, BinaryMask3D):
        return mask.as_bool()
    return np.asarray(mask).astype(bool)


def dilate_array(mask, element=StructuringElement.FACE6, iterations: int = 1) -> np.ndarray:
    """Boolean-array dilation; voxels pushed past the border are dropped."""
    if iterations < 0:
        raise ConfigError("iterations must be >= 0")
    arr = _mask_array(mask)
    if iterations == 0 or not arr.any():
        return arr.copy()
    # scipy treats iterations=0 as "until convergence", so it is handled above
    return ndimage.binary_dilation(
        arr, structure=StructuringElement(element).structure(), iterations=iterations, border_value=0
    )


def binary_dilate(mask, element=StructuringElement.FACE6, iterations: int = 1) -> BinaryMask3D:
    return BinaryMask3D(dilate_array(mask, element, iterations))


@dataclass(frozen=True, eq=False)
class AttentionRegion:
    voxels: np.ndarray  # bool, patch shape
    source: RegionSource = RegionSource.PREDICTED
    dilation_iters: int = 2

    @property
    def size(self) -> int:
        return int(self.voxels.sum())


def attention_region(
    seg_prob,
    binarize_threshold: float = 0.5,
    iterations: int = 2,
    element=StructuringElement.FACE6,
    source=RegionSource.PREDICTED,
) -> AttentionRegion:
    prob = np.asarray(seg_prob, dtype=np.float64)
    if prob.size and (prob.min() < 0.0 or prob.max() > 1.0):
        raise DataError("segmentation probabilities must lie in [0, 1]")
    binary = prob > binarize_threshold
    return AttentionRegion(dilate_array(binary, element, iterations), RegionSource(source), iterations)


def group_mean_template(ct_skull_masks: Sequence[BinaryMask3D]) -> BinaryMask3D:
    """Mean of the masks, kept where the mean is strictly above 0.5, dilated once (face6)."""
    if not ct_skull_masks:
        raise DataError("group_mean_template needs at least one mask")
    dims = {m.dims for m in ct_skull_masks}
    if len(dims) != 1:
        raise DataError(f"template masks disagree in dims: {sorted(dims)}")
    mean = np.mean([m.data.astype(np.float64) for m in ct_skull_masks], axis=0)
    return binary_dilate(mean > 0.5, StructuringElement.FACE6, 1)


def postprocess_single_task(sct: Volume3D, template: BinaryMask3D, hu_threshold: float = 250.0) -> Volume3D:
    """Force voxels outside the template to the air floor; leave the inside untouched.

    ``hu_threshold`` only affects :func:`single_task_skull_mask`; it is accepted
    here so both calls can share one configuration.
    """
    if sct.dims != template.dims:
        raise DataError(f"sCT dims {sct.dims} do not match template dims {template.dims}")
    out = np.where(template.as_bool(), sct.data, np.float32(HU_FLOOR))
    return sct.with_data(out)


def single_task_skull_mask(sct: Volume3D, template: BinaryMask3D, hu_threshold: float = 250.0) -> BinaryMask3D:
    if sct.dims != template.dims:
        raise DataError(f"sCT dims {sct.dims} do not match template dims {template.dims}")
    return BinaryMask3D(template.as_bool() & (sct.data > hu_threshold))
