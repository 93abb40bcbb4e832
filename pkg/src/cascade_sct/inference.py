"""Whole-volume synthesis by patch tiling, and per-subject evaluation."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from .errors import ConfigError
from .metrics import MetricsRecord, compute_metrics
from .models import Checkpoint, TaskMode, fuse_outputs
from .morphology import binary_dilate, postprocess_single_task, single_task_skull_mask
from .patching import build_patch_grid, reconstruct_array
from .phantom import PairedCase
from .volume import BinaryMask3D, IntensityKind, NormalizationRecord, Volume3D, denormalize_array, minmax_normalize

SEG_THRESHOLD = 0.5
SKULL_HU = 250.0


@dataclass
class Predictor:
    """A model plus what is needed to map its normalized output back to HU.

    ``model`` is any callable returning :class:`ModelOutputs` for a
    ``(B, 2, P, P, P)`` batch; it is called on patches in grid order.
    """

    model: object
    mode: TaskMode
    ct_norm: tuple[float, float]
    template: BinaryMask3D | None = None
    dtype: torch.dtype = torch.float32

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint, dtype=torch.float32) -> "Predictor":
        model = ckpt.build_model(dtype)
        model.eval()
        template = None
        if "template" in ckpt.aux:
            template = BinaryMask3D(ckpt.aux["template"].numpy() > 0.5)
        return cls(model, ckpt.mode, ckpt.ct_norm, template, dtype)


def _as_predictor(p) -> Predictor:
    return Predictor.from_checkpoint(p) if isinstance(p, Checkpoint) else p


def normalized_mri_stack(mri_pair) -> np.ndarray:
    if isinstance(mri_pair, PairedCase):
        vols = (mri_pair.mri_a, mri_pair.mri_b)
    elif isinstance(mri_pair, (tuple, list)):
        vols = tuple(mri_pair)
    else:
        arr = np.asarray(mri_pair)
        if arr.ndim != 4 or arr.shape[0] != 2:
            raise ConfigError(f"expected a 2-channel (2, H, W, D) MRI stack, got {arr.shape}")
        vols = tuple(Volume3D(a) for a in arr)
    if len(vols) != 2:
        raise ConfigError("the model consumes exactly two MRI channels")
    return np.stack([minmax_normalize(v)[0].data for v in vols])


def predict_volume(predictor: Predictor, stack: np.ndarray, patch, stride, batch_size: int = 8, mask=None):
    """Tile ``stack`` and return ``(sct_normalized, seg_prob)`` float64 arrays.

    ``seg_prob`` is ``None`` for single-task models. ``mask`` (full-volume
    binary) replaces the predicted segmentation in the fusion step.
    """
    dims = stack.shape[1:]
    grid = build_patch_grid(dims, patch, stride)
    px, py, pz = grid.patch
    sct_patches, seg_patches = [], []
    origins = list(grid)
    for start in range(0, len(origins), batch_size):
        chunk = origins[start : start + batch_size]
        x = torch.from_numpy(
            np.stack([stack[:, o[0] : o[0] + px, o[1] : o[1] + py, o[2] : o[2] + pz] for o in chunk]).astype(np.float64)
        ).to(predictor.dtype)
        with torch.no_grad():
            out = predictor.model(x)
            if predictor.mode is TaskMode.MULTITASK:
                m = None
                if mask is not None:
                    m = torch.from_numpy(
                        np.stack([mask[o[0] : o[0] + px, o[1] : o[1] + py, o[2] : o[2] + pz] for o in chunk])[:, None]
                    ).bool()
                fused = fuse_outputs(out, SEG_THRESHOLD, m)
                prob = torch.sigmoid(out.seg_logits)
                seg_patches.extend(zip(chunk, prob[:, 0].double().numpy()))
            else:
                fused = out.direct
        sct_patches.extend(zip(chunk, fused[:, 0].double().numpy()))
    sct = reconstruct_array(sct_patches, dims)
    seg = reconstruct_array(seg_patches, dims) if seg_patches else None
    return sct, seg


def synthesize_sct(
    predictor,
    mri_pair,
    patch=32,
    stride=16,
    batch_size: int = 8,
    reference_mask: BinaryMask3D | None = None,
    voxel_size_mm=(1.0, 1.0, 1.0),
) -> tuple[Volume3D, BinaryMask3D]:
    """sCT in HU and the predicted skull mask for one subject.

    ``reference_mask`` substitutes a known skull mask for the predicted one in
    the HU path only (fusion for multitask, post-processing for single-task);
    the returned skull mask is always the model's own.
    """
    predictor = _as_predictor(predictor)
    stack = normalized_mri_stack(mri_pair)
    if isinstance(mri_pair, PairedCase):
        voxel_size_mm = mri_pair.ct.voxel_size_mm
    ref = reference_mask.as_bool() if reference_mask is not None else None
    rec = NormalizationRecord(*predictor.ct_norm, IntensityKind.HU)
    if predictor.mode is TaskMode.MULTITASK:
        sct_norm, seg_prob = predict_volume(predictor, stack, patch, stride, batch_size, ref)
        sct = Volume3D(denormalize_array(sct_norm, rec), voxel_size_mm, IntensityKind.HU)
        return sct, BinaryMask3D(seg_prob > SEG_THRESHOLD)
    sct_norm, _ = predict_volume(predictor, stack, patch, stride, batch_size)
    raw = Volume3D(denormalize_array(sct_norm, rec), voxel_size_mm, IntensityKind.HU)
    template = predictor.template or BinaryMask3D(np.ones(raw.dims, dtype=bool))
    skull = single_task_skull_mask(raw, template, SKULL_HU)
    hu_template = binary_dilate(reference_mask, iterations=1) if reference_mask is not None else template
    return postprocess_single_task(raw, hu_template, SKULL_HU), skull


def evaluate(
    predictor,
    cases: Sequence[PairedCase],
    use_gt_mask_reference: bool = False,
    patch=32,
    stride=16,
    batch_size: int = 8,
) -> list[MetricsRecord]:
    if not cases:
        raise ConfigError("evaluate needs at least one case")
    predictor = _as_predictor(predictor)
    records = []
    for case in cases:
        ref = case.skull_label if use_gt_mask_reference else None
        sct, skull = synthesize_sct(predictor, case, patch, stride, batch_size, reference_mask=ref)
        records.append(compute_metrics(case.subject_id, sct, case.ct, skull, case.skull_label))
    return records
