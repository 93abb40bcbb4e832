"""Patch-based training, fine-tuning and early stopping."""

from __future__ import annotations

import copy
import math
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Callable

import numpy as np
import torch

from .errors import ConfigError, DataError, TrainingDivergedError
from .losses import LossConfig, composite_loss, single_task_loss
from .models import BackboneConfig, Checkpoint, SCTNet, TaskMode, config_digest
from .morphology import group_mean_template
from .patching import PatchPurpose, SamplingPolicy, sample_patch_centers
from .phantom import CohortSplit, PairedCase
from .volume import minmax_normalize

_DTYPES = {"float32": torch.float32, "float64": torch.float64}


@dataclass(frozen=True)
class TrainConfig:
    mode: TaskMode = TaskMode.MULTITASK
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    patch_size: int = 32
    patches_per_subject: int = 100
    batch_size: int = 8
    max_epochs: int = 50
    early_stop_patience: int = 10
    lr: float = 1e-3
    finetune_lr: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    seed: int = 0
    seg_skull_fraction: float = 0.8
    loss: LossConfig = field(default_factory=LossConfig)
    dtype: str = "float32"

    def __post_init__(self):
        object.__setattr__(self, "mode", TaskMode(self.mode))
        if isinstance(self.backbone, dict):
            object.__setattr__(self, "backbone", BackboneConfig.from_dict(self.backbone))
        if isinstance(self.loss, dict):
            object.__setattr__(self, "loss", LossConfig(**self.loss))
        if self.backbone.patch_size != self.patch_size:
            object.__setattr__(self, "backbone", replace(self.backbone, patch_size=self.patch_size))
        if not self.finetune_lr < self.lr:
            raise ConfigError("finetune_lr must be smaller than lr")
        if self.dtype not in _DTYPES:
            raise ConfigError(f"dtype must be one of {sorted(_DTYPES)}")
        if self.batch_size < 1 or self.patches_per_subject < 1:
            raise ConfigError("batch_size and patches_per_subject must be >= 1")
        if self.max_epochs < 0 or self.early_stop_patience < 1:
            raise ConfigError("max_epochs must be >= 0 and early_stop_patience >= 1")

    @property
    def torch_dtype(self):
        return _DTYPES[self.dtype]

    @property
    def digest(self) -> str:
        return config_digest(self.backbone, self.mode)

    def policy(self) -> SamplingPolicy:
        if self.mode is TaskMode.MULTITASK:
            return SamplingPolicy(PatchPurpose.SEGMENTATION, self.seg_skull_fraction, self.patches_per_subject)
        return SamplingPolicy(PatchPurpose.REGRESSION, 1.0, self.patches_per_subject)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mode"] = self.mode.value
        d["backbone"] = self.backbone.to_dict()
        d["loss"] = self.loss.to_dict()
        d["betas"] = list(self.betas)
        return d


@dataclass
class EpochRecord:
    epoch: int
    n_train_patches: int
    train: dict
    val: dict


@dataclass
class TrainHistory:
    epochs: list = field(default_factory=list)
    steps: list = field(default_factory=list)
    best_epoch: int = 0
    best_val: float = math.inf
    stopped_epoch: int = 0
    wall_seconds: float = 0.0
    initial_val: dict | None = None

    def to_dict(self) -> dict:
        return {
            "epochs": [asdict(e) for e in self.epochs],
            "best_epoch": self.best_epoch,
            "best_val": self.best_val,
            "stopped_epoch": self.stopped_epoch,
            "wall_seconds": self.wall_seconds,
            "initial_val": self.initial_val,
        }

    def epoch_lines(self) -> list[str]:
        head = "epoch\tn_train\ttrain_total\tval_total\tval_dice\tval_bce\tval_mse_bone\tval_mse_soft\tval_mse_global"
        rows = [head]
        for e in self.epochs:
            v = e.val
            rows.append(
                f"{e.epoch}\t{e.n_train_patches}\t{e.train['total']:.6g}\t{v['total']:.6g}\t{v['dice']:.6g}"
                f"\t{v['bce']:.6g}\t{v['mse_bone']:.6g}\t{v['mse_soft']:.6g}\t{v['mse_global']:.6g}"
            )
        return rows

    def step_lines(self) -> list[str]:
        rows = ["epoch\tstep\tdice\tbce\tmse_bone\tmse_soft\ttotal\tregion_size"]
        for s in self.steps:
            rows.append(
                f"{s['epoch']}\t{s['step']}\t{s['dice']:.6g}\t{s['bce']:.6g}\t{s['mse_bone']:.6g}"
                f"\t{s['mse_soft']:.6g}\t{s['total']:.6g}\t{s['region_size']}"
            )
        return rows


@dataclass(frozen=True, eq=False)
class PreparedCase:
    subject_id: str
    mri: np.ndarray  # (2, H, W, D) float32 in [0, 1]
    ct: np.ndarray  # (H, W, D) float32 in [0, 1]
    label: np.ndarray  # (H, W, D) uint8
    ct_norm: tuple[float, float]
    case: PairedCase


def prepare_case(case: PairedCase) -> PreparedCase:
    a, _ = minmax_normalize(case.mri_a)
    b, _ = minmax_normalize(case.mri_b)
    ct, rec = minmax_normalize(case.ct)
    return PreparedCase(
        case.subject_id,
        np.stack([a.data, b.data]).astype(np.float32),
        np.asarray(ct.data, dtype=np.float32),
        np.asarray(case.skull_label.data, dtype=np.uint8),
        (rec.vmin, rec.vmax),
        case,
    )


@dataclass
class PatchBatch:
    x: torch.Tensor
    seg: torch.Tensor
    ct: torch.Tensor
    regression: np.ndarray


def draw_patches(cases: list[PreparedCase], cfg: TrainConfig, seed_key: tuple) -> list[tuple[PreparedCase, tuple, bool]]:
    """``patches_per_subject`` placements per case, seeded by ``seed_key``."""
    policy = cfg.policy()
    out = []
    for idx, pc in enumerate(cases):
        seed = np.random.SeedSequence([cfg.seed, *seed_key, idx])
        centers = sample_patch_centers(pc.case.skull_label, policy, policy.patches_per_subject, seed, cfg.patch_size)
        out.extend((pc, c.origin, c.from_skull) for c in centers)
    return out


def _assemble(items, patch: int, dtype) -> PatchBatch:
    xs, segs, cts, reg = [], [], [], []
    for pc, (x, y, z), from_skull in items:
        sl = (slice(x, x + patch), slice(y, y + patch), slice(z, z + patch))
        xs.append(pc.mri[(slice(None), *sl)])
        segs.append(pc.label[sl][None])
        cts.append(pc.ct[sl][None])
        reg.append(from_skull)
    t = lambda arrs: torch.from_numpy(np.stack(arrs).astype(np.float64)).to(dtype)
    return PatchBatch(t(xs), t(segs), t(cts), np.array(reg, dtype=bool))


def batch_loss(model: SCTNet, batch: PatchBatch, cfg: TrainConfig):
    outputs = model(batch.x)
    if model.mode is TaskMode.MULTITASK:
        return composite_loss(outputs, batch.seg, batch.ct, cfg.loss, regression_mask=batch.regression)
    return single_task_loss(outputs, batch.ct)


def _mean_dicts(dicts: list[dict], weights: list[int]) -> dict:
    total = float(sum(weights))
    keys = [k for k in dicts[0] if k != "region_size"]
    out = {k: sum(d[k] * w for d, w in zip(dicts, weights)) / total for k in keys}
    out["region_size"] = int(sum(d["region_size"] for d in dicts))
    return out


def _validate(model, cases, cfg, epoch) -> dict:
    items = draw_patches(cases, cfg, (2, epoch))
    model.eval()
    parts, weights = [], []
    with torch.no_grad():
        for start in range(0, len(items), cfg.batch_size):
            chunk = items[start : start + cfg.batch_size]
            parts.append(batch_loss(model, _assemble(chunk, cfg.patch_size, cfg.torch_dtype), cfg).as_floats())
            weights.append(len(chunk))
    return _mean_dicts(parts, weights)


def _snapshot(model) -> dict:
    return {k: v.detach().clone() for k, v in model.state_dict().items()}


def fit(
    model: SCTNet,
    cohort: CohortSplit,
    cfg: TrainConfig,
    lr: float,
    evaluate_initial: bool = False,
    on_step: Callable[[dict], None] | None = None,
) -> tuple[dict, TrainHistory]:
    """Adam training with early stopping on validation composite loss.

    Returns the best-epoch parameters and the history. With
    ``evaluate_initial`` the incoming parameters are scored first and compete
    as epoch 0.
    """
    if not cohort.train or not cohort.val:
        raise DataError("training needs non-empty train and validation splits")
    start = time.perf_counter()
    train_cases = [prepare_case(c) for c in cohort.train]
    val_cases = [prepare_case(c) for c in cohort.val]
    opt = torch.optim.Adam(model.parameters(), lr=lr, betas=cfg.betas, eps=cfg.adam_eps)
    history = TrainHistory()
    best_state = _snapshot(model)
    if evaluate_initial or cfg.max_epochs == 0:
        history.initial_val = _validate(model, val_cases, cfg, 0)
        history.best_val = history.initial_val["total"]
    since_best = 0
    step = 0
    for epoch in range(1, cfg.max_epochs + 1):
        items = draw_patches(train_cases, cfg, (1, epoch))
        order = np.random.default_rng(np.random.SeedSequence([cfg.seed, epoch, 17])).permutation(len(items))
        items = [items[i] for i in order]
        model.train()
        parts, weights = [], []
        for s in range(0, len(items), cfg.batch_size):
            chunk = items[s : s + cfg.batch_size]
            loss = batch_loss(model, _assemble(chunk, cfg.patch_size, cfg.torch_dtype), cfg)
            values = loss.as_floats()
            if not math.isfinite(values["total"]):
                history.stopped_epoch = epoch
                history.wall_seconds = time.perf_counter() - start
                raise TrainingDivergedError(f"non-finite loss at epoch {epoch}, step {step}", history)
            opt.zero_grad(set_to_none=True)
            loss.total.backward()
            opt.step()
            step += 1
            record = {"epoch": epoch, "step": step, **values}
            history.steps.append(record)
            if on_step is not None:
                on_step(record)
            parts.append(values)
            weights.append(len(chunk))
        val = _validate(model, val_cases, cfg, epoch)
        if not math.isfinite(val["total"]):
            history.stopped_epoch = epoch
            raise TrainingDivergedError(f"non-finite validation loss at epoch {epoch}", history)
        history.epochs.append(EpochRecord(epoch, len(items), _mean_dicts(parts, weights), val))
        history.stopped_epoch = epoch
        if val["total"] < history.best_val:
            history.best_val = val["total"]
            history.best_epoch = epoch
            best_state = _snapshot(model)
            since_best = 0
        else:
            since_best += 1
            if since_best >= cfg.early_stop_patience:
                break
    history.wall_seconds = time.perf_counter() - start
    return best_state, history


def _template_aux(cohort: CohortSplit) -> dict:
    template = group_mean_template([c.skull_label for c in cohort.train])
    return {"template": torch.from_numpy(template.data.astype(np.float32))}


def _ct_norm(cohort: CohortSplit) -> tuple[float, float]:
    recs = [minmax_normalize(c.ct)[1] for c in cohort.train]
    return float(np.mean([r.vmin for r in recs])), float(np.mean([r.vmax for r in recs]))


def train(cfg: TrainConfig, cohort: CohortSplit, on_step=None) -> tuple[Checkpoint, TrainHistory]:
    torch.manual_seed(cfg.seed)
    model = SCTNet(cfg.backbone, cfg.mode).to(cfg.torch_dtype)
    state, history = fit(model, cohort, cfg, cfg.lr, on_step=on_step)
    aux = _template_aux(cohort) if cfg.mode is TaskMode.SINGLE_TASK else {}
    ckpt = Checkpoint(
        mode=cfg.mode,
        backbone=cfg.backbone,
        state=state,
        epoch=history.best_epoch,
        seed=cfg.seed,
        ct_norm=_ct_norm(cohort),
        history=[asdict(e) for e in history.epochs],
        aux=aux,
    )
    return ckpt, history


def finetune(checkpoint: Checkpoint, cohort: CohortSplit, cfg: TrainConfig, on_step=None) -> tuple[Checkpoint, TrainHistory]:
    """Warm-start every parameter from ``checkpoint`` and train end-to-end at ``finetune_lr``."""
    if checkpoint.digest != cfg.digest:
        raise ConfigError(
            f"checkpoint config digest {checkpoint.digest} does not match training config {cfg.digest}"
        )
    torch.manual_seed(cfg.seed)
    model = checkpoint.build_model(cfg.torch_dtype)
    state, history = fit(model, cohort, cfg, cfg.finetune_lr, evaluate_initial=True, on_step=on_step)
    if history.best_epoch == 0:
        state = {k: v.clone() for k, v in checkpoint.state.items()}
    aux = dict(checkpoint.aux)
    if cfg.mode is TaskMode.SINGLE_TASK and not aux:
        aux = _template_aux(cohort)
    ckpt = Checkpoint(
        mode=cfg.mode,
        backbone=cfg.backbone,
        state=state,
        epoch=history.best_epoch,
        seed=cfg.seed,
        ct_norm=checkpoint.ct_norm,
        history=copy.deepcopy(checkpoint.history) + [asdict(e) for e in history.epochs],
        aux=aux,
    )
    return ckpt, history
