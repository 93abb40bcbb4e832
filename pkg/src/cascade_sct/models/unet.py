"""3D U-Net backbone with a swappable bottleneck and the task heads."""

from __future__ import annotations

import enum
import hashlib
import json
from dataclasses import asdict, dataclass, fields

import torch
import torch.nn as nn

from ..errors import ConfigError
from .transformer import TransformerBottleneck
from .vss3d import VSS3DBlock


class Bottleneck(str, enum.Enum):
    VSS3D = "vss3d"
    TRANSFORMER = "transformer"


class TaskMode(str, enum.Enum):
    SINGLE_TASK = "single_task"
    MULTITASK = "multitask"


@dataclass(frozen=True)
class BackboneConfig:
    in_channels: int = 2
    levels: int = 4
    base_width: int = 8
    bottleneck: Bottleneck = Bottleneck.VSS3D
    vss3d_blocks: int = 2
    scan_directions: int = 6
    state_dim: int = 8
    droppath_rate: float = 0.1
    transformer_layers: int = 2
    transformer_heads: int = 4
    patch_size: int = 32

    def __post_init__(self):
        object.__setattr__(self, "bottleneck", Bottleneck(self.bottleneck))
        if self.levels < 2:
            raise ConfigError("levels must be >= 2")
        if self.base_width < 4:
            raise ConfigError("base_width must be >= 4")
        if self.scan_directions not in (2, 4, 6):
            raise ConfigError("scan_directions must be one of 2, 4, 6")
        if not 0.0 <= self.droppath_rate < 1.0:
            raise ConfigError("droppath_rate must lie in [0, 1)")
        self.check_patch(self.patch_size)

    def check_patch(self, size) -> None:
        factor = 2 ** (self.levels - 1)
        sizes = (size,) * 3 if isinstance(size, int) else tuple(size)
        if any(s % factor for s in sizes):
            raise ConfigError(f"patch dims {sizes} are not divisible by 2^(levels-1) = {factor}")

    def widths(self) -> list[int]:
        return [self.base_width * 2**i for i in range(self.levels)]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["bottleneck"] = self.bottleneck.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "BackboneConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown backbone keys: {sorted(unknown)}")
        return cls(**d)


def config_digest(cfg: BackboneConfig, mode) -> str:
    payload = json.dumps({"mode": TaskMode(mode).value, "backbone": cfg.to_dict()}, sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


def _groups(ch: int) -> int:
    return 4 if ch % 4 == 0 else 1


class ConvBlock(nn.Sequential):
    def __init__(self, cin: int, cout: int):
        super().__init__(
            nn.Conv3d(cin, cout, 3, padding=1),
            nn.GroupNorm(_groups(cout), cout),
            nn.SiLU(),
            nn.Conv3d(cout, cout, 3, padding=1),
            nn.GroupNorm(_groups(cout), cout),
            nn.SiLU(),
        )


class UNetBackbone(nn.Module):
    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        w = cfg.widths()
        self.encoders = nn.ModuleList([ConvBlock(cfg.in_channels, w[0])])
        self.downs = nn.ModuleList()
        for i in range(1, cfg.levels):
            self.downs.append(nn.Conv3d(w[i - 1], w[i], 2, stride=2))
            self.encoders.append(ConvBlock(w[i], w[i]))
        if cfg.bottleneck is Bottleneck.VSS3D:
            self.bottleneck = nn.Sequential(
                *[
                    VSS3DBlock(w[-1], cfg.state_dim, cfg.scan_directions, cfg.droppath_rate)
                    for _ in range(cfg.vss3d_blocks)
                ]
            )
        else:
            side = cfg.patch_size // 2 ** (cfg.levels - 1)
            self.bottleneck = TransformerBottleneck(w[-1], side**3, cfg.transformer_layers, cfg.transformer_heads)
        self.ups = nn.ModuleList()
        self.decoders = nn.ModuleList()
        for i in reversed(range(cfg.levels - 1)):
            self.ups.append(nn.ConvTranspose3d(w[i + 1], w[i], 2, stride=2))
            self.decoders.append(ConvBlock(2 * w[i], w[i]))
        self.out_width = w[0]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        self.cfg.check_patch(tuple(x.shape[2:]))
        skips = []
        h = self.encoders[0](x)
        for down, enc in zip(self.downs, self.encoders[1:]):
            skips.append(h)
            h = enc(down(h))
        h = self.bottleneck(h)
        for up, dec in zip(self.ups, self.decoders):
            h = dec(torch.cat([up(h), skips.pop()], dim=1))
        return h


@dataclass
class ModelOutputs:
    seg_logits: torch.Tensor | None = None
    bone_hu: torch.Tensor | None = None
    soft_hu: torch.Tensor | None = None
    direct: torch.Tensor | None = None  # single-task sCT

    @property
    def is_multitask(self) -> bool:
        return self.seg_logits is not None


class SCTNet(nn.Module):
    """Shared backbone plus 1x1x1 heads.

    Multitask emits segmentation logits and two normalized-HU branches (bone,
    soft tissue). Single-task emits one normalized sCT map.
    """

    def __init__(self, cfg: BackboneConfig, mode=TaskMode.MULTITASK):
        super().__init__()
        self.cfg = cfg
        self.mode = TaskMode(mode)
        self.backbone = UNetBackbone(cfg)
        names = ("seg", "bone", "soft") if self.mode is TaskMode.MULTITASK else ("direct",)
        self.heads = nn.ModuleDict({n: nn.Conv3d(self.backbone.out_width, 1, 1) for n in names})

    @property
    def digest(self) -> str:
        return config_digest(self.cfg, self.mode)

    def forward(self, x: torch.Tensor) -> ModelOutputs:
        h = self.backbone(x)
        if self.mode is TaskMode.MULTITASK:
            return ModelOutputs(
                seg_logits=self.heads["seg"](h), bone_hu=self.heads["bone"](h), soft_hu=self.heads["soft"](h)
            )
        return ModelOutputs(direct=self.heads["direct"](h))


def fuse_outputs(outputs: ModelOutputs, binarize_threshold: float = 0.5, mask: torch.Tensor | None = None) -> torch.Tensor:
    """Bone branch where the binarized segmentation is on, soft branch elsewhere.

    ``mask`` overrides the predicted segmentation (oracle-mask evaluation).
    """
    if not outputs.is_multitask:
        return outputs.direct
    if mask is None:
        mask = torch.sigmoid(outputs.seg_logits) > binarize_threshold
    m = mask.to(outputs.bone_hu.dtype)
    return torch.where(m > 0, outputs.bone_hu, outputs.soft_hu)


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
