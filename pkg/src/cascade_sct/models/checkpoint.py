"""Checkpoint container: text manifest plus one float32 blob per tensor.

Blob layout (little-endian): ``b"CTB1"``, uint32 ndim, ndim x uint32 shape,
then the float32 payload in row-major order.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from ..errors import ConfigError, FormatError
from .unet import BackboneConfig, SCTNet, TaskMode, config_digest

MAGIC = b"CTB1"
MANIFEST = "manifest.txt"
FORMAT_LINE = "cascade_sct checkpoint v1"


def write_blob(path: Path, array) -> None:
    arr = np.ascontiguousarray(np.asarray(array, dtype="<f4"))
    header = MAGIC + struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape)
    path.write_bytes(header + arr.tobytes())


def read_blob(path: Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC or len(raw) < 8:
        raise FormatError(f"{path}: not a tensor blob")
    (ndim,) = struct.unpack_from("<I", raw, 4)
    offset = 8 + 4 * ndim
    if len(raw) < offset:
        raise FormatError(f"{path}: truncated shape header")
    shape = struct.unpack_from(f"<{ndim}I", raw, 8)
    expected = 4 * int(np.prod(shape, dtype=np.int64))
    if len(raw) - offset != expected:
        raise FormatError(f"{path}: payload has {len(raw) - offset} bytes, shape {shape} implies {expected}")
    return np.frombuffer(raw, dtype="<f4", offset=offset).reshape(shape).astype(np.float32)


@dataclass
class Checkpoint:
    mode: TaskMode
    backbone: BackboneConfig
    state: dict  # parameter name -> tensor
    epoch: int = 0
    seed: int = 0
    ct_norm: tuple[float, float] = (-1000.0, 1000.0)
    history: list = field(default_factory=list)
    aux: dict = field(default_factory=dict)  # extra arrays, e.g. the single-task template

    @property
    def digest(self) -> str:
        return config_digest(self.backbone, self.mode)

    @classmethod
    def from_model(cls, model: SCTNet, **kw) -> "Checkpoint":
        state = {k: v.detach().clone() for k, v in model.state_dict().items()}
        return cls(mode=model.mode, backbone=model.cfg, state=state, **kw)

    def build_model(self, dtype=torch.float32) -> SCTNet:
        model = SCTNet(self.backbone, self.mode).to(dtype)
        model.load_state_dict({k: v.to(dtype) for k, v in self.state.items()})
        return model

    def save(self, root) -> Path:
        root = Path(root)
        (root / "tensors").mkdir(parents=True, exist_ok=True)
        entries = []
        for prefix, table in (("param", self.state), ("aux", self.aux)):
            for i, (name, value) in enumerate(sorted(table.items())):
                rel = f"tensors/{prefix}{i:04d}.bin"
                arr = value.detach().cpu().numpy() if torch.is_tensor(value) else np.asarray(value)
                write_blob(root / rel, arr)
                entries.append(f"{prefix} {name} {rel}")
        lines = [
            FORMAT_LINE,
            f"config_digest: {self.digest}",
            f"mode: {self.mode.value}",
            f"backbone: {json.dumps(self.backbone.to_dict(), sort_keys=True)}",
            f"epoch: {self.epoch}",
            f"root_seed: {self.seed}",
            f"ct_norm: {self.ct_norm[0]!r} {self.ct_norm[1]!r}",
            f"history: {json.dumps(self.history)}",
            "tensors:",
            *entries,
        ]
        (root / MANIFEST).write_text("\n".join(lines) + "\n", encoding="utf-8")
        return root

    @classmethod
    def load(cls, root) -> "Checkpoint":
        root = Path(root)
        manifest = root / MANIFEST
        if not manifest.exists():
            raise FormatError(f"checkpoint manifest not found: {manifest}")
        lines = manifest.read_text(encoding="utf-8").splitlines()
        if not lines or lines[0] != FORMAT_LINE:
            raise FormatError(f"{manifest}: unknown checkpoint format")
        meta, body = {}, []
        for i, line in enumerate(lines[1:], start=1):
            if line == "tensors:":
                body = lines[i + 1 :]
                break
            key, _, value = line.partition(": ")
            meta[key] = value
        try:
            backbone = BackboneConfig.from_dict(json.loads(meta["backbone"]))
            mode = TaskMode(meta["mode"])
            lo, hi = (float(v) for v in meta["ct_norm"].split())
            ckpt = cls(
                mode=mode,
                backbone=backbone,
                state={},
                epoch=int(meta["epoch"]),
                seed=int(meta["root_seed"]),
                ct_norm=(lo, hi),
                history=json.loads(meta["history"]),
            )
        except (KeyError, ValueError, ConfigError) as exc:
            raise FormatError(f"{manifest}: {exc}") from None
        if ckpt.digest != meta.get("config_digest"):
            raise FormatError(f"{manifest}: config digest does not match the stored configuration")
        for entry in body:
            if not entry.strip():
                continue
            prefix, name, rel = entry.split(" ")
            tensor = torch.from_numpy(read_blob(root / rel))
            (ckpt.state if prefix == "param" else ckpt.aux)[name] = tensor
        return ckpt
