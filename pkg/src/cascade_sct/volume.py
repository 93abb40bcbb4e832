"""Volume and mask containers, min-max normalization, HU thresholding and CVF I/O.

Arrays are indexed ``data[x, y, z]`` with shape ``(H, W, D)``. On disk the
payload is written with x varying fastest, then y, then z (Fortran order).
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataIntegrityError, FormatError

HU_FLOOR = -1024.0
HU_CEIL = 3000.0
CVF_VERSION = 1


class IntensityKind(str, enum.Enum):
    HU = "HU"
    NORMALIZED = "normalized"
    ARBITRARY = "arbitrary"


def _as_triple(values, cast, name):
    t = tuple(cast(v) for v in values)
    if len(t) != 3:
        raise ConfigError(f"{name} must have three entries, got {values!r}")
    return t


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.array(arr, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Volume3D:
    data: np.ndarray
    voxel_size_mm: tuple[float, float, float] = (1.0, 1.0, 1.0)
    intensity_kind: IntensityKind = IntensityKind.ARBITRARY

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3 or min(data.shape) < 1:
            raise ConfigError(f"volume data must be a non-empty 3D array, got shape {data.shape}")
        voxel = _as_triple(self.voxel_size_mm, float, "voxel_size_mm")
        if min(voxel) <= 0:
            raise ConfigError(f"voxel sizes must be positive, got {voxel}")
        kind = IntensityKind(self.intensity_kind)
        data = _frozen(data.astype(np.float32, copy=False))
        if kind is IntensityKind.NORMALIZED and data.size:
            lo, hi = float(data.min()), float(data.max())
            if lo < 0.0 or hi > 1.0:
                raise DataIntegrityError(f"normalized volume has values outside [0, 1]: [{lo}, {hi}]")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "voxel_size_mm", voxel)
        object.__setattr__(self, "intensity_kind", kind)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(s) for s in self.data.shape)

    def with_data(self, data, intensity_kind=None) -> "Volume3D":
        return Volume3D(data, self.voxel_size_mm, intensity_kind or self.intensity_kind)


@dataclass(frozen=True, eq=False)
class BinaryMask3D:
    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise ConfigError(f"mask data must be 3D, got shape {data.shape}")
        if data.dtype != bool:
            uniq = np.unique(data)
            if not np.all(np.isin(uniq, (0, 1))):
                raise DataIntegrityError("mask values must be exactly 0 or 1")
        object.__setattr__(self, "data", _frozen(data.astype(np.uint8)))

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(s) for s in self.data.shape)

    @property
    def count(self) -> int:
        return int(self.data.sum())

    def as_bool(self) -> np.ndarray:
        return self.data.astype(bool)

    def __eq__(self, other):
        if not isinstance(other, BinaryMask3D):
            return NotImplemented
        return self.dims == other.dims and bool(np.array_equal(self.data, other.data))

    __hash__ = None


@dataclass(frozen=True)
class NormalizationRecord:
    vmin: float
    vmax: float
    source_kind: IntensityKind = field(default=IntensityKind.ARBITRARY)

    def __post_init__(self):
        if not self.vmax >= self.vmin:
            raise ConfigError(f"vmax ({self.vmax}) must be >= vmin ({self.vmin})")
        object.__setattr__(self, "source_kind", IntensityKind(self.source_kind))


def minmax_normalize(v: Volume3D) -> tuple[Volume3D, NormalizationRecord]:
    """Scale ``v`` to [0, 1]; a constant volume maps to zeros with ``vmax = vmin + 1``."""
    x = np.asarray(v.data, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise DataIntegrityError("volume contains non-finite values")
    vmin, vmax = float(x.min()), float(x.max())
    if vmax == vmin:
        rec = NormalizationRecord(vmin, vmin + 1.0, v.intensity_kind)
        return v.with_data(np.zeros(v.dims, np.float32), IntensityKind.NORMALIZED), rec
    out = (x - vmin) / (vmax - vmin)
    out = np.clip(out.astype(np.float32), 0.0, 1.0)
    return v.with_data(out, IntensityKind.NORMALIZED), NormalizationRecord(vmin, vmax, v.intensity_kind)


def denormalize_array(x, rec: NormalizationRecord) -> np.ndarray:
    """Array form of :func:`denormalize`; computes in float64 and does not cast."""
    out = np.asarray(x, dtype=np.float64) * (rec.vmax - rec.vmin) + rec.vmin
    if rec.source_kind is IntensityKind.HU:
        out = np.clip(out, HU_FLOOR, HU_CEIL)
    return out


def denormalize(v: Volume3D, rec: NormalizationRecord) -> Volume3D:
    if v.intensity_kind is not IntensityKind.NORMALIZED:
        raise DataIntegrityError(f"denormalize expects a normalized volume, got {v.intensity_kind.value}")
    if rec.source_kind is IntensityKind.NORMALIZED:
        raise DataIntegrityError("normalization record does not describe an un-normalized source")
    return v.with_data(denormalize_array(v.data, rec), rec.source_kind)


def threshold_mask(v: Volume3D, t: float = 250.0) -> BinaryMask3D:
    """Voxels strictly above ``t`` HU."""
    if v.intensity_kind is not IntensityKind.HU:
        raise DataIntegrityError("threshold_mask requires a HU volume")
    return BinaryMask3D(v.data > t)


# --- CVF v1 container -------------------------------------------------------


def _header_path(path) -> Path:
    p = Path(path)
    return p if p.suffix == ".cvf" else p.with_suffix(".cvf")


def save_volume(v: Volume3D, path) -> Path:
    """Write ``<path>.cvf`` plus a ``.raw`` little-endian float32 payload."""
    header = _header_path(path)
    payload = header.with_suffix(".raw")
    header.parent.mkdir(parents=True, exist_ok=True)
    payload.write_bytes(np.asarray(v.data, dtype="<f4").tobytes(order="F"))
    h, w, d = v.dims
    sx, sy, sz = v.voxel_size_mm
    header.write_text(
        f"cvf_version: {CVF_VERSION}\n"
        f"dims: {h} {w} {d}\n"
        f"voxel_mm: {sx!r} {sy!r} {sz!r}\n"
        f"kind: {v.intensity_kind.value}\n"
        f"payload: {payload.name}\n",
        encoding="utf-8",
    )
    return header


def _parse_header(header: Path) -> dict[str, str]:
    try:
        text = header.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise FormatError(f"missing volume header: {header}") from None
    fields = {}
    for line in text.splitlines():
        if not line.strip():
            continue
        key, sep, value = line.partition(":")
        if not sep:
            raise FormatError(f"{header}: malformed header line {line!r}")
        fields[key.strip()] = value.strip()
    for key in ("cvf_version", "dims", "voxel_mm", "kind", "payload"):
        if key not in fields:
            raise FormatError(f"{header}: missing header key {key!r}")
    if fields["cvf_version"] != str(CVF_VERSION):
        raise FormatError(f"{header}: unsupported cvf_version {fields['cvf_version']!r}")
    return fields


def load_volume(path) -> Volume3D:
    header = _header_path(path)
    fields = _parse_header(header)
    try:
        dims = _as_triple(fields["dims"].split(), int, "dims")
        voxel = _as_triple(fields["voxel_mm"].split(), float, "voxel_mm")
        kind = IntensityKind(fields["kind"])
    except (ValueError, ConfigError) as exc:
        raise FormatError(f"{header}: {exc}") from None
    if min(dims) < 1:
        raise FormatError(f"{header}: non-positive dims {dims}")
    payload = header.parent / fields["payload"]
    if not payload.exists():
        raise FormatError(f"{header}: payload file {payload} not found")
    raw = payload.read_bytes()
    expected = 4 * dims[0] * dims[1] * dims[2]
    if len(raw) != expected:
        raise FormatError(f"{payload}: payload has {len(raw)} bytes, header implies {expected}")
    data = np.frombuffer(raw, dtype="<f4").reshape(dims, order="F")
    try:
        return Volume3D(data.astype(np.float32), voxel, kind)
    except (ConfigError, DataIntegrityError) as exc:
        raise FormatError(f"{header}: {exc}") from None


def save_mask(m: BinaryMask3D, path, voxel_size_mm=(1.0, 1.0, 1.0)) -> Path:
    return save_volume(Volume3D(m.data.astype(np.float32), voxel_size_mm, IntensityKind.ARBITRARY), path)


def load_mask(path) -> BinaryMask3D:
    v = load_volume(path)
    try:
        return BinaryMask3D(v.data)
    except DataIntegrityError as exc:
        raise FormatError(f"{path}: {exc}") from None
