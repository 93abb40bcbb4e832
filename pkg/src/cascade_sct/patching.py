"""Patch tiling, skull-aware patch sampling and overlap-averaged reconstruction.

Origins are patch corners ``(x, y, z)``. A patch of size ``P`` centred at
voxel ``c`` has origin ``c - P // 2``; the half-patch centre margin and the
corner range ``0 <= o <= dim - P`` describe the same set of placements.
"""

from __future__ import annotations

import enum
import itertools
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .errors import ConfigError, CoverageError, DataError
from .volume import BinaryMask3D, IntensityKind, Volume3D


class PatchPurpose(str, enum.Enum):
    SEGMENTATION = "segmentation"
    REGRESSION = "regression"


def _triple(v, name) -> tuple[int, int, int]:
    if np.isscalar(v):
        v = (v, v, v)
    t = tuple(int(x) for x in v)
    if len(t) != 3:
        raise ConfigError(f"{name} must have three entries, got {v!r}")
    return t


def axis_origins(dim: int, patch: int, stride: int) -> list[int]:
    """Regular steps ``0, S, 2S, ...`` plus a final origin snapped to ``dim - P``."""
    if patch > dim:
        raise ConfigError(f"patch size {patch} exceeds volume extent {dim}")
    if patch < 1 or stride < 1:
        raise ConfigError("patch size and stride must be >= 1")
    origins = list(range(0, dim - patch + 1, stride))
    if origins[-1] != dim - patch:
        origins.append(dim - patch)
    return origins


def axis_count_floor(dim: int, patch: int, stride: int) -> int:
    return (dim - patch) // stride + 1


@dataclass(frozen=True, eq=False)
class PatchGrid:
    dims: tuple[int, int, int]
    patch: tuple[int, int, int]
    stride: tuple[int, int, int]
    origins: np.ndarray  # (n_patch, 3), lexicographically sorted

    @property
    def n_patch(self) -> int:
        return len(self.origins)

    @property
    def n_patch_floor(self) -> int:
        """Count without the boundary-snapped origin (floor-only tiling)."""
        return int(np.prod([axis_count_floor(d, p, s) for d, p, s in zip(self.dims, self.patch, self.stride)]))

    def __iter__(self):
        return (tuple(int(v) for v in o) for o in self.origins)

    def __len__(self):
        return self.n_patch


def build_patch_grid(dims, patch, stride) -> PatchGrid:
    dims, patch, stride = _triple(dims, "dims"), _triple(patch, "patch"), _triple(stride, "stride")
    per_axis = [axis_origins(d, p, s) for d, p, s in zip(dims, patch, stride)]
    origins = np.array(list(itertools.product(*per_axis)), dtype=np.int64).reshape(-1, 3)
    origins.setflags(write=False)
    return PatchGrid(dims, patch, stride, origins)


@dataclass(frozen=True)
class SamplingPolicy:
    purpose: PatchPurpose = PatchPurpose.REGRESSION
    skull_center_fraction: float | None = None
    patches_per_subject: int = 100

    def __post_init__(self):
        object.__setattr__(self, "purpose", PatchPurpose(self.purpose))
        if self.skull_center_fraction is None:
            default = 1.0 if self.purpose is PatchPurpose.REGRESSION else 0.8
            object.__setattr__(self, "skull_center_fraction", default)
        if not 0.0 <= self.skull_center_fraction <= 1.0:
            raise ConfigError("skull_center_fraction must lie in [0, 1]")
        if self.patches_per_subject < 0:
            raise ConfigError("patches_per_subject must be >= 0")


class PatchCenter(NamedTuple):
    center: tuple[int, int, int]
    origin: tuple[int, int, int]
    from_skull: bool


def skull_draw_count(fraction: float, n: int) -> int:
    return int(np.floor(fraction * n + 0.5))


def sample_patch_centers(label: BinaryMask3D, policy: SamplingPolicy, n: int, seed, patch) -> list[PatchCenter]:
    """Draw ``n`` patch placements.

    Exactly ``round(f * n)`` centres come uniformly from skull voxels, the rest
    uniformly from non-skull voxels inside the half-patch centre margin.
    Centres are then clamped so every patch lies inside the volume.
    """
    patch = np.asarray(_triple(patch, "patch"))
    dims = np.asarray(label.dims)
    if np.any(patch > dims):
        raise ConfigError(f"patch {tuple(patch)} larger than volume {tuple(dims)}")
    rng = np.random.default_rng(seed)
    n_skull = skull_draw_count(policy.skull_center_fraction, n)
    skull = np.argwhere(label.as_bool())
    if n_skull > 0 and len(skull) == 0:
        raise DataError("skull label is empty but the policy requires skull-centred patches")

    half = patch // 2
    lo, hi = half, dims - (patch - half)
    other = np.argwhere(~label.as_bool())
    inside = np.all((other >= lo) & (other <= hi), axis=1)
    other = other[inside]
    if n - n_skull > 0 and len(other) == 0:
        raise DataError("no non-skull voxels available inside the valid centre region")

    centers = []
    if n_skull:
        centers.append((skull[rng.integers(0, len(skull), size=n_skull)], True))
    if n - n_skull:
        centers.append((other[rng.integers(0, len(other), size=n - n_skull)], False))
    draws = [(tuple(int(v) for v in c), flag) for block, flag in centers for c in block]
    order = rng.permutation(len(draws))
    out = []
    for i in order:
        c, flag = draws[i]
        origin = np.clip(np.asarray(c) - half, 0, dims - patch)
        out.append(PatchCenter(c, tuple(int(v) for v in origin), flag))
    return out


@dataclass(frozen=True, eq=False)
class PatchSample:
    origin: tuple[int, int, int]
    size: tuple[int, int, int]
    channels: np.ndarray  # (C, P_H, P_W, P_D)
    purpose: PatchPurpose = PatchPurpose.REGRESSION


def _as_stack(v) -> np.ndarray:
    if isinstance(v, Volume3D):
        return v.data[None]
    if isinstance(v, BinaryMask3D):
        return v.data[None]
    if isinstance(v, (list, tuple)):
        return np.stack([_as_stack(x)[0] for x in v])
    arr = np.asarray(v)
    if arr.ndim == 3:
        return arr[None]
    if arr.ndim != 4:
        raise ConfigError(f"expected a 3D volume or a (C, H, W, D) stack, got shape {arr.shape}")
    return arr


def extract_patch(v, origin, size, purpose=PatchPurpose.REGRESSION) -> PatchSample:
    stack = _as_stack(v)
    origin, size = _triple(origin, "origin"), _triple(size, "size")
    dims = stack.shape[1:]
    for o, s, d in zip(origin, size, dims):
        if o < 0 or s < 1 or o + s > d:
            raise DataError(f"patch at {origin} with size {size} leaves volume of dims {dims}")
    x, y, z = origin
    sx, sy, sz = size
    block = np.array(stack[:, x : x + sx, y : y + sy, z : z + sz], copy=True)
    return PatchSample(origin, size, block, PatchPurpose(purpose))


def reconstruct_array(patches: Sequence, dims) -> np.ndarray:
    """Voxel-wise mean of overlapping patches as a float64 array."""
    dims = _triple(dims, "dims")
    total = np.zeros(dims, dtype=np.float64)
    count = np.zeros(dims, dtype=np.int64)
    for origin, arr in patches:
        arr = np.asarray(arr, dtype=np.float64)
        if arr.ndim == 4 and arr.shape[0] == 1:
            arr = arr[0]
        x, y, z = _triple(origin, "origin")
        sx, sy, sz = arr.shape
        if min(x, y, z) < 0 or x + sx > dims[0] or y + sy > dims[1] or z + sz > dims[2]:
            raise DataError(f"patch at {(x, y, z)} with shape {arr.shape} leaves volume of dims {dims}")
        total[x : x + sx, y : y + sy, z : z + sz] += arr
        count[x : x + sx, y : y + sy, z : z + sz] += 1
    if np.any(count == 0):
        # first uncovered voxel in storage order (x fastest)
        flat = np.flatnonzero(count.ravel(order="F") == 0)[0]
        coord = np.unravel_index(flat, dims, order="F")
        raise CoverageError(f"voxel {tuple(int(c) for c in coord)} is not covered by any patch")
    return total / count


def reconstruct(patches: Sequence, dims, intensity_kind=IntensityKind.ARBITRARY, voxel_size_mm=(1.0, 1.0, 1.0)) -> Volume3D:
    return Volume3D(reconstruct_array(patches, dims), voxel_size_mm, intensity_kind)
