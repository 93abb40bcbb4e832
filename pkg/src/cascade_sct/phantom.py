"""Paired pseudo-MRI / CT head phantoms.

Each phantom is an ellipsoidal bone shell with a low-frequency boundary
perturbation, soft tissue inside and air outside. The interior holds a
smaller fluid-filled ellipsoid that only the MRI channels can see. Two MRI
contrasts are derived from the tissue classes by fixed nonlinear curves,
then corrupted by a smooth multiplicative bias field and Gaussian noise.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import DataError, SpecError
from .volume import (
    BinaryMask3D,
    IntensityKind,
    HU_CEIL,
    HU_FLOOR,
    Volume3D,
    load_mask,
    load_volume,
    save_mask,
    save_volume,
    threshold_mask,
)

SKULL_THRESHOLD_HU = 250.0
N_HARMONICS = 6


class DomainTag(str, enum.Enum):
    SOURCE = "source"
    SHIFTED = "shifted"


@dataclass(frozen=True)
class PhantomSpec:
    dims: tuple[int, int, int] = (64, 64, 64)
    outer_radius_frac: float = 0.8
    shell_thickness_vox: int = 3
    bone_hu: float = 1000.0
    tissue_hu: float = 40.0
    air_hu: float = -1000.0
    noise_sigma: float = 0.02
    bias_field_amp: float = 0.1
    irregularity_amp: float = 0.05
    voxel_size_mm: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        object.__setattr__(self, "voxel_size_mm", tuple(float(s) for s in self.voxel_size_mm))

    def semi_axes(self) -> np.ndarray:
        return self.outer_radius_frac * np.asarray(self.dims, dtype=np.float64) / 2.0

    def validate(self) -> None:
        if len(self.dims) != 3 or min(self.dims) < 8:
            raise SpecError(f"phantom dims must be three integers >= 8, got {self.dims}")
        if not 0.0 < self.outer_radius_frac < 1.0:
            raise SpecError("outer_radius_frac must lie in (0, 1)")
        if self.shell_thickness_vox < 1:
            raise SpecError("shell_thickness_vox must be a positive integer")
        if min(self.noise_sigma, self.bias_field_amp, self.irregularity_amp) < 0:
            raise SpecError("noise_sigma, bias_field_amp and irregularity_amp must be >= 0")
        if not self.bone_hu > SKULL_THRESHOLD_HU > self.tissue_hu:
            raise SpecError("need bone_hu > 250 > tissue_hu so thresholding recovers the shell")
        if self.air_hu >= SKULL_THRESHOLD_HU:
            raise SpecError("air_hu must be below the skull threshold")
        axes = self.semi_axes()
        # worst-case outward excursion of the perturbed outer surface
        reach = axes * (1.0 + self.irregularity_amp)
        centre = (np.asarray(self.dims) - 1) / 2.0
        if np.any(centre - reach < 2.0):
            raise SpecError(f"shell does not fit with a 2-voxel margin in dims {self.dims}")
        if self.shell_thickness_vox * 2 >= axes.min() * (1.0 - self.irregularity_amp):
            raise SpecError("shell is thicker than the ellipsoid can hold")


@dataclass(frozen=True)
class ShellGeometry:
    """Sampled geometry; together with the spec it fully determines the shell."""

    centre: np.ndarray
    rotation: np.ndarray  # columns are the ellipsoid's principal directions
    harmonics: np.ndarray  # (N_HARMONICS, 3) unit wave directions
    coeffs: np.ndarray  # (N_HARMONICS,) amplitudes with sum |c| == 1
    phases: np.ndarray


@dataclass(frozen=True, eq=False)
class PairedCase:
    mri_a: Volume3D
    mri_b: Volume3D
    ct: Volume3D
    skull_label: BinaryMask3D
    subject_id: str
    domain_tag: DomainTag = DomainTag.SOURCE
    spec: PhantomSpec | None = None
    seed: int | None = None

    def __post_init__(self):
        dims = {self.mri_a.dims, self.mri_b.dims, self.ct.dims, self.skull_label.dims}
        if len(dims) != 1:
            raise DataError(f"case {self.subject_id}: grids disagree in dims {dims}")
        object.__setattr__(self, "domain_tag", DomainTag(self.domain_tag))

    @property
    def dims(self):
        return self.ct.dims

    def mri_stack(self) -> np.ndarray:
        return np.stack([self.mri_a.data, self.mri_b.data])


@dataclass
class CohortSplit:
    train: list = field(default_factory=list)
    val: list = field(default_factory=list)
    test: list = field(default_factory=list)

    def all_cases(self):
        return [*self.train, *self.val, *self.test]

    def sizes(self) -> tuple[int, int, int]:
        return len(self.train), len(self.val), len(self.test)

    def map(self, fn) -> "CohortSplit":
        return CohortSplit([fn(c) for c in self.train], [fn(c) for c in self.val], [fn(c) for c in self.test])


# --- geometry ---------------------------------------------------------------


def _random_rotation(rng: np.random.Generator, max_angle: float) -> np.ndarray:
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = rng.uniform(-max_angle, max_angle)
    k = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    return np.eye(3) + np.sin(angle) * k + (1 - np.cos(angle)) * (k @ k)


def sample_geometry(spec: PhantomSpec, rng: np.random.Generator, max_rotation: float = 0.0) -> ShellGeometry:
    dirs = rng.normal(size=(N_HARMONICS, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    coeffs = rng.uniform(-1.0, 1.0, size=N_HARMONICS)
    coeffs /= np.abs(coeffs).sum()
    return ShellGeometry(
        centre=(np.asarray(spec.dims, dtype=np.float64) - 1) / 2.0,
        rotation=_random_rotation(rng, max_rotation) if max_rotation > 0 else np.eye(3),
        harmonics=dirs,
        coeffs=coeffs,
        phases=rng.uniform(0, 2 * np.pi, size=N_HARMONICS),
    )


def _local_coords(dims, geom: ShellGeometry) -> np.ndarray:
    grid = np.stack(np.meshgrid(*[np.arange(n, dtype=np.float64) for n in dims], indexing="ij"), axis=-1)
    return (grid - geom.centre) @ geom.rotation


def boundary_factor(unit_dirs: np.ndarray, geom: ShellGeometry, amp: float) -> np.ndarray:
    """Radial scale 1 + amp * g(direction) with |g| <= 1."""
    g = np.cos(2.0 * unit_dirs @ geom.harmonics.T + geom.phases) @ geom.coeffs
    return 1.0 + amp * g


def shell_fields(spec: PhantomSpec, geom: ShellGeometry):
    """Return (outer, inner) scaled radii; a voxel is inside a surface when its radius is <= 1."""
    q = _local_coords(spec.dims, geom)
    axes = spec.semi_axes()
    r = np.linalg.norm(q, axis=-1)
    unit = q / np.maximum(r, 1e-12)[..., None]
    f = boundary_factor(unit, geom, spec.irregularity_amp)
    outer = np.linalg.norm(q / axes, axis=-1) / f
    inner = np.linalg.norm(q / (axes - spec.shell_thickness_vox), axis=-1) / f
    return outer, inner


def shell_membership(spec: PhantomSpec, geom: ShellGeometry) -> np.ndarray:
    outer, inner = shell_fields(spec, geom)
    return (outer <= 1.0) & (inner > 1.0)


def _smooth_field(dims, rng: np.random.Generator, n_terms: int = 4) -> np.ndarray:
    """Low-frequency field with values in [-1, 1]."""
    grids = np.meshgrid(*[np.linspace(0.0, 1.0, n) for n in dims], indexing="ij")
    out = np.zeros(dims)
    weights = rng.uniform(0.5, 1.0, size=n_terms)
    weights /= weights.sum()
    for w in weights:
        k = rng.uniform(0.5, 1.5, size=3) * np.pi
        phase = rng.uniform(0, 2 * np.pi)
        out += w * np.cos(k[0] * grids[0] + k[1] * grids[1] + k[2] * grids[2] + phase)
    return out


# --- contrast model ---------------------------------------------------------

# tissue class intensities before the per-channel contrast curves
_CLASS_LEVEL = {"air": 0.0, "bone": 0.08, "tissue": 0.75, "fluid": 0.35}


def _t1_curve(level: np.ndarray) -> np.ndarray:
    # fluid stays darker than tissue
    return np.clip(level, 0, None) ** 1.5


def _flair_curve(level: np.ndarray, fluid: np.ndarray) -> np.ndarray:
    # interior fluid lights up; bone and air stay near zero
    return 0.55 * np.sqrt(np.clip(level, 0, None)) * (1 - fluid) + 0.9 * fluid


@dataclass(frozen=True)
class _Anatomy:
    shell: np.ndarray
    interior: np.ndarray
    fluid: np.ndarray
    texture: np.ndarray
    inner_radius: np.ndarray


def _build_anatomy(spec: PhantomSpec, geom: ShellGeometry, rng: np.random.Generator) -> _Anatomy:
    outer, inner = shell_fields(spec, geom)
    shell = (outer <= 1.0) & (inner > 1.0)
    interior = inner <= 1.0
    fluid_scale = rng.uniform(0.3, 0.4)
    fluid = interior & (inner <= fluid_scale)
    texture = 0.08 * _smooth_field(spec.dims, rng, n_terms=3)
    return _Anatomy(shell, interior, fluid, texture, inner)


def _render_ct(spec: PhantomSpec, anat: _Anatomy) -> np.ndarray:
    ct = np.full(spec.dims, spec.air_hu, dtype=np.float64)
    ct[anat.interior] = spec.tissue_hu
    ct[anat.shell] = spec.bone_hu
    return np.clip(ct, HU_FLOOR, HU_CEIL)


def _class_level(anat: _Anatomy) -> np.ndarray:
    level = np.full(anat.shell.shape, _CLASS_LEVEL["air"])
    level[anat.interior] = _CLASS_LEVEL["tissue"] + anat.texture[anat.interior]
    level[anat.fluid] = _CLASS_LEVEL["fluid"]
    level[anat.shell] = _CLASS_LEVEL["bone"]
    return level


def _render_mri(level, fluid, bias_amp, noise_sigma, rng, curves=(_t1_curve, _flair_curve)):
    a = curves[0](level)
    b = curves[1](level, fluid.astype(np.float64))
    dims = level.shape
    out = []
    for img in (a, b):
        bias = 1.0 + bias_amp * _smooth_field(dims, rng)
        noisy = img * bias + rng.normal(0.0, noise_sigma, size=dims) if noise_sigma > 0 else img * bias
        out.append(np.clip(noisy, 0.0, None))
    return out


def _seed_streams(seed: int):
    geo, noise, shift = np.random.SeedSequence(int(seed)).spawn(3)
    return np.random.default_rng(geo), np.random.default_rng(noise), np.random.default_rng(shift)


def generate_phantom(
    spec: PhantomSpec,
    seed: int,
    *,
    subject_id: str | None = None,
    noise_seed: int | None = None,
    max_rotation: float = 0.0,
) -> PairedCase:
    """Deterministic paired case for ``(spec, seed)``.

    ``noise_seed`` redraws only the MRI bias/noise realisation while keeping the
    anatomy fixed.
    """
    spec.validate()
    geo_rng, noise_rng, _ = _seed_streams(seed)
    if noise_seed is not None:
        noise_rng = np.random.default_rng(np.random.SeedSequence([int(seed), int(noise_seed), 1]))
    geom = sample_geometry(spec, geo_rng, max_rotation)
    anat = _build_anatomy(spec, geom, geo_rng)
    ct = Volume3D(_render_ct(spec, anat), spec.voxel_size_mm, IntensityKind.HU)
    a, b = _render_mri(_class_level(anat), anat.fluid, spec.bias_field_amp, spec.noise_sigma, noise_rng)
    return PairedCase(
        mri_a=Volume3D(a, spec.voxel_size_mm, IntensityKind.ARBITRARY),
        mri_b=Volume3D(b, spec.voxel_size_mm, IntensityKind.ARBITRARY),
        ct=ct,
        skull_label=threshold_mask(ct, SKULL_THRESHOLD_HU),
        subject_id=subject_id or f"phantom-{seed}",
        spec=spec,
        seed=int(seed),
    )


def phantom_geometry(spec: PhantomSpec, seed: int, max_rotation: float = 0.0) -> ShellGeometry:
    """The geometry :func:`generate_phantom` uses for ``(spec, seed)``."""
    geo_rng, _, _ = _seed_streams(seed)
    return sample_geometry(spec, geo_rng, max_rotation)


# --- domain shift -----------------------------------------------------------


@dataclass(frozen=True)
class ShiftParams:
    extra_bias_amp: float = 0.25
    noise_scale: float = 2.0
    ringing_amp: float = 0.15
    ringing_period_vox: float = 3.0
    ringing_decay_vox: float = 4.0
    gamma_a: float = 1.6
    gamma_b: float = 0.7


def domain_shift(case: PairedCase, seed: int, params: ShiftParams = ShiftParams()) -> PairedCase:
    """Emulate a higher-field acquisition: stronger bias, ringing near the inner
    skull surface, more noise and altered contrast curves. CT is untouched."""
    if case.domain_tag is not DomainTag.SOURCE:
        raise DataError(f"case {case.subject_id} is already domain-shifted")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 7]))
    bone = case.skull_label.as_bool()
    interior = ndimage.binary_fill_holes(bone) & ~bone
    depth = ndimage.distance_transform_edt(interior)
    ringing = np.where(
        interior,
        np.cos(2 * np.pi * depth / params.ringing_period_vox) * np.exp(-depth / params.ringing_decay_vox),
        0.0,
    )
    sigma = (case.spec.noise_sigma if case.spec is not None else 0.02) * params.noise_scale
    out = []
    for vol, gamma in ((case.mri_a, params.gamma_a), (case.mri_b, params.gamma_b)):
        x = np.asarray(vol.data, dtype=np.float64)
        scale = max(float(x.max()), 1e-12)
        x = scale * (x / scale) ** gamma
        x = x * (1.0 + params.extra_bias_amp * _smooth_field(vol.dims, rng))
        x = x + params.ringing_amp * scale * ringing
        x = x + rng.normal(0.0, sigma, size=vol.dims)
        out.append(vol.with_data(np.clip(x, 0.0, None)))
    return replace(case, mri_a=out[0], mri_b=out[1], domain_tag=DomainTag.SHIFTED)


# --- cohorts ----------------------------------------------------------------


def split_sizes(n: int) -> tuple[int, int, int]:
    """8:1:1 split: test gets floor(n/10), validation ceil(n/10), train the rest."""
    if n < 10:
        raise SpecError(f"cohort needs at least 10 subjects for an 8:1:1 split, got {n}")
    test = n // 10
    val = -(-n // 10)
    return n - val - test, val, test


SPLIT_RULE = "test = floor(n/10), val = ceil(n/10), train = n - val - test"


def jitter_spec(spec: PhantomSpec, rng: np.random.Generator) -> PhantomSpec:
    frac = spec.outer_radius_frac * rng.uniform(0.93, 1.02)
    thick = max(1, spec.shell_thickness_vox + int(rng.integers(-1, 2)))
    jittered = replace(spec, outer_radius_frac=float(frac), shell_thickness_vox=thick)
    try:
        jittered.validate()
    except SpecError:
        return spec
    return jittered


def generate_cohort(spec: PhantomSpec, n: int, seed: int, max_rotation: float = 0.3) -> CohortSplit:
    n_train, n_val, n_test = split_sizes(n)
    spec.validate()
    root = np.random.SeedSequence(int(seed))
    order_rng = np.random.default_rng(root.spawn(1)[0])
    case_seeds = root.generate_state(n, dtype=np.uint32)
    cases = []
    for i in range(n):
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), i, 3]))
        case_spec = jitter_spec(spec, rng)
        cases.append(
            generate_phantom(case_spec, int(case_seeds[i]), subject_id=f"sub-{i:03d}", max_rotation=max_rotation)
        )
    perm = order_rng.permutation(n)
    shuffled = [cases[i] for i in perm]
    return CohortSplit(
        train=shuffled[:n_train],
        val=shuffled[n_train : n_train + n_val],
        test=shuffled[n_train + n_val :],
    )


def shift_cohort(cohort: CohortSplit, seed: int, params: ShiftParams = ShiftParams()) -> CohortSplit:
    return cohort.map(lambda c: domain_shift(c, int(seed) * 100003 + int(c.subject_id.split("-")[-1]), params))


# --- persistence ------------------------------------------------------------

MANIFEST_NAME = "manifest.tsv"
_MANIFEST_COLUMNS = ("subject_id", "split", "domain_tag", "mri_a", "mri_b", "ct", "skull_label")


def save_cohort(cohort: CohortSplit, root) -> Path:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    lines = ["\t".join(_MANIFEST_COLUMNS)]
    for split in ("train", "val", "test"):
        for case in getattr(cohort, split):
            base = Path("cases") / case.subject_id
            paths = {}
            for name in ("mri_a", "mri_b", "ct"):
                rel = base / f"{name}.cvf"
                save_volume(getattr(case, name), root / rel)
                paths[name] = rel.as_posix()
            rel = base / "skull_label.cvf"
            save_mask(case.skull_label, root / rel, case.ct.voxel_size_mm)
            paths["skull_label"] = rel.as_posix()
            row = [case.subject_id, split, case.domain_tag.value] + [paths[k] for k in _MANIFEST_COLUMNS[3:]]
            lines.append("\t".join(row))
    manifest = root / MANIFEST_NAME
    manifest.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return manifest


def load_cohort(root) -> CohortSplit:
    root = Path(root)
    manifest = root / MANIFEST_NAME
    if not manifest.exists():
        raise DataError(f"cohort manifest not found: {manifest}")
    rows = manifest.read_text(encoding="utf-8").splitlines()
    if not rows or tuple(rows[0].split("\t")) != _MANIFEST_COLUMNS:
        raise DataError(f"{manifest}: unexpected header")
    cohort = CohortSplit()
    for line in rows[1:]:
        if not line.strip():
            continue
        sid, split, tag, *paths = line.split("\t")
        if split not in ("train", "val", "test") or len(paths) != 4:
            raise DataError(f"{manifest}: malformed row {line!r}")
        case = PairedCase(
            mri_a=load_volume(root / paths[0]),
            mri_b=load_volume(root / paths[1]),
            ct=load_volume(root / paths[2]),
            skull_label=load_mask(root / paths[3]),
            subject_id=sid,
            domain_tag=DomainTag(tag),
        )
        getattr(cohort, split).append(case)
    return cohort
