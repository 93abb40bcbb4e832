import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cascade_sct.errors import ConfigError, CoverageError, DataError
from cascade_sct.patching import (
    PatchPurpose,
    SamplingPolicy,
    build_patch_grid,
    extract_patch,
    reconstruct,
    reconstruct_array,
    sample_patch_centers,
)
from cascade_sct.volume import BinaryMask3D, Volume3D


def enumerate_axis(dim, patch, stride, snap=True):
    """All legal corners filtered by the stride lattice, plus the snapped end."""
    return [o for o in range(0, dim - patch + 1) if o % stride == 0 or (snap and o == dim - patch)]


def oracle_count(dims, patch, stride, snap=True):
    return int(np.prod([len(enumerate_axis(d, p, s, snap)) for d, p, s in zip(dims, patch, stride)]))


def test_full_scale_count():
    grid = build_patch_grid((207, 243, 226), 128, 6)
    assert grid.n_patch == 5670 == 15 * 21 * 18
    assert grid.n_patch_floor == 4760


def test_degenerate_grid():
    grid = build_patch_grid((9, 7, 5), (9, 7, 5), 3)
    assert grid.n_patch == 1
    assert tuple(grid.origins[0]) == (0, 0, 0)


def test_small_grid_covers_every_voxel():
    grid = build_patch_grid((10, 10, 10), 4, 2)
    assert grid.n_patch == 64
    cover = np.zeros((10, 10, 10), int)
    for x, y, z in grid:
        cover[x : x + 4, y : y + 4, z : z + 4] += 1
    assert cover.min() >= 1


def test_grid_origins_sorted_unique_in_bounds():
    grid = build_patch_grid((23, 17, 30), (8, 5, 13), (3, 4, 7))
    o = grid.origins
    assert len({tuple(r) for r in o}) == len(o)
    assert [tuple(r) for r in o] == sorted(tuple(r) for r in o)
    assert np.all(o >= 0) and np.all(o <= np.array([23 - 8, 17 - 5, 30 - 13]))


def test_grid_errors():
    with pytest.raises(ConfigError):
        build_patch_grid((10, 10, 10), 11, 2)
    with pytest.raises(ConfigError):
        build_patch_grid((10, 10, 10), 4, 0)


@settings(max_examples=60, deadline=None)
@given(st.data())
def test_counts_match_enumeration(data):
    dims = tuple(data.draw(st.integers(1, 40)) for _ in range(3))
    patch = tuple(data.draw(st.integers(1, d)) for d in dims)
    stride = tuple(data.draw(st.integers(1, 12)) for _ in range(3))
    grid = build_patch_grid(dims, patch, stride)
    assert grid.n_patch == oracle_count(dims, patch, stride)
    assert grid.n_patch_floor == oracle_count(dims, patch, stride, snap=False)


@settings(max_examples=40, deadline=None)
@given(st.integers(5, 40), st.integers(1, 5), st.integers(1, 8), st.integers(0, 3))
def test_count_monotone_in_stride_and_patch(dim, patch, stride, bump):
    base = build_patch_grid((dim, 1, 1), (patch, 1, 1), (stride, 1, 1)).n_patch
    assert build_patch_grid((dim, 1, 1), (patch, 1, 1), (stride + bump, 1, 1)).n_patch <= base
    if patch + bump <= dim:
        assert build_patch_grid((dim, 1, 1), (patch + bump, 1, 1), (stride, 1, 1)).n_patch <= base


def test_extract_whole_and_bounds(rng):
    v = Volume3D(rng.random((6, 5, 4)))
    p = extract_patch(v, (0, 0, 0), (6, 5, 4))
    assert np.array_equal(p.channels[0], v.data)
    with pytest.raises(DataError):
        extract_patch(v, (1, 0, 0), (6, 5, 4))
    with pytest.raises(DataError):
        extract_patch(v, (-1, 0, 0), (2, 2, 2))


def test_adjacent_patches_share_overlap(rng):
    stack = rng.random((2, 12, 12, 12)).astype(np.float32)
    a = extract_patch(stack, (0, 2, 2), (6, 6, 6))
    b = extract_patch(stack, (3, 2, 2), (6, 6, 6))
    assert np.array_equal(a.channels[:, 3:], b.channels[:, :3])
    assert np.array_equal(a.channels[:, 3:], stack[:, 3:6, 2:8, 2:8])


def test_averaging_hand_computed():
    out = reconstruct_array([((0, 0, 0), np.array([[[1.0]]])), ((0, 0, 0), np.array([[[3.0]]]))], (1, 1, 1))
    assert out[0, 0, 0] == 2.0
    patches = [((0, 0, 0), np.full((2, 1, 1), 1.0)), ((1, 0, 0), np.full((2, 1, 1), 4.0))]
    out = reconstruct_array(patches, (3, 1, 1))
    assert out[:, 0, 0].tolist() == [1.0, 2.5, 4.0]


def test_constant_patches(rng):
    grid = build_patch_grid((9, 8, 7), 4, 3)
    vol = reconstruct([(o, np.full((4, 4, 4), 2.5)) for o in grid], (9, 8, 7))
    assert np.all(vol.data == 2.5)


def test_uncovered_voxel_reported():
    with pytest.raises(CoverageError, match=r"\(2, 0, 0\)"):
        reconstruct_array([((0, 0, 0), np.ones((2, 3, 3)))], (3, 3, 3))


@pytest.mark.parametrize(
    "dims, patch, stride",
    [((13, 11, 9), 4, 3), ((20, 20, 20), (8, 6, 4), (5, 3, 2)), ((16, 16, 16), 16, 4)],
)
def test_reconstruct_identity(rng, dims, patch, stride):
    src = rng.normal(size=dims).astype(np.float32)
    grid = build_patch_grid(dims, patch, stride)
    parts = [(o, extract_patch(src, o, grid.patch).channels[0]) for o in grid]
    assert np.array_equal(reconstruct(parts, dims).data, src)


def test_sampling_fraction_one(default_case):
    pol = SamplingPolicy(PatchPurpose.REGRESSION, 1.0)
    draws = sample_patch_centers(default_case.skull_label, pol, 50, seed=3, patch=32)
    lab = default_case.skull_label.as_bool()
    assert len(draws) == 50
    assert all(d.from_skull and lab[d.center] for d in draws)


def test_sampling_eighty_twenty(default_case):
    pol = SamplingPolicy(PatchPurpose.SEGMENTATION)
    assert pol.skull_center_fraction == 0.8
    draws = sample_patch_centers(default_case.skull_label, pol, 100, seed=3, patch=32)
    lab = default_case.skull_label.as_bool()
    skull = [d for d in draws if d.from_skull]
    other = [d for d in draws if not d.from_skull]
    assert len(skull) == 80 and len(other) == 20
    assert all(lab[d.center] for d in skull)
    assert not any(lab[d.center] for d in other)
    for d in other:
        assert all(16 <= c <= 64 - 16 for c in d.center)


def test_sampling_deterministic_and_in_bounds(default_case):
    pol = SamplingPolicy(PatchPurpose.SEGMENTATION)
    a = sample_patch_centers(default_case.skull_label, pol, 40, seed=9, patch=24)
    b = sample_patch_centers(default_case.skull_label, pol, 40, seed=9, patch=24)
    assert a == b
    for d in a:
        assert all(0 <= o <= 64 - 24 for o in d.origin)
        assert all(o <= c < o + 24 for o, c in zip(d.origin, d.center))


def test_sampling_empty_label():
    empty = BinaryMask3D(np.zeros((8, 8, 8), bool))
    with pytest.raises(DataError):
        sample_patch_centers(empty, SamplingPolicy(), 5, 0, 4)
    draws = sample_patch_centers(empty, SamplingPolicy(skull_center_fraction=0.0), 5, 0, 4)
    assert len(draws) == 5 and not any(d.from_skull for d in draws)


def test_policy_validation():
    with pytest.raises(ConfigError):
        SamplingPolicy(skull_center_fraction=1.5)
    assert SamplingPolicy().patches_per_subject == 100
