import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis.extra.numpy import arrays
from hypothesis import strategies as st

from cascade_sct.errors import ConfigError, DataError, UndefinedCorrelationError
from cascade_sct.metrics import (
    compute_metrics,
    dice_jaccard,
    mae_region,
    pearson,
    psnr,
    spearman,
    ssim3d,
)
from cascade_sct.volume import BinaryMask3D, IntensityKind, Volume3D


def loop_pearson(a, b):
    x, y = list(np.ravel(a)), list(np.ravel(b))
    n = len(x)
    mx, my = sum(x) / n, sum(y) / n
    sxy = sum((p - mx) * (q - my) for p, q in zip(x, y))
    sxx = sum((p - mx) ** 2 for p in x)
    syy = sum((q - my) ** 2 for q in y)
    return sxy / math.sqrt(sxx * syy)


def loop_ranks(v):
    v = list(v)
    ranks = [0.0] * len(v)
    order = sorted(range(len(v)), key=lambda i: v[i])
    i = 0
    while i < len(order):
        j = i
        while j + 1 < len(order) and v[order[j + 1]] == v[order[i]]:
            j += 1
        for k in range(i, j + 1):
            ranks[order[k]] = (i + j) / 2 + 1
        i = j + 1
    return ranks


def loop_ssim(a, b, L, w=7):
    c1, c2 = (0.01 * L) ** 2, (0.03 * L) ** 2
    vals = []
    n = w**3
    for i, j, k in itertools.product(*(range(s - w + 1) for s in a.shape)):
        pa = a[i : i + w, j : j + w, k : k + w].ravel()
        pb = b[i : i + w, j : j + w, k : k + w].ravel()
        ma, mb = pa.sum() / n, pb.sum() / n
        va = ((pa - ma) ** 2).sum() / n
        vb = ((pb - mb) ** 2).sum() / n
        cab = ((pa - ma) * (pb - mb)).sum() / n
        vals.append(((2 * ma * mb + c1) * (2 * cab + c2)) / ((ma**2 + mb**2 + c1) * (va + vb + c2)))
    return sum(vals) / len(vals)


def loop_mae(p, g, r):
    tot, n = 0.0, 0
    for idx in zip(*np.nonzero(r)):
        tot += abs(p[idx] - g[idx])
        n += 1
    return tot / n


def rel(a, b):
    return abs(a - b) / max(abs(b), 1e-300)


def test_all_metrics_match_brute_force(rng):
    for _ in range(10):
        a = rng.normal(size=(8, 8, 8))
        b = a + rng.normal(scale=0.5, size=(8, 8, 8))
        L = float(b.max() - b.min())
        assert rel(pearson(a, b), loop_pearson(a, b)) < 1e-6
        assert rel(spearman(a, b), loop_pearson(loop_ranks(a.ravel()), loop_ranks(b.ravel()))) < 1e-6
        assert rel(ssim3d(a, b, L), loop_ssim(a, b, L)) < 1e-6
        mse = sum((x - y) ** 2 for x, y in zip(a.ravel(), b.ravel())) / a.size
        assert rel(psnr(a, b, L), 10 * math.log10(L * L / mse)) < 1e-9
        r = rng.random((8, 8, 8)) > 0.5
        assert rel(mae_region(a, b, r), loop_mae(a, b, r)) < 1e-6
        ma, mb = a > 0.3, b > 0.3
        inter = sum(1 for x, y in zip(ma.ravel(), mb.ravel()) if x and y)
        union = sum(1 for x, y in zip(ma.ravel(), mb.ravel()) if x or y)
        d, j = dice_jaccard(ma, mb)
        assert rel(d, 2 * inter / (ma.sum() + mb.sum())) < 1e-6
        assert rel(j, inter / union) < 1e-6


@settings(max_examples=100, deadline=None)
@given(arrays(bool, (5, 5, 5), elements=st.booleans()), arrays(bool, (5, 5, 5), elements=st.booleans()))
def test_jaccard_dice_identity(a, b):
    d, j = dice_jaccard(a, b)
    assert 0 <= d <= 1 and 0 <= j <= 1
    assert abs(j - d / (2 - d)) < 1e-12


def test_dice_examples():
    a = np.zeros((4, 4, 4), bool)
    b = np.zeros((4, 4, 4), bool)
    a[0, :2, :] = True
    b[0, 1:3, :] = True
    assert a.sum() == b.sum() == 8
    d, j = dice_jaccard(a, b)
    assert d == 0.5 and j == pytest.approx(1 / 3)
    assert dice_jaccard(a, a) == (1.0, 1.0)
    c = np.zeros_like(a)
    c[3, 3, 3] = True
    assert dice_jaccard(a, c) == (0.0, 0.0)
    assert dice_jaccard(c & False, c & False) == (1.0, 1.0)
    with pytest.raises(DataError):
        dice_jaccard(a, np.zeros((3, 3, 3)))


def test_correlation_examples():
    a = np.array([-2.0, -1.0, 0.0, 1.0, 2.0])
    assert pearson(a, 2 * a + 1) == pytest.approx(1.0)
    assert spearman(a, -a) == pytest.approx(-1.0)
    assert spearman(a, a**3) == pytest.approx(1.0)
    assert pearson(a, a**3) == pytest.approx(np.corrcoef(a, a**3)[0, 1], abs=1e-12)
    assert pearson(a, a**3) == pytest.approx(34 / math.sqrt(1300), abs=1e-12)
    with pytest.raises(UndefinedCorrelationError):
        pearson(a, np.ones(5))
    with pytest.raises(UndefinedCorrelationError):
        pearson([1.0], [2.0])


def test_spearman_ties_midranks():
    assert loop_ranks([3, 1, 3, 2]) == [3.5, 1.0, 3.5, 2.0]
    x = np.array([1.0, 2.0, 2.0, 3.0, 5.0])
    y = np.array([2.0, 1.0, 4.0, 4.0, 9.0])
    assert spearman(x, y) == pytest.approx(loop_pearson(loop_ranks(x), loop_ranks(y)), abs=1e-12)


def test_invariances(rng):
    a = rng.normal(size=(6, 6, 6))
    b = a + rng.normal(size=(6, 6, 6))
    assert pearson(3 * a + 2, b) == pytest.approx(pearson(a, b), abs=1e-12)
    assert spearman(np.exp(a), b**3) == pytest.approx(spearman(a, b), abs=1e-12)
    perm = rng.permutation(a.size)
    pa, pb = a.ravel()[perm].reshape(a.shape), b.ravel()[perm].reshape(a.shape)
    assert pearson(pa, pb) == pytest.approx(pearson(a, b), abs=1e-12)
    assert spearman(pa, pb) == pytest.approx(spearman(a, b), abs=1e-12)
    assert psnr(pa, pb, 4.0) == pytest.approx(psnr(a, b, 4.0), abs=1e-9)
    r = a > 0
    pr = r.ravel()[perm].reshape(a.shape)
    assert mae_region(pa, pb, pr) == pytest.approx(mae_region(a, b, r), abs=1e-12)
    assert dice_jaccard(pa > 0, pb > 0) == pytest.approx(dice_jaccard(a > 0, b > 0))


def test_ssim_examples(rng):
    a = rng.random((9, 9, 9))
    b = rng.random((9, 9, 9))
    assert ssim3d(a, a, 1.0) == 1.0
    assert ssim3d(a, b, 1.0) == pytest.approx(ssim3d(b, a, 1.0), abs=1e-14)
    shifted = ssim3d(a, a + 1.0, 1.0)
    assert shifted == pytest.approx(loop_ssim(a, a + 1.0, 1.0), rel=1e-6)
    assert shifted < 0.7
    with pytest.raises(ConfigError):
        ssim3d(np.zeros((5, 9, 9)), np.zeros((5, 9, 9)), 1.0)
    with pytest.raises(ConfigError):
        ssim3d(a, b, 0.0)


def test_psnr_and_mae_examples(rng):
    a = rng.random((4, 4, 4))
    assert psnr(a, a, 1.0) == math.inf
    assert psnr(a, a + 0.1, 1.0) == pytest.approx(20.0, abs=1e-9)
    assert mae_region(a, a, a > 0) == 0.0
    assert mae_region(a + 10, a, a > 0.5) == pytest.approx(10.0)
    with pytest.raises(DataError):
        mae_region(a, a, np.zeros((4, 4, 4), bool))


def test_compute_metrics_record(rng):
    ct = rng.choice([-1000.0, 40.0, 1000.0], size=(8, 8, 8)).astype(np.float32)
    gt = Volume3D(ct, intensity_kind=IntensityKind.HU)
    skull = BinaryMask3D(ct > 250)
    rec = compute_metrics("s", gt, gt, skull, skull)
    assert rec.dice == rec.jaccard == 1.0
    assert rec.mae_bone_hu == rec.mae_brain_hu == 0.0
    assert rec.psnr_db == math.inf and rec.ssim == 1.0
    noisy = Volume3D(ct + rng.normal(scale=20, size=ct.shape), intensity_kind=IntensityKind.HU)
    rec2 = compute_metrics("s", noisy, gt, skull, skull)
    assert -1 <= rec2.ssim <= 1 and -1 <= rec2.pearson <= 1 and rec2.mae_bone_hu > 0
