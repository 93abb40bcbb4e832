import math

import numpy as np
import pytest
import torch

from cascade_sct.errors import ConfigError
from cascade_sct.losses import (
    EmptyRegionRule,
    LossConfig,
    bce_loss,
    composite_loss,
    composite_loss_single,
    masked_mse,
    single_task_loss,
    soft_dice_loss,
)
from cascade_sct.models import ModelOutputs

FACE = [(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)]


def loop_region(prob, threshold=0.5, iterations=2):
    n = prob.shape[0]
    cur = [[[prob[i][j][k] > threshold for k in range(n)] for j in range(n)] for i in range(n)]
    for _ in range(iterations):
        nxt = [[[cur[i][j][k] for k in range(n)] for j in range(n)] for i in range(n)]
        for i in range(n):
            for j in range(n):
                for k in range(n):
                    if cur[i][j][k]:
                        for di, dj, dk in FACE:
                            a, b, c = i + di, j + dj, k + dk
                            if 0 <= a < n and 0 <= b < n and 0 <= c < n:
                                nxt[a][b][c] = True
        cur = nxt
    return cur


def loop_loss(logits, bone, soft, seg, ct, lam, smooth=1e-5, eps=1e-7, soft_weight=1.0):
    """Scalar single-pass evaluation of the cascade objective on a cubic patch."""
    n = logits.shape[0]
    prob = 1.0 / (1.0 + np.exp(-logits))
    region = loop_region(prob)
    inter = psum = gsum = bce = 0.0
    sb = nb = ss = ns = 0.0
    for i in range(n):
        for j in range(n):
            for k in range(n):
                p, g = float(prob[i, j, k]), float(seg[i, j, k])
                inter += p * g
                psum += p
                gsum += g
                pc = min(max(p, eps), 1 - eps)
                bce -= g * math.log(pc) + (1 - g) * math.log(1 - pc)
                if region[i][j][k]:
                    sb += (bone[i, j, k] - ct[i, j, k]) ** 2
                    nb += 1
                else:
                    ss += (soft[i, j, k] - ct[i, j, k]) ** 2
                    ns += 1
    dice = 1 - (2 * inter + smooth) / (psum + gsum + smooth)
    bce /= n**3
    mb = sb / nb if nb else 0.0
    ms = ss / ns if ns else 0.0
    return (1 - lam) * dice + lam * bce + mb + soft_weight * ms


def random_instance(rng, n=8):
    seg = np.zeros((n, n, n))
    c = rng.integers(2, n - 2, size=3)
    seg[c[0] - 1 : c[0] + 1, :, c[2] - 2 : c[2] + 2] = 1.0
    logits = rng.normal(scale=2.0, size=(n, n, n)) + 4.0 * (seg - 0.5) * rng.random()
    return logits, rng.random((n, n, n)), rng.random((n, n, n)), seg, rng.random((n, n, n))


@pytest.mark.parametrize("lam", [0.0, 0.5, 1.0])
def test_composite_matches_voxel_loop(lam):
    rng = np.random.default_rng(int(lam * 10))
    cfg = LossConfig(lam=lam)
    for _ in range(50):
        arrs = random_instance(rng)
        t = [torch.from_numpy(a) for a in arrs]
        got = composite_loss_single(*t, cfg).total.item()
        ref = loop_loss(*arrs, lam)
        assert abs(got - ref) <= 1e-6 * abs(ref)


def test_batch_loss_is_mean_of_patches():
    rng = np.random.default_rng(5)
    insts = [random_instance(rng) for _ in range(3)]
    stack = lambda k: torch.from_numpy(np.stack([i[k] for i in insts])[:, None])
    out = ModelOutputs(seg_logits=stack(0), bone_hu=stack(1), soft_hu=stack(2))
    got = composite_loss(out, stack(3), stack(4)).total.item()
    ref = np.mean([loop_loss(*i, 0.5) for i in insts])
    assert got == pytest.approx(ref, rel=1e-9)


def test_regression_mask_drops_hu_terms():
    rng = np.random.default_rng(6)
    logits, bone, soft, seg, ct = (torch.from_numpy(a)[None, None] for a in random_instance(rng))
    out = ModelOutputs(seg_logits=logits, bone_hu=bone, soft_hu=soft)
    lb = composite_loss(out, seg, ct, regression_mask=[False])
    assert lb.mse_bone.item() == 0.0 and lb.mse_soft.item() == 0.0
    assert lb.total.item() == pytest.approx(0.5 * lb.dice.item() + 0.5 * lb.bce.item())


def test_dice_examples():
    gt = torch.zeros(4, 4, 4)
    gt[:2] = 1
    assert soft_dice_loss(gt, gt).item() < 1e-5
    assert soft_dice_loss(1 - gt, gt).item() == pytest.approx(1.0, abs=1e-6)
    assert soft_dice_loss(torch.full_like(gt, 0.5), gt).item() == pytest.approx(0.5, abs=1e-6)


def test_bce_examples():
    gt = (torch.rand(5, 5, 5) > 0.5).double()
    assert bce_loss(torch.full_like(gt, 0.5), gt).item() == pytest.approx(math.log(2), abs=1e-12)
    assert bce_loss(gt, gt).item() < 1e-6
    assert bce_loss(torch.zeros(3, 3, 3, dtype=torch.float64), torch.ones(3, 3, 3, dtype=torch.float64)).item() == pytest.approx(
        -math.log(1e-7), rel=1e-9
    )


def test_masked_mse(rng):
    pred = torch.from_numpy(rng.random((8, 8, 8)))
    gt = torch.from_numpy(rng.random((8, 8, 8)))
    region = rng.random((8, 8, 8)) > 0.6
    ref = sum((pred[idx].item() - gt[idx].item()) ** 2 for idx in zip(*np.nonzero(region))) / region.sum()
    assert masked_mse(pred, gt, region).item() == pytest.approx(ref, rel=1e-6)
    assert masked_mse(pred, gt, np.ones((8, 8, 8), bool)).item() == pytest.approx(((pred - gt) ** 2).mean().item())
    single = np.zeros((8, 8, 8), bool)
    single[1, 2, 3] = True
    assert masked_mse(gt + 0.5, gt, single).item() == pytest.approx(0.25)
    assert masked_mse(pred, gt, np.zeros((8, 8, 8), bool)) is None
    assert masked_mse(pred, gt, np.zeros((8, 8, 8), bool), EmptyRegionRule.ZERO_TERM).item() == 0.0


def test_perfect_outputs_near_zero():
    seg = torch.zeros(8, 8, 8, dtype=torch.float64)
    seg[3:5] = 1
    ct = torch.rand(8, 8, 8, dtype=torch.float64)
    logits = (seg - 0.5) * 40
    lb = composite_loss_single(logits, ct, ct, seg, ct, LossConfig())
    assert lb.total.item() <= 1e-4


def test_lambda_affine(rng):
    arrs = [torch.from_numpy(a) for a in random_instance(rng)]
    t = {lam: composite_loss_single(*arrs, LossConfig(lam=lam)) for lam in (0.0, 0.5, 1.0)}
    assert t[0.5].total.item() == pytest.approx((t[0.0].total.item() + t[1.0].total.item()) / 2, rel=1e-12)
    lb = t[0.0]
    assert lb.total.item() == pytest.approx(lb.dice.item() + lb.mse_bone.item() + lb.mse_soft.item(), rel=1e-12)
    assert lb.bce.item() > 0


def test_bone_term_ignores_off_region_changes(rng):
    logits, bone, soft, seg, ct = (torch.from_numpy(a) for a in random_instance(rng))
    cfg = LossConfig()
    base = composite_loss_single(logits, bone, soft, seg, ct, cfg)
    region = torch.from_numpy(loop_region_np(logits.numpy()))
    bumped = torch.where(region, bone, bone + 7.0)
    again = composite_loss_single(logits, bumped, soft, seg, ct, cfg)
    assert again.mse_bone.item() == base.mse_bone.item()
    assert again.region_size == base.region_size == int(region.sum())


def loop_region_np(logits):
    return np.array(loop_region(1 / (1 + np.exp(-logits))), dtype=bool)


def test_region_has_no_gradient(rng):
    logits, bone, soft, seg, ct = (torch.from_numpy(a).requires_grad_() for a in random_instance(rng))
    lb = composite_loss_single(logits, bone, soft, seg.detach(), ct.detach(), LossConfig(lam=0.0))
    (lb.mse_bone + lb.mse_soft).backward()
    assert logits.grad is None or torch.all(logits.grad == 0)
    assert bone.grad.abs().sum() > 0


def test_single_task_loss():
    ct = torch.rand(2, 1, 4, 4, 4)
    out = ModelOutputs(direct=ct + 0.1)
    lb = single_task_loss(out, ct)
    assert lb.total.item() == pytest.approx(0.01, rel=1e-5)
    assert lb.total.item() == lb.mse_global.item()


def test_config_validation():
    with pytest.raises(ConfigError):
        LossConfig(lam=1.5)
    with pytest.raises(ConfigError):
        LossConfig(soft_weight=-1)
