import itertools

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from scipy import ndimage

from mixsegdec.losses import (
    LossConfig,
    SupervisionTier,
    classification_loss,
    dilate_mask,
    distance_weight_mask,
    downsample_max,
    gamma_indicator,
    lambda_schedule,
    prepare_targets,
    segmentation_loss,
    total_loss,
)


def test_lambda_schedule():
    assert lambda_schedule(0, 50) == 1
    assert lambda_schedule(50, 50) == 0
    assert lambda_schedule(25, 50) == 0.5
    assert lambda_schedule(49, 50) <= 1 / 50
    for n_ep in range(1, 200):
        assert lambda_schedule(n_ep - 1, n_ep) <= 1 / n_ep
    assert lambda_schedule(10, 50, dynamic_balancing=False) == 0.5
    assert lambda_schedule(10, 50, dynamic_balancing=False, fallback=0.3) == 0.3
    with pytest.raises(ValueError):
        lambda_schedule(51, 50)
    with pytest.raises(ValueError):
        lambda_schedule(0, 0)


def test_gamma():
    assert gamma_indicator(SupervisionTier.NEGATIVE) == 1
    assert gamma_indicator(SupervisionTier.POSITIVE_PIXEL_LABELED) == 1
    assert gamma_indicator(SupervisionTier.POSITIVE_WEAK) == 0
    assert gamma_indicator("positive_weak") == 0


def test_total_loss():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        l_seg, l_cls, delta = rng.uniform(0, 10, 3)
        lam = rng.uniform()
        gamma = int(rng.integers(2))
        expected = lam*gamma*l_seg + (1-lam) * delta * l_cls
        assert abs(total_loss(l_seg, l_cls, lam, gamma, delta) - expected) < 1e-12
    with pytest.raises(ValueError):
        total_loss(1, 1, 1.5, 1, 1)


def _window_max(mask, kernel):
    h, w = mask.shape
    half = kernel // 2
    res = np.zeros_like(mask)
    for r, c in itertools.product(range(h), range(w)):
        res[r, c] = mask[max(0, r - half):r + half + 1, max(0, c - half):c + half + 1].max()
    return res


@pytest.mark.parametrize("kernel", [1, 3, 7])
def test_dilate(kernel):
    rng = np.random.default_rng(kernel)
    for _ in range(20):
        mask = (rng.uniform(size=(16, 12)) > 0.93).astype(np.uint8)
        assert (dilate_mask(mask, kernel) == _window_max(mask, kernel)).all()
    with pytest.raises(ValueError):
        dilate_mask(mask, 4)


def _regions(mask):
    """8-connected flood fill"""
    labels = np.zeros(mask.shape, dtype=int)
    num = 0
    for start in zip(*np.nonzero(mask)):
        if labels[start]:
            continue
        num += 1
        stack = [start]
        labels[start] = num
        while stack:
            r, c = stack.pop()
            for dr, dc in itertools.product((-1, 0, 1), repeat=2):
                rr, cc = r + dr, c + dc
                if (0 <= rr < mask.shape[0] and 0 <= cc < mask.shape[1] and mask[rr, cc]
                        and not labels[rr, cc]):
                    labels[rr, cc] = num
                    stack.append((rr, cc))
    return labels, num


def _weights_oracle(mask, w_pos, p):
    neg = np.argwhere(~mask)
    dist = np.zeros(mask.shape)
    for r, c in np.argwhere(mask):
        dist[r, c] = np.sqrt(((neg - (r, c))**2).sum(1).min())
    labels, num = _regions(mask)
    res = np.ones(mask.shape)
    for i in range(1, num + 1):
        region = labels == i
        res[region] = w_pos * (dist[region] / dist[region].max())**p
    return res


@pytest.mark.timeout(60)
def test_distance_weights_oracle():
    rng = np.random.default_rng(42)
    for _ in range(200):
        mask = rng.uniform(size=(16, 16)) < rng.uniform(0.1, 0.7)
        if mask.all() or not mask.any():
            continue
        w_pos, p = rng.uniform(0.5, 10), rng.choice([1, 2, 0.5])
        res = distance_weight_mask(mask, w_pos, p)
        assert np.abs(res - _weights_oracle(mask, w_pos, p)).max() < 1e-9


def test_distance_weights_properties():
    mask = np.zeros((21, 21), dtype=bool)
    mask[3:18, 5:16] = True
    weights = distance_weight_mask(mask, 3, 2)
    assert (weights[~mask] == 1).all()
    assert weights[mask].max() == pytest.approx(3)
    row = weights[10, 5:11] # edge towards centre
    assert (np.diff(row) >= 0).all()
    assert row[0] < row[-1]

    # every region reaches w_pos at its own maximum
    mask[19:21, 0:2] = True
    weights = distance_weight_mask(mask, 3, 1)
    assert weights[19:21, 0:2].max() == pytest.approx(3)
    assert weights[3:18, 5:16].max() == pytest.approx(3)
    # per-image maximum instead
    weights = distance_weight_mask(mask, 3, 1, per_region_max=False)
    assert weights[19:21, 0:2].max() < 3

    assert (distance_weight_mask(np.zeros((8, 8)), 3, 2) == 1).all()
    assert (distance_weight_mask(np.ones((8, 8)), 3, 2) == 3).all()


def test_downsample_max():
    arr = np.zeros((16, 24))
    arr[9, 17] = 2
    res = downsample_max(arr)
    assert res.shape == (2, 3)
    assert res[1, 2] == 2
    assert res.sum() == 2
    with pytest.raises(ValueError):
        downsample_max(np.zeros((10, 16)))


def test_prepare_targets():
    mask = np.zeros((64, 64), dtype=np.uint8)
    mask[20:30, 20:30] = 1
    config = LossConfig(w_pos=5, p=1, dilation_kernel=3)
    target, weights = prepare_targets(mask, mask.shape, config,
                                      SupervisionTier.POSITIVE_PIXEL_LABELED)
    assert target.shape == weights.shape == (8, 8)
    assert target[2:4, 2:4].all()
    assert target.sum() == 4
    assert weights.max() == pytest.approx(5)
    assert (weights[target == 0] == 1).all()

    target, weights = prepare_targets(None, (64, 64), config, SupervisionTier.NEGATIVE)
    assert not target.any()
    assert (weights == 1).all()

    assert prepare_targets(mask, mask.shape, config, SupervisionTier.POSITIVE_WEAK) is None

    flat = LossConfig(distance_transform_enabled=False)
    target, weights = prepare_targets(mask, mask.shape, flat,
                                      SupervisionTier.POSITIVE_PIXEL_LABELED)
    assert (weights == 1).all()
    assert target.sum() == 4


def test_segmentation_loss():
    gen = torch.Generator().manual_seed(0)
    logits = torch.randn(2, 1, 4, 4, generator=gen)
    target = (torch.rand(2, 1, 4, 4, generator=gen) > 0.5).float()
    weights = torch.rand(2, 1, 4, 4, generator=gen) * 3
    prob = torch.sigmoid(logits)
    bce = -(target * prob.log() + (1-target) * (1-prob).log())
    expected = (bce * weights).mean() # over pixels, not over the weight sum
    assert segmentation_loss(logits, target, weights).item() == pytest.approx(
        expected.item(), rel=1e-5)
    per_sample = segmentation_loss(logits, target, weights, reduction="sample")
    assert per_sample.shape == (2,)
    assert per_sample.mean().item() == pytest.approx(expected.item(), rel=1e-5)
    with pytest.raises(ValueError):
        segmentation_loss(logits, target[:, :, :2], weights)


def test_classification_loss():
    logit = torch.tensor([0.0, 2.0])
    res = classification_loss(logit, torch.tensor([1, 0]), reduction="sample")
    assert res[0].item() == pytest.approx(np.log(2))
    assert res[1].item() == pytest.approx(np.log(1 + np.exp(2)), rel=1e-6)


def test_distance_weights_strip():
    strip = np.zeros((1, 7), dtype=bool)
    strip[0, 2:5] = True
    assert distance_weight_mask(strip, 1, 1) == pytest.approx(
        np.array([[1, 1, 0.5, 1, 0.5, 1, 1]]))


def test_distance_weights_p():
    rng = np.random.default_rng(7)
    for _ in range(50):
        mask = rng.uniform(size=(16, 16)) < 0.5
        w1, w2, w_half = (distance_weight_mask(mask, 2, p) for p in (1, 2, 0.5))
        assert (w2 <= w1 + 1e-12).all()
        assert (w_half >= w1 - 1e-12).all()
        assert (w1[~mask] == 1).all() and (w2[~mask] == 1).all()


def test_dilation_raises_boundary_weights():
    mask = np.zeros((64, 64), dtype=bool)
    mask[20:30, 20:30] = True
    boundary = mask & ~ndimage.binary_erosion(mask)
    for p in (1, 2):
        plain = distance_weight_mask(mask, 1, p)
        dilated = distance_weight_mask(dilate_mask(mask, 7), 1, p)
        assert (dilated[boundary] > plain[boundary]).all()
        assert plain[20, 25] == pytest.approx(0.2**p)
        assert dilated[20, 25] == pytest.approx(0.5**p)


def test_unit_weights_match_bce():
    gen = torch.Generator().manual_seed(3)
    logits = torch.randn(2, 1, 8, 8, generator=gen)
    mask = np.zeros((64, 64), dtype=np.uint8)
    mask[8:40, 16:24] = 1
    config = LossConfig(w_pos=1, distance_transform_enabled=False)
    target, weights = prepare_targets(mask, mask.shape, config,
                                      SupervisionTier.POSITIVE_PIXEL_LABELED)
    target = torch.from_numpy(target)[None, None].expand(2, 1, 8, 8)
    weights = torch.from_numpy(weights)[None, None].expand(2, 1, 8, 8)
    assert (weights == 1).all()
    assert segmentation_loss(logits, target, weights).item() == pytest.approx(
        F.binary_cross_entropy_with_logits(logits, target).item(), rel=1e-6)
