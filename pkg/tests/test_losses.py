import math

import pytest
import torch

import harness
from ssl_alpnet.errors import DivergenceError, ShapeMismatchError
from ssl_alpnet.losses import LossConfig, alignment_loss, seg_loss, total_loss
from ssl_alpnet.model import ALPNet, AlpConfig, Encoder

f64 = torch.float64


def _half_half(h=4, w=6):
    target = torch.zeros(h, w, dtype=torch.bool)
    target[:, : w // 2] = True
    return torch.full((2, h, w), 0.5, dtype=f64), target


def test_uniform_prediction_closed_form():
    probs, target = _half_half()
    loss = seg_loss(probs, target, LossConfig(bg_weight=0.05, fg_weight=1.0)).item()
    assert abs(loss - (0.5 * 1.0 + 0.5 * 0.05) * math.log(2)) < 1e-9
    assert abs(loss - 0.3639) < 1e-4


def test_perfect_prediction():
    _, target = _half_half()
    probs = torch.stack([~target, target]).to(f64)
    assert seg_loss(probs, target).item() <= 1e-10


def test_weight_linearity(rng):
    probs = torch.softmax(torch.randn(3, 2, 5, 5, dtype=f64), dim=1)
    target = torch.rand(3, 5, 5) > 0.5
    fg1 = seg_loss(probs, target, LossConfig(bg_weight=0.0, fg_weight=1.0))
    fg2 = seg_loss(probs, target, LossConfig(bg_weight=0.0, fg_weight=2.0))
    assert fg2.item() == 2 * fg1.item()
    both = seg_loss(probs, target, LossConfig(bg_weight=0.05, fg_weight=1.0))
    bg = seg_loss(probs, target, LossConfig(bg_weight=0.05, fg_weight=0.0))
    assert abs(both.item() - fg1.item() - bg.item()) < 1e-12
    assert bg.item() >= 0 and fg1.item() >= 0


def test_log_clamp_keeps_loss_finite():
    target = torch.ones(2, 2, dtype=torch.bool)
    probs = torch.stack([torch.ones(2, 2), torch.zeros(2, 2)]).to(f64)
    loss = seg_loss(probs, target).item()
    assert math.isfinite(loss) and abs(loss - -math.log(1e-12)) < 1e-9


def test_shape_mismatch():
    with pytest.raises(ShapeMismatchError):
        seg_loss(torch.full((2, 4, 4), 0.5), torch.zeros(4, 5, dtype=torch.bool))


def _sign_model():
    return ALPNet(Encoder.from_spec(harness.GRAD_ENCODER), AlpConfig(window_train=(2, 2)))


def test_alignment_perfect_identity_episode():
    mask = torch.zeros(1, 8, 8, dtype=torch.bool)
    mask[0, 2:6, 0:4] = True
    feats = torch.where(mask, 1.0, -1.0).to(f64)[:, None]  # D=1 features: +1 fg, -1 bg
    probs = torch.stack([~mask, mask], dim=1).to(f64)
    loss = alignment_loss(_sign_model(), feats, mask, feats, probs)
    assert 0 <= loss.item() <= 1e-10


def test_alignment_zero_when_prediction_has_no_foreground():
    mask = torch.zeros(1, 8, 8, dtype=torch.bool)
    mask[0, 2:6, 2:6] = True
    feats = torch.randn(1, 3, 8, 8, dtype=f64)
    probs = torch.stack([torch.ones(1, 8, 8), torch.zeros(1, 8, 8)], dim=1).to(f64)
    assert alignment_loss(_sign_model(), feats, mask, feats, probs).item() == 0.0


def test_alignment_nonnegative():
    torch.manual_seed(0)
    for _ in range(10):
        mask = torch.rand(1, 8, 8) > 0.5
        feats = torch.randn(1, 3, 8, 8, dtype=f64)
        probs = torch.softmax(torch.randn(1, 2, 8, 8, dtype=f64), dim=1)
        assert alignment_loss(_sign_model(), feats, mask, feats, probs).item() >= 0


def test_total_loss_arithmetic():
    assert total_loss(0.5, 0.25, LossConfig(lambda_reg=1.0)) == 0.75
    assert total_loss(0.5, 0.25, LossConfig(lambda_reg=0.0)) == 0.5
    assert abs(total_loss(0.0, 0.1, LossConfig(lambda_reg=2.0)) - 0.2) < 1e-15
    with pytest.raises(DivergenceError):
        total_loss(torch.tensor(float("nan")), 0.0)
    with pytest.raises(DivergenceError):
        total_loss(0.0, float("inf"))


def test_gradient_matches_finite_differences():
    err, info = harness.gradcheck_instance()
    assert info["reg"] > 0 and info["seg"] > 0
    assert err < 1e-3, info


def test_invalid_loss_config():
    with pytest.raises(ValueError):
        LossConfig(bg_weight=-1.0)
    with pytest.raises(ValueError):
        LossConfig(lambda_reg=-0.5)
