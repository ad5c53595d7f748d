"""Loss-function tests: exact examples, brute-force oracles, gradients."""

import math

import numpy as np
import pytest
import torch

from docmark import losses
from docmark.errors import InvalidInputError, TrainingDiagnosticError
from gradcheck import check_input_gradient

W = losses.LossWeights()


def rand_image_t(rng, h=8, w=8):
    return torch.from_numpy(rng.uniform(0, 255, (3, h, w))).double()


# ---------------------------------------------------------------------------
# Image loss (YUV-weighted MSE)
# ---------------------------------------------------------------------------

def test_image_loss_zero_on_identical():
    img = rand_image_t(np.random.default_rng(0))
    assert losses.image_loss(img, img, W).item() == 0.0


def test_image_loss_uniform_offset():
    # +1 on all RGB moves Y by exactly 1 and leaves U, V untouched.
    cover = rand_image_t(np.random.default_rng(1))
    marked = cover + 1.0
    assert abs(losses.image_loss(cover, marked, W).item() - W.s_y) < 1e-9


def test_image_loss_brute_force_oracle():
    rng = np.random.default_rng(2)
    for _ in range(10):
        cover = rng.uniform(0, 255, (8, 8, 3))
        marked = rng.uniform(0, 255, (8, 8, 3))
        acc = [0.0, 0.0, 0.0]
        for i in range(8):
            for j in range(8):
                def yuv(px):
                    y = 0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2]
                    u = 0.5 * (px[2] - y) / (1 - 0.114) + 128
                    v = 0.5 * (px[0] - y) / (1 - 0.299) + 128
                    return y, u, v
                a = yuv(cover[i, j])
                b = yuv(marked[i, j])
                for c in range(3):
                    acc[c] += (a[c] - b[c]) ** 2
        expected = sum(s * a / 64.0 for s, a in zip((W.s_y, W.s_u, W.s_v), acc))
        got = losses.image_loss(
            torch.from_numpy(cover.transpose(2, 0, 1)),
            torch.from_numpy(marked.transpose(2, 0, 1)), W).item()
        assert abs(got - expected) <= 1e-9 * max(1.0, abs(expected))


def test_image_loss_shape_mismatch():
    with pytest.raises(InvalidInputError):
        losses.image_loss(torch.zeros(3, 8, 8), torch.zeros(3, 8, 9), W)


# ---------------------------------------------------------------------------
# Text-sensitive loss
# ---------------------------------------------------------------------------

def test_text_loss_zero_on_identical():
    img = rand_image_t(np.random.default_rng(3))
    assert losses.text_loss(img, img, W).item() == 0.0


def test_text_loss_black_pixel_example():
    cover = torch.zeros(3, 1, 1, dtype=torch.float64)
    marked = torch.full((3, 1, 1), 10.0, dtype=torch.float64)
    # |10| * (255-0)/255 * (3 + 6 + 1) = 100
    assert abs(losses.text_loss(cover, marked, W).item() - 100.0) < 1e-9


def test_text_loss_white_pixel_unpunished():
    cover = torch.full((3, 1, 1), 255.0, dtype=torch.float64)
    marked = torch.full((3, 1, 1), 245.0, dtype=torch.float64)
    assert losses.text_loss(cover, marked, W).item() == 0.0


def test_text_loss_brute_force_oracle():
    rng = np.random.default_rng(4)
    for _ in range(10):
        cover = rng.uniform(0, 255, (8, 8, 3))
        marked = rng.uniform(0, 255, (8, 8, 3))
        expected = 0.0
        for c, s in zip(range(3), (W.s_r, W.s_g, W.s_b)):
            acc = 0.0
            for i in range(8):
                for j in range(8):
                    acc += abs(marked[i, j, c] - cover[i, j, c]) * (255 - cover[i, j, c]) / 255
            expected += s * acc / 64.0
        got = losses.text_loss(
            torch.from_numpy(cover.transpose(2, 0, 1)),
            torch.from_numpy(marked.transpose(2, 0, 1)), W).item()
        assert abs(got - expected) <= 1e-9 * max(1.0, abs(expected))


def test_text_loss_monotone_in_residual():
    rng = np.random.default_rng(5)
    cover = rand_image_t(rng)
    marked = cover + torch.from_numpy(rng.uniform(0.5, 3, (3, 8, 8)))
    base = losses.text_loss(cover, marked, W).item()
    bumped = marked.clone()
    bumped[1, 4, 4] += 5.0  # any pixel with nonzero darkness weight
    assert cover[1, 4, 4] < 255.0
    assert losses.text_loss(cover, bumped, W).item() > base


# ---------------------------------------------------------------------------
# Watermark loss (BCE, summed over bits)
# ---------------------------------------------------------------------------

def test_watermark_loss_perfect_prediction():
    bits = torch.tensor([1.0, 0.0, 1.0, 1.0])
    value = losses.watermark_loss(bits, bits).item()
    assert 0.0 <= value <= 4 * 2e-7  # clamp makes it ~N * 1e-7


def test_watermark_loss_maximal_uncertainty():
    n = 16
    bits = torch.randint(0, 2, (n,)).double()
    probs = torch.full((n,), 0.5, dtype=torch.float64)
    assert abs(losses.watermark_loss(bits, probs).item() - n * math.log(2)) < 1e-12


def test_watermark_loss_hand_example():
    got = losses.watermark_loss(torch.tensor([1.0, 0.0]), torch.tensor([0.9, 0.2])).item()
    expected = -(math.log(0.9) + math.log(0.8))
    assert abs(got - expected) < 1e-6
    assert abs(expected - 0.3285) < 1e-4


def test_watermark_loss_brute_force_oracle():
    rng = np.random.default_rng(6)
    for _ in range(10):
        bits = rng.integers(0, 2, 32).astype(np.float64)
        probs = rng.uniform(0.01, 0.99, 32)
        expected = 0.0
        for w_i, p_i in zip(bits, probs):
            expected += -(w_i * math.log(p_i) + (1 - w_i) * math.log(1 - p_i))
        got = losses.watermark_loss(torch.from_numpy(bits), torch.from_numpy(probs)).item()
        assert abs(got - expected) <= 1e-9 * max(1.0, abs(expected))


def test_watermark_loss_batched_mean_of_sums():
    bits = torch.tensor([[1.0, 0.0], [0.0, 1.0]])
    probs = torch.tensor([[0.9, 0.2], [0.3, 0.7]])
    per_row = [losses.watermark_loss(bits[i], probs[i]).item() for i in range(2)]
    assert abs(losses.watermark_loss(bits, probs).item() - np.mean(per_row)) < 1e-12


def test_watermark_loss_length_mismatch():
    with pytest.raises(InvalidInputError):
        losses.watermark_loss(torch.zeros(4), torch.zeros(5))


# ---------------------------------------------------------------------------
# Total loss and the lambda ramp
# ---------------------------------------------------------------------------

def test_total_loss_zero_weights():
    total, bd = losses.total_loss(1.0, 2.0, 3.0, (0.0, 0.0, 0.0))
    assert bd.l_total == 0.0


def test_total_loss_arithmetic():
    total, bd = losses.total_loss(1.0, 2.0, 3.0, (1.5, 1.5, 2.0))
    assert abs(bd.l_total - 10.5) < 1e-12
    assert abs(bd.l_total - (1.5 * bd.l_image + 1.5 * bd.l_text + 2.0 * bd.l_watermark)) < 1e-9


def test_total_loss_linear_in_lambda():
    rng = np.random.default_rng(7)
    li, lt, lw = rng.uniform(0, 5, 3)
    for lam in (0.1, 0.7, 2.3):
        _, a = losses.total_loss(li, lt, lw, (lam, 0.0, 0.0))
        assert abs(a.l_total - lam * li) < 1e-12


def test_total_loss_nan_abort_names_component():
    with pytest.raises(TrainingDiagnosticError, match="text"):
        losses.total_loss(1.0, math.nan, 3.0, (1.0, 1.0, 1.0))


def test_lambda_ramp_values():
    assert losses.lambda_ramp(0) == (0.0, 0.0, 0.0)
    assert losses.lambda_ramp(7500) == (0.75, 0.75, 1.0)
    assert losses.lambda_ramp(15000) == (1.5, 1.5, 2.0)
    assert losses.lambda_ramp(20000) == (1.5, 1.5, 2.0)


def test_lambda_ramp_monotone():
    prev = (-1.0, -1.0, -1.0)
    for it in range(0, 20000, 500):
        cur = losses.lambda_ramp(it)
        assert all(c >= p for c, p in zip(cur, prev))
        prev = cur


# ---------------------------------------------------------------------------
# Gradients (module invariant: tol 1e-4, away from |.| kinks)
# ---------------------------------------------------------------------------

def _kink_free_pair(rng):
    cover = torch.from_numpy(rng.uniform(20, 235, (3, 8, 8)))
    signs = torch.from_numpy(rng.choice([-1.0, 1.0], (3, 8, 8)))
    marked = cover + signs * torch.from_numpy(rng.uniform(0.5, 3.0, (3, 8, 8)))
    return cover, marked


def test_image_loss_gradient():
    cover, marked = _kink_free_pair(np.random.default_rng(8))
    check_input_gradient(lambda m: losses.image_loss(cover, m, W), marked, tol=1e-4)


def test_text_loss_gradient():
    cover, marked = _kink_free_pair(np.random.default_rng(9))
    check_input_gradient(lambda m: losses.text_loss(cover, m, W), marked, tol=1e-4)


def test_watermark_loss_gradient():
    rng = np.random.default_rng(10)
    bits = torch.from_numpy(rng.integers(0, 2, 16).astype(np.float64))
    probs = torch.from_numpy(rng.uniform(0.1, 0.9, 16))
    check_input_gradient(lambda p: losses.watermark_loss(bits, p), probs, tol=1e-4)
