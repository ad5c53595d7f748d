"""Training losses: YUV-weighted image loss, text-sensitive loss, watermark
BCE, their weighted total, and the linear lambda ramp schedule.

All losses are differentiable torch functions over (..., 3, H, W) image
tensors on the [0, 255] scale (the unclamped training-path output) and
return scalar tensors.  Plain floats work too for reporting purposes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from .errors import InvalidInputError, TrainingDiagnosticError
from .imaging import rgb_to_yuv_t

LOG_EPS = 1e-7
LAMBDA_TARGETS = (1.5, 1.5, 2.0)
LAMBDA_RAMP_ITERS = 15000


@dataclass(frozen=True)
class LossWeights:
    """Per-channel weights and loss mixing factors (Table-1 defaults)."""

    s_y: float = 100.0
    s_u: float = 1.0
    s_v: float = 1.0
    s_r: float = 3.0
    s_g: float = 6.0
    s_b: float = 1.0
    lambda_i: float = 1.5
    lambda_t: float = 1.5
    lambda_w: float = 2.0

    def __post_init__(self):
        for name in ("s_y", "s_u", "s_v", "s_r", "s_g", "s_b", "lambda_i", "lambda_t", "lambda_w"):
            if getattr(self, name) < 0:
                raise InvalidInputError(f"loss weight {name} must be nonnegative")

    @property
    def lambdas(self) -> tuple[float, float, float]:
        return (self.lambda_i, self.lambda_t, self.lambda_w)


def _as_tensor(x, name: str) -> torch.Tensor:
    t = x if torch.is_tensor(x) else torch.as_tensor(x, dtype=torch.float64)
    if t.shape[-3] != 3:
        raise InvalidInputError(f"{name}: expected channel-first image tensor (..., 3, H, W)")
    return t


def image_loss(cover, marked, weights: LossWeights = LossWeights()) -> torch.Tensor:
    """Per-channel YUV MSE weighted by (s_Y, s_U, s_V)."""
    c = _as_tensor(cover, "cover")
    m = _as_tensor(marked, "marked")
    if c.shape != m.shape:
        raise InvalidInputError(f"shape mismatch: {tuple(c.shape)} vs {tuple(m.shape)}")
    dy, du, dv = (rgb_to_yuv_t(m) - rgb_to_yuv_t(c)).unbind(dim=-3)
    return (dy.pow(2).mean() * weights.s_y
            + du.pow(2).mean() * weights.s_u
            + dv.pow(2).mean() * weights.s_v)


def text_loss(cover, marked, weights: LossWeights = LossWeights()) -> torch.Tensor:
    """Darkness-weighted mean absolute RGB difference, weighted by (s_R, s_G, s_B)."""
    c = _as_tensor(cover, "cover")
    m = _as_tensor(marked, "marked")
    if c.shape != m.shape:
        raise InvalidInputError(f"shape mismatch: {tuple(c.shape)} vs {tuple(m.shape)}")
    darkness = (255.0 - c) / 255.0  # computed from the cover
    per_channel = ((m - c).abs() * darkness)
    r, g, b = per_channel.unbind(dim=-3)
    return r.mean() * weights.s_r + g.mean() * weights.s_g + b.mean() * weights.s_b


def watermark_loss(bits, probs) -> torch.Tensor:
    """Binary cross entropy summed over the N bits (natural log, clamped probs).

    Batched (B, N) inputs give the mean over the batch of per-image sums.
    """
    w = bits if torch.is_tensor(bits) else torch.as_tensor(bits, dtype=torch.float64)
    p = probs if torch.is_tensor(probs) else torch.as_tensor(probs, dtype=torch.float64)
    if w.shape != p.shape:
        raise InvalidInputError(f"length mismatch: bits {tuple(w.shape)} vs probs {tuple(p.shape)}")
    w = w.to(p.dtype)
    p = p.clamp(LOG_EPS, 1.0 - LOG_EPS)
    per_bit = -(w * torch.log(p) + (1.0 - w) * torch.log(1.0 - p))
    if per_bit.ndim == 1:
        return per_bit.sum()
    return per_bit.sum(dim=-1).mean()


@dataclass
class LossBreakdown:
    l_image: float
    l_text: float
    l_watermark: float
    l_total: float


def _component_value(x) -> float:
    return float(x.detach()) if torch.is_tensor(x) else float(x)


def total_loss(l_image, l_text, l_watermark,
               lambdas: tuple[float, float, float]) -> tuple[torch.Tensor, LossBreakdown]:
    """Weighted total; aborts with the offending component named on NaN.

    Returns the total as given (tensor if any input is a tensor, for
    backward passes) plus a plain-float breakdown for logging.
    """
    li, lt, lw = lambdas
    for name, value in (("image", l_image), ("text", l_text), ("watermark", l_watermark)):
        if math.isnan(_component_value(value)):
            raise TrainingDiagnosticError(f"{name} loss is NaN; aborting")
    total = li * l_image + lt * l_text + lw * l_watermark
    breakdown = LossBreakdown(
        l_image=_component_value(l_image),
        l_text=_component_value(l_text),
        l_watermark=_component_value(l_watermark),
        l_total=_component_value(total),
    )
    return total, breakdown


def lambda_ramp(iteration: int,
                targets: tuple[float, float, float] = LAMBDA_TARGETS,
                ramp_len: int = LAMBDA_RAMP_ITERS) -> tuple[float, float, float]:
    """Linear ramp from (0, 0, 0) at iteration 0 to the targets at ramp_len."""
    if iteration < 0:
        raise InvalidInputError(f"iteration must be >= 0, got {iteration}")
    frac = min(iteration / ramp_len, 1.0) if ramp_len > 0 else 1.0
    return tuple(t * frac for t in targets)
