"""Image representation, YUV color conversion, and quality metrics.

Images are numpy arrays of shape (H, W, 3), RGB order, values on the
[0, 255] scale.  Training-path tensors use the torch layout (..., 3, H, W)
on the same scale; ``to_tensor``/``to_image`` convert between the two.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass

import numpy as np
import torch
from PIL import Image
from scipy.signal import convolve2d

from .errors import InvalidInputError

# BT.601 luma weights (also the JFIF YCbCr convention used by JPEG).
W_R, W_G, W_B = 0.299, 0.587, 0.114

# SSIM constants per Wang et al.: 11x11 Gaussian window, sigma 1.5.
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03

DEFAULT_TEXT_THRESHOLD = 128.0


def as_image(img, name: str = "image") -> np.ndarray:
    """Coerce to a float64 (H, W, 3) array and check ImageTensor invariants."""
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise InvalidInputError(f"{name}: expected shape (H, W, 3), got {arr.shape}")
    if arr.shape[0] < 8 or arr.shape[1] < 8:
        raise InvalidInputError(f"{name}: height and width must be >= 8, got {arr.shape[:2]}")
    return arr


def require_quantized(img: np.ndarray, name: str = "image") -> np.ndarray:
    """Reject images that are not integral and inside [0, 255]."""
    arr = as_image(img, name)
    if arr.min() < 0 or arr.max() > 255:
        raise InvalidInputError(f"{name}: quantized values must lie in [0, 255]")
    if not np.array_equal(arr, np.round(arr)):
        raise InvalidInputError(f"{name}: quantized values must be integral")
    return arr


def _require_same_shape(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise InvalidInputError(f"shape mismatch: {a.shape} vs {b.shape}")


def quantize(img) -> np.ndarray:
    """Clamp to [0, 255] and round to integers (the export step)."""
    arr = as_image(img)
    return np.round(np.clip(arr, 0.0, 255.0))


def to_tensor(img) -> torch.Tensor:
    """(H, W, 3) array on [0, 255] -> float32 tensor (3, H, W), same scale."""
    arr = as_image(img)
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(2, 0, 1))).float()


def to_image(t: torch.Tensor) -> np.ndarray:
    """(3, H, W) or (1, 3, H, W) tensor -> float64 (H, W, 3) array."""
    x = t.detach().cpu()
    if x.ndim == 4:
        if x.shape[0] != 1:
            raise InvalidInputError(f"expected a single image, got batch of {x.shape[0]}")
        x = x[0]
    if x.ndim != 3 or x.shape[0] != 3:
        raise InvalidInputError(f"expected tensor shape (3, H, W), got {tuple(x.shape)}")
    return x.permute(1, 2, 0).numpy().astype(np.float64)


def load_png(path) -> np.ndarray:
    """Read an 8-bit RGB PNG (or any PIL-readable image) as (H, W, 3) floats."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return as_image(arr, str(path))


def save_png(img, path) -> None:
    """Quantize and write as 8-bit RGB PNG."""
    arr = quantize(img).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path, format="PNG")


# ---------------------------------------------------------------------------
# Color conversion (BT.601 full range, chroma offset 128)
# ---------------------------------------------------------------------------

def rgb_to_yuv(img) -> np.ndarray:
    """RGB -> YUV: Y = 0.299R+0.587G+0.114B, U/V = scaled B-Y / R-Y + 128."""
    arr = as_image(img)
    r, g, b = arr[..., 0], arr[..., 1], arr[..., 2]
    y = W_R * r + W_G * g + W_B * b
    u = 0.5 * (b - y) / (1.0 - W_B) + 128.0
    v = 0.5 * (r - y) / (1.0 - W_R) + 128.0
    return np.stack([y, u, v], axis=-1)


def yuv_to_rgb(img) -> np.ndarray:
    """Inverse of :func:`rgb_to_yuv`."""
    arr = as_image(img)
    y, u, v = arr[..., 0], arr[..., 1], arr[..., 2]
    r = y + 2.0 * (1.0 - W_R) * (v - 128.0)
    b = y + 2.0 * (1.0 - W_B) * (u - 128.0)
    g = (y - W_R * r - W_B * b) / W_G
    return np.stack([r, g, b], axis=-1)


def rgb_to_yuv_t(x: torch.Tensor) -> torch.Tensor:
    """Torch variant on (..., 3, H, W) tensors; differentiable."""
    if x.shape[-3] != 3:
        raise InvalidInputError(f"expected channel axis of size 3, got {tuple(x.shape)}")
    r, g, b = x.unbind(dim=-3)
    y = W_R * r + W_G * g + W_B * b
    u = 0.5 * (b - y) / (1.0 - W_B) + 128.0
    v = 0.5 * (r - y) / (1.0 - W_R) + 128.0
    return torch.stack([y, u, v], dim=-3)


def yuv_to_rgb_t(x: torch.Tensor) -> torch.Tensor:
    if x.shape[-3] != 3:
        raise InvalidInputError(f"expected channel axis of size 3, got {tuple(x.shape)}")
    y, u, v = x.unbind(dim=-3)
    r = y + 2.0 * (1.0 - W_R) * (v - 128.0)
    b = y + 2.0 * (1.0 - W_B) * (u - 128.0)
    g = (y - W_R * r - W_B * b) / W_G
    return torch.stack([r, g, b], dim=-3)


# ---------------------------------------------------------------------------
# Quality metrics
# ---------------------------------------------------------------------------

def psnr(a, b) -> float:
    """10*log10(255^2 / MSE); +inf when the images are identical."""
    x = require_quantized(a, "a")
    y = require_quantized(b, "b")
    _require_same_shape(x, y)
    mse = float(np.mean((x - y) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(255.0 ** 2 / mse)


def _gaussian_window(size: int, sigma: float) -> np.ndarray:
    half = (size - 1) / 2.0
    coords = np.arange(size) - half
    g = np.exp(-(coords ** 2) / (2.0 * sigma ** 2))
    k = np.outer(g, g)
    return k / k.sum()


def ssim(a, b) -> float:
    """Single-scale SSIM on the Y channel (Gaussian window, full 'valid' mean)."""
    x = require_quantized(a, "a")
    y = require_quantized(b, "b")
    _require_same_shape(x, y)
    if x.shape[0] < SSIM_WINDOW or x.shape[1] < SSIM_WINDOW:
        raise InvalidInputError(
            f"image {x.shape[:2]} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window"
        )
    ya = rgb_to_yuv(x)[..., 0]
    yb = rgb_to_yuv(y)[..., 0]
    win = _gaussian_window(SSIM_WINDOW, SSIM_SIGMA)
    c1 = (SSIM_K1 * 255.0) ** 2
    c2 = (SSIM_K2 * 255.0) ** 2

    mu1 = convolve2d(ya, win, mode="valid")
    mu2 = convolve2d(yb, win, mode="valid")
    s11 = convolve2d(ya * ya, win, mode="valid") - mu1 * mu1
    s22 = convolve2d(yb * yb, win, mode="valid") - mu2 * mu2
    s12 = convolve2d(ya * yb, win, mode="valid") - mu1 * mu2

    num = (2.0 * mu1 * mu2 + c1) * (2.0 * s12 + c2)
    den = (mu1 * mu1 + mu2 * mu2 + c1) * (s11 + s22 + c2)
    return float(np.mean(num / den))


def text_pixel_mask(cover, threshold: float = DEFAULT_TEXT_THRESHOLD) -> np.ndarray:
    """Boolean (H, W) ink mask: true where min(R, G, B) < threshold."""
    arr = require_quantized(cover, "cover")
    return arr.min(axis=2) < threshold


def cpp(cover, marked, mask) -> float:
    """Change intensity per text pixel: per-channel mean |diff| over ink pixels, summed."""
    a = as_image(cover, "cover")
    b = as_image(marked, "marked")
    _require_same_shape(a, b)
    m = np.asarray(mask, dtype=bool)
    if m.shape != a.shape[:2]:
        raise InvalidInputError(f"mask shape {m.shape} does not match image {a.shape[:2]}")
    n_t = int(m.sum())
    if n_t == 0:
        warnings.warn("CPP undefined: no text pixels in mask", RuntimeWarning, stacklevel=2)
        return math.nan
    diff = np.abs(a[m] - b[m])  # (n_t, 3)
    return float(diff.mean(axis=0).sum())


def bit_accuracy(bits, probs) -> float:
    """Fraction of bits recovered after thresholding probabilities at 0.5."""
    w = np.asarray(bits)
    p = np.asarray(probs, dtype=np.float64)
    if w.shape != p.shape or w.ndim != 1:
        raise InvalidInputError(f"length mismatch: bits {w.shape} vs probs {p.shape}")
    if p.size and (p.min() < 0.0 or p.max() > 1.0):
        raise InvalidInputError("probabilities must lie in [0, 1]")
    if not np.all((w == 0) | (w == 1)):
        raise InvalidInputError("bits must be 0 or 1")
    decided = (p >= 0.5).astype(np.int64)
    return float(np.mean(decided == w.astype(np.int64)))


@dataclass
class QualityReport:
    """PSNR (dB), SSIM, and CPP for a cover/marked pair."""

    psnr: float
    ssim: float
    cpp: float

    def to_json(self) -> str:
        return json.dumps({k: float_to_json(v) for k, v in
                           (("psnr", self.psnr), ("ssim", self.ssim), ("cpp", self.cpp))})

    @classmethod
    def from_json(cls, text: str) -> "QualityReport":
        d = json.loads(text)
        return cls(psnr=float_from_json(d["psnr"]),
                   ssim=float_from_json(d["ssim"]),
                   cpp=float_from_json(d["cpp"]))


def float_to_json(v: float):
    """Map non-finite floats to JSON-safe strings ("inf", "-inf", "nan")."""
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    if math.isnan(v):
        return "nan"
    return float(v)


def float_from_json(v) -> float:
    if isinstance(v, str):
        return {"inf": math.inf, "-inf": -math.inf, "nan": math.nan}[v]
    return float(v)


def quality_report(cover, marked, threshold: float = DEFAULT_TEXT_THRESHOLD) -> QualityReport:
    """PSNR/SSIM/CPP of a quantized cover/marked pair (mask from the cover)."""
    mask = text_pixel_mask(cover, threshold)
    return QualityReport(psnr=psnr(cover, marked), ssim=ssim(cover, marked),
                         cpp=cpp(cover, marked, mask))
