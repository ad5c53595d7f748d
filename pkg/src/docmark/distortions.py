"""The noise layer: six distortions with differentiable and real paths.

All operations work on torch tensors of shape (B, 3, H, W) or (3, H, W) on
the [0, 255] scale and preserve the input shape.  Randomized distortions
take an explicit ``torch.Generator`` so callers own determinism.

JPEG has two paths: ``jpeg_approx`` replaces the non-differentiable
quantization with a cubic rounding surrogate (training), ``jpeg_real``
round-trips through an actual baseline JFIF codec (evaluation).
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, replace

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .errors import InvalidConfigError, InvalidInputError, InvalidParameterError
from .imaging import rgb_to_yuv_t, yuv_to_rgb_t

KINDS = ("dropout", "cropout", "gaussian_blur", "gaussian_noise", "resize", "jpeg")

# Table 1 training ranges (resize clamped below 0.1 to avoid degenerate sizes).
TRAIN_RANGES = {
    "dropout": (0.0, 0.10),       # r_d in (0, 0.10]
    "cropout": (0.0, 0.10),       # r_c in (0, 0.10]
    "gaussian_blur": (1.0, 3.0),  # sigma, window fixed at 3
    "gaussian_noise": (0.0, 0.02),
    "resize": (0.1, 0.5),
    "jpeg": (50.0, 100.0),        # q in [50, 100)
}
BLUR_TRAIN_WINDOW = 3

# Annex-K base quantization tables (luminance / chrominance).
JPEG_LUMA_TABLE = np.array([
    [16, 11, 10, 16, 24, 40, 51, 61],
    [12, 12, 14, 19, 26, 58, 60, 55],
    [14, 13, 16, 24, 40, 57, 69, 56],
    [14, 17, 22, 29, 51, 87, 80, 62],
    [18, 22, 37, 56, 68, 109, 103, 77],
    [24, 35, 55, 64, 81, 104, 113, 92],
    [49, 64, 78, 87, 103, 121, 120, 101],
    [72, 92, 95, 98, 112, 100, 103, 99],
], dtype=np.float64)
JPEG_CHROMA_TABLE = np.array([
    [17, 18, 24, 47, 99, 99, 99, 99],
    [18, 21, 26, 66, 99, 99, 99, 99],
    [24, 26, 56, 99, 99, 99, 99, 99],
    [47, 66, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
], dtype=np.float64)


@dataclass(frozen=True)
class DistortionSpec:
    """One distortion instance: kind, headline parameter, and path selector.

    ``param`` carries r_d, r_c, the blur window, delta_n, r_r, or q; blur
    additionally carries ``sigma`` (defaults to (window - 1) / 4 when unset).
    """

    kind: str
    param: float = 0.0
    sigma: float | None = None
    path: str = "real"
    rng_seed: int | None = None

    def __post_init__(self):
        if self.kind not in KINDS + ("identity",):
            raise InvalidParameterError(f"unknown distortion kind {self.kind!r}")
        if self.path not in ("differentiable", "real"):
            raise InvalidParameterError(f"path must be 'differentiable' or 'real', got {self.path!r}")

    def label(self) -> str:
        k, p = self.kind, self.param
        if k == "dropout":
            return f"Dropout (r_d={p:g})"
        if k == "cropout":
            return f"Cropout (r_c={p:g})"
        if k == "gaussian_blur":
            return f"Gaussian Blur (delta_b={int(p)})"
        if k == "gaussian_noise":
            return f"Gaussian Noise (delta_n={p:g})"
        if k == "resize":
            return f"Resize (r_r={p:g})"
        if k == "jpeg":
            return f"JPEG Compression (q={int(p)})"
        return "Identity"


def parse_attack(text: str) -> DistortionSpec:
    """Parse a CLI attack string such as ``jpeg=50`` or ``dropout=0.3``."""
    aliases = {"blur": "gaussian_blur", "noise": "gaussian_noise"}
    name, _, value = text.partition("=")
    kind = aliases.get(name.strip().lower(), name.strip().lower())
    if kind == "identity":
        return DistortionSpec("identity")
    if kind not in KINDS:
        raise InvalidParameterError(f"unknown attack {name!r} in {text!r}")
    if not value:
        raise InvalidParameterError(f"attack {text!r} is missing its parameter (kind=param)")
    try:
        param = float(value)
    except ValueError as exc:
        raise InvalidParameterError(f"bad attack parameter in {text!r}") from exc
    return DistortionSpec(kind, param)


@dataclass(frozen=True)
class NoiseRegime:
    """Noise scheduling: basic (identity), specified (one kind), or combined."""

    mode: str
    kind: str | None = None

    def __post_init__(self):
        if self.mode not in ("basic", "specified", "combined"):
            raise InvalidConfigError(f"unknown regime mode {self.mode!r}")
        if self.mode == "specified":
            if self.kind not in KINDS:
                raise InvalidConfigError(f"specified regime needs a kind from {KINDS}, got {self.kind!r}")
        elif self.kind is not None:
            raise InvalidConfigError(f"{self.mode} regime takes no kind")

    @classmethod
    def basic(cls) -> "NoiseRegime":
        return cls("basic")

    @classmethod
    def specified(cls, kind: str) -> "NoiseRegime":
        return cls("specified", kind)

    @classmethod
    def combined(cls) -> "NoiseRegime":
        return cls("combined")

    @classmethod
    def parse(cls, text: str) -> "NoiseRegime":
        text = text.strip().lower()
        if text == "basic":
            return cls.basic()
        if text == "combined":
            return cls.combined()
        if text.startswith("specified:"):
            aliases = {"blur": "gaussian_blur", "noise": "gaussian_noise"}
            kind = text.split(":", 1)[1]
            return cls.specified(aliases.get(kind, kind))
        raise InvalidConfigError(f"unknown regime {text!r} (basic | specified:KIND | combined)")

    def __str__(self) -> str:
        return f"specified:{self.kind}" if self.mode == "specified" else self.mode

    def sample(self, generator: torch.Generator) -> DistortionSpec:
        """Draw the distortion spec for one training batch."""
        if self.mode == "basic":
            return DistortionSpec("identity", path="differentiable")
        if self.mode == "specified":
            kind = self.kind
        else:
            kind = KINDS[int(torch.randint(0, len(KINDS), (1,), generator=generator))]
        u = float(torch.rand((), generator=generator))
        lo, hi = TRAIN_RANGES[kind]
        if kind == "gaussian_blur":
            return DistortionSpec(kind, float(BLUR_TRAIN_WINDOW),
                                  sigma=lo + (hi - lo) * u, path="differentiable")
        if kind in ("dropout", "cropout", "gaussian_noise"):
            param = hi * (1.0 - u)  # (0, hi]: excludes the degenerate 0
        else:
            param = lo + (hi - lo) * u
        return DistortionSpec(kind, param, path="differentiable")


# ---------------------------------------------------------------------------
# Individual distortions
# ---------------------------------------------------------------------------

def _batched(x: torch.Tensor, name: str) -> tuple[torch.Tensor, bool]:
    if x.ndim == 3:
        return x.unsqueeze(0), False
    if x.ndim == 4:
        return x, True
    raise InvalidInputError(f"{name}: expected (3, H, W) or (B, 3, H, W), got {tuple(x.shape)}")


def _unbatch(x: torch.Tensor, batched: bool) -> torch.Tensor:
    return x if batched else x.squeeze(0)


def _pair(marked: torch.Tensor, cover: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, bool]:
    m, mb = _batched(marked, "marked")
    c, cb = _batched(cover, "cover")
    if m.shape != c.shape:
        raise InvalidInputError(f"marked {tuple(marked.shape)} vs cover {tuple(cover.shape)}")
    return m, c, mb and cb


def dropout(marked: torch.Tensor, cover: torch.Tensor, r_d: float,
            generator: torch.Generator | None = None) -> torch.Tensor:
    """Replace each pixel by the cover pixel with probability r_d (per-pixel, shared over channels)."""
    if not 0.0 <= r_d <= 1.0:
        raise InvalidParameterError(f"r_d must be in [0, 1], got {r_d}")
    m, c, batched = _pair(marked, cover)
    u = torch.rand((m.shape[0], 1, m.shape[2], m.shape[3]),
                   generator=generator, dtype=m.dtype)
    keep = (u < r_d).to(m.dtype)  # 1 = replaced by cover; constant for gradients
    out = keep * c + (1.0 - keep) * m
    return _unbatch(out, batched)


def cropout(marked: torch.Tensor, cover: torch.Tensor, r_c: float,
            generator: torch.Generator | None = None) -> torch.Tensor:
    """Keep a random rectangle of area ratio r_c from the marked image, cover elsewhere."""
    if not 0.0 < r_c <= 1.0:
        raise InvalidParameterError(f"r_c must be in (0, 1], got {r_c}")
    m, c, batched = _pair(marked, cover)
    h, w = m.shape[-2:]
    side = math.sqrt(r_c)
    kh, kw = int(side * h), int(side * w)
    if kh < 1 or kw < 1:
        raise InvalidParameterError(f"cropout rectangle degenerates to zero at r_c={r_c} for {h}x{w}")
    top = int(torch.randint(0, h - kh + 1, (1,), generator=generator))
    left = int(torch.randint(0, w - kw + 1, (1,), generator=generator))
    region = torch.zeros((1, 1, h, w), dtype=m.dtype)
    region[..., top:top + kh, left:left + kw] = 1.0
    out = region * m + (1.0 - region) * c
    return _unbatch(out, batched)


def gaussian_kernel(window: int, sigma: float) -> np.ndarray:
    """Normalized 2-D Gaussian kernel (float64, entries sum to 1)."""
    if window < 3 or window % 2 == 0:
        raise InvalidParameterError(f"blur window must be odd and >= 3, got {window}")
    if sigma <= 0:
        raise InvalidParameterError(f"blur sigma must be > 0, got {sigma}")
    coords = np.arange(window, dtype=np.float64) - (window - 1) / 2.0
    g = np.exp(-(coords ** 2) / (2.0 * sigma ** 2))
    k = np.outer(g, g)
    return k / k.sum()


def gaussian_blur(img: torch.Tensor, window: int = 3, sigma: float = 1.0) -> torch.Tensor:
    """Per-channel convolution with a normalized window x window Gaussian, reflect padding."""
    x, batched = _batched(img, "img")
    k = torch.from_numpy(gaussian_kernel(window, sigma)).to(x.dtype)
    weight = k.expand(x.shape[1], 1, window, window).contiguous()
    r = window // 2
    padded = F.pad(x, (r, r, r, r), mode="reflect")
    out = F.conv2d(padded, weight, groups=x.shape[1])
    return _unbatch(out, batched)


def gaussian_noise(img: torch.Tensor, delta_n: float,
                   generator: torch.Generator | None = None) -> torch.Tensor:
    """Add i.i.d. N(0, (255*delta_n)^2) noise; delta_n is on the [0, 1] pixel scale."""
    if delta_n < 0:
        raise InvalidParameterError(f"delta_n must be >= 0, got {delta_n}")
    x, batched = _batched(img, "img")
    noise = torch.randn(x.shape, generator=generator, dtype=x.dtype) * (255.0 * delta_n)
    return _unbatch(x + noise, batched)


def resize_attack(img: torch.Tensor, r_r: float) -> torch.Tensor:
    """Bilinear downscale by r_r then upscale back to the original size."""
    if not 0.0 < r_r <= 1.0:
        raise InvalidParameterError(f"r_r must be in (0, 1], got {r_r}")
    x, batched = _batched(img, "img")
    h, w = x.shape[-2:]
    nh, nw = int(r_r * h), int(r_r * w)
    if nh < 1 or nw < 1:
        raise InvalidParameterError(f"resize to {nh}x{nw} is degenerate at r_r={r_r}")
    down = F.interpolate(x, size=(nh, nw), mode="bilinear", align_corners=False)
    up = F.interpolate(down, size=(h, w), mode="bilinear", align_corners=False)
    return _unbatch(up, batched)


# ---------------------------------------------------------------------------
# JPEG
# ---------------------------------------------------------------------------

def jpeg_qf(q: float) -> float:
    """Quality-to-scale mapping applied to the base quantization tables."""
    if not 1.0 <= q < 100.0:
        raise InvalidParameterError(f"quality must be in [1, 100), got {q}")
    if q < 50.0:
        return 50.0 / q + 0.0001
    return 2.0 - 0.02 * q + 0.0001


def _dct_matrix(dtype: torch.dtype) -> torch.Tensor:
    n = np.arange(8)
    k = n.reshape(-1, 1)
    mat = np.cos(np.pi * (2 * n + 1) * k / 16.0)
    mat[0, :] *= math.sqrt(1.0 / 8.0)
    mat[1:, :] *= math.sqrt(2.0 / 8.0)
    return torch.from_numpy(mat).to(dtype)


def _blockify(x: torch.Tensor) -> torch.Tensor:
    b, c, h, w = x.shape
    x = x.reshape(b, c, h // 8, 8, w // 8, 8)
    return x.permute(0, 1, 2, 4, 3, 5)  # (B, C, nh, nw, 8, 8)


def _unblockify(x: torch.Tensor, h: int, w: int) -> torch.Tensor:
    b, c = x.shape[:2]
    return x.permute(0, 1, 2, 4, 3, 5).reshape(b, c, h, w)


def jpeg_approx(img: torch.Tensor, q: float, rounded: bool = False) -> torch.Tensor:
    """Differentiable JPEG: blockwise DCT plus a cubic quantization surrogate.

    Each DCT coefficient d with quantization step t = table * q_f becomes
    (x + (round(x) - x)^3) * t for x = d / t; no chroma subsampling.  With
    ``rounded=True`` the resulting coefficient is additionally rounded to the
    nearest integer (evaluation semantics; non-differentiable).
    """
    x, batched = _batched(img, "img")
    h, w = x.shape[-2:]
    if h % 8 or w % 8:
        raise InvalidInputError(f"image dimensions must be multiples of 8, got {h}x{w}")
    qf = jpeg_qf(q)
    dct = _dct_matrix(x.dtype)
    tables = torch.stack([
        torch.from_numpy(JPEG_LUMA_TABLE),
        torch.from_numpy(JPEG_CHROMA_TABLE),
        torch.from_numpy(JPEG_CHROMA_TABLE),
    ]).to(x.dtype)
    step = tables.reshape(1, 3, 1, 1, 8, 8) * qf

    ycc = rgb_to_yuv_t(x) - 128.0
    blocks = _blockify(ycc)
    coeff = torch.einsum("ij,bcnmjk,lk->bcnmil", dct, blocks, dct)
    ratio = coeff / step
    surrogate = ratio + (torch.round(ratio) - ratio) ** 3
    coeff2 = surrogate * step
    if rounded:
        coeff2 = torch.round(coeff2)
    blocks2 = torch.einsum("ji,bcnmjk,kl->bcnmil", dct, coeff2, dct)
    out = yuv_to_rgb_t(_unblockify(blocks2, h, w) + 128.0)
    return _unbatch(out, batched)


def jpeg_real(img: torch.Tensor, q: float, subsampling: int | None = None) -> torch.Tensor:
    """Round trip through a real baseline JFIF codec at integer quality q.

    Uses the codec's default chroma subsampling unless ``subsampling`` is
    given (0 = 4:4:4).  Input must be quantized (integral values in [0, 255]).
    """
    x, batched = _batched(img, "img")
    if not 1 <= q <= 100:
        raise InvalidParameterError(f"quality must be in [1, 100], got {q}")
    arr = x.detach().cpu().numpy()
    if arr.min() < 0 or arr.max() > 255 or not np.array_equal(arr, np.round(arr)):
        raise InvalidInputError("jpeg_real requires a quantized image (integral values in [0, 255])")
    out = np.empty_like(arr)
    for i in range(arr.shape[0]):
        rgb = arr[i].transpose(1, 2, 0).astype(np.uint8)
        buf = io.BytesIO()
        kwargs = {"quality": int(round(q))}
        if subsampling is not None:
            kwargs["subsampling"] = subsampling
        Image.fromarray(rgb, "RGB").save(buf, format="JPEG", **kwargs)
        buf.seek(0)
        with Image.open(buf) as decoded:
            out[i] = np.asarray(decoded.convert("RGB"), dtype=arr.dtype).transpose(2, 0, 1)
    result = torch.from_numpy(out).to(x.dtype)
    return _unbatch(result, batched)


# ---------------------------------------------------------------------------
# Dispatch
# ---------------------------------------------------------------------------

def apply_spec(marked: torch.Tensor, cover: torch.Tensor | None, spec: DistortionSpec,
               generator: torch.Generator | None = None) -> torch.Tensor:
    """Apply one distortion spec; dropout/cropout require the cover image."""
    if generator is None and spec.rng_seed is not None:
        generator = torch.Generator().manual_seed(int(spec.rng_seed))
    kind = spec.kind
    if kind == "identity":
        return marked
    if kind in ("dropout", "cropout"):
        if cover is None:
            raise InvalidInputError(f"{kind} is defined relative to the cover image; none given")
        fn = dropout if kind == "dropout" else cropout
        return fn(marked, cover, spec.param, generator)
    if kind == "gaussian_blur":
        window = int(spec.param)
        sigma = spec.sigma if spec.sigma is not None else (window - 1) / 4.0
        return gaussian_blur(marked, window, sigma)
    if kind == "gaussian_noise":
        return gaussian_noise(marked, spec.param, generator)
    if kind == "resize":
        return resize_attack(marked, spec.param)
    if kind == "jpeg":
        if spec.path == "differentiable":
            return jpeg_approx(marked, spec.param)
        return jpeg_real(marked, spec.param)
    raise InvalidParameterError(f"unknown distortion kind {kind!r}")


def apply_regime(marked: torch.Tensor, cover: torch.Tensor, regime: NoiseRegime,
                 generator: torch.Generator | None = None
                 ) -> tuple[torch.Tensor, DistortionSpec]:
    """Sample one distortion per the regime, apply it, and report what ran.

    Degenerate draws (e.g. a cropout rectangle flooring to zero pixels at
    small sizes) are resampled.
    """
    for _ in range(100):
        spec = regime.sample(generator)
        try:
            return apply_spec(marked, cover, spec, generator), spec
        except InvalidParameterError:
            continue
    raise InvalidParameterError(f"could not draw a valid distortion for regime {regime}")
