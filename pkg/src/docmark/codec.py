"""Trainable watermark encoder/decoder and checkpoint serialization.

The encoder expands an N-bit watermark through a fully connected layer into
a (H/8, W/8, 3) grid, nearest-upsamples it to cover size, and runs seven
3x3 convolutions with the expanded watermark re-fed to the outputs of
Conv1-5 and the cover re-fed to the outputs of Conv2 and Conv5.  The final
3-channel mask is added to the cover scaled by the embedding strength.

The decoder is seven strided 3x3 convolutions (strides 1,2,1,2,2,2,2)
followed by flatten, a dense layer to N logits, and a sigmoid.

Checkpoints are zip archives holding a JSON metadata header plus one raw
little-endian float32 array per named parameter.
"""

from __future__ import annotations

import io
import json
import math
import warnings
import zipfile
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import imaging
from .errors import InvalidConfigError, InvalidInputError

CHECKPOINT_FORMAT_VERSION = 1
DEFAULT_ENCODER_CHANNELS = 64
DEFAULT_DECODER_CHANNELS = (32, 32, 64, 64, 128, 128, 128)
DECODER_STRIDES = (1, 2, 1, 2, 2, 2, 2)
EXPANSION_FACTOR = 8
# Zip entries carry a fixed timestamp so identical models give identical bytes.
_ZIP_EPOCH = (1980, 1, 1, 0, 0, 0)


# ---------------------------------------------------------------------------
# Bit strings
# ---------------------------------------------------------------------------

def validate_bits(bits, n: int | None = None) -> np.ndarray:
    arr = np.asarray(bits)
    if arr.ndim != 1 or arr.size < 1:
        raise InvalidInputError(f"bit string must be a non-empty 1-D sequence, got shape {arr.shape}")
    if not np.all((arr == 0) | (arr == 1)):
        raise InvalidInputError("bit string elements must be exactly 0 or 1")
    if n is not None and arr.size != n:
        raise InvalidInputError(f"expected {n} bits, got {arr.size}")
    return arr.astype(np.uint8)


def random_bits(n: int, rng: np.random.Generator) -> np.ndarray:
    return rng.integers(0, 2, size=n, dtype=np.uint8)


def bits_to_hex(bits) -> str:
    """Big-endian-within-nibble hex encoding; requires N divisible by 4."""
    arr = validate_bits(bits)
    if arr.size % 4 != 0:
        raise InvalidInputError("hex encoding needs a bit count divisible by 4")
    digits = []
    for i in range(0, arr.size, 4):
        val = arr[i] * 8 + arr[i + 1] * 4 + arr[i + 2] * 2 + arr[i + 3]
        digits.append(format(int(val), "x"))
    return "".join(digits)


def hex_to_bits(text: str, n: int) -> np.ndarray:
    if n % 4 != 0:
        raise InvalidInputError("hex decoding needs a bit count divisible by 4")
    if len(text) != n // 4:
        raise InvalidInputError(f"expected {n // 4} hex digits for {n} bits, got {len(text)}")
    try:
        bits = []
        for ch in text:
            val = int(ch, 16)
            bits.extend([(val >> 3) & 1, (val >> 2) & 1, (val >> 1) & 1, val & 1])
    except ValueError as exc:
        raise InvalidInputError(f"invalid hex digit in {text!r}") from exc
    return np.array(bits, dtype=np.uint8)


def parse_bits(text: str, n: int) -> np.ndarray:
    """Parse a CLI watermark: 0/1 string of length N, or N/4 hex digits."""
    text = text.strip().lower()
    if set(text) <= {"0", "1"} and len(text) == n:
        return np.array([int(c) for c in text], dtype=np.uint8)
    if n % 4 == 0 and len(text) == n // 4:
        return hex_to_bits(text, n)
    raise InvalidInputError(
        f"watermark must be {n} binary digits" + (f" or {n // 4} hex digits" if n % 4 == 0 else "")
    )


# ---------------------------------------------------------------------------
# Networks
# ---------------------------------------------------------------------------

def _pad_same(x: torch.Tensor, kernel: int, stride: int) -> torch.Tensor:
    """TensorFlow-style 'same' padding so that out = ceil(in / stride)."""
    ih, iw = x.shape[-2:]
    ph = max((math.ceil(ih / stride) - 1) * stride + kernel - ih, 0)
    pw = max((math.ceil(iw / stride) - 1) * stride + kernel - iw, 0)
    return F.pad(x, (pw // 2, pw - pw // 2, ph // 2, ph - ph // 2))


def glorot_init(layer: nn.Module, generator: torch.Generator | None = None) -> None:
    """Glorot-uniform weights, zero bias: for linear output heads."""
    fan_in, fan_out = nn.init._calculate_fan_in_and_fan_out(layer.weight)
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    with torch.no_grad():
        layer.weight.uniform_(-limit, limit, generator=generator)
        if layer.bias is not None:
            layer.bias.zero_()


def he_init(layer: nn.Module, generator: torch.Generator | None = None) -> None:
    """He-uniform weights (fan-in, ReLU gain), zero bias: for hidden layers.

    Glorot everywhere makes the 7-layer ReLU stacks attenuate activations by
    more than an order of magnitude, which leaves the decoder's logit signal
    below the batch noise floor and stalls training at chance accuracy.
    """
    fan_in, _ = nn.init._calculate_fan_in_and_fan_out(layer.weight)
    limit = math.sqrt(6.0 / fan_in)
    with torch.no_grad():
        layer.weight.uniform_(-limit, limit, generator=generator)
        if layer.bias is not None:
            layer.bias.zero_()


class EncoderNet(nn.Module):
    """Watermark expansion plus the 7-layer convolutional mask generator."""

    def __init__(self, height: int, width: int, n_bits: int,
                 channels: int = DEFAULT_ENCODER_CHANNELS):
        super().__init__()
        if height % EXPANSION_FACTOR or width % EXPANSION_FACTOR:
            raise InvalidConfigError(
                f"image dimensions must be divisible by {EXPANSION_FACTOR}, got {height}x{width}"
            )
        if n_bits < 1:
            raise InvalidConfigError("watermark length must be >= 1")
        self.height = height
        self.width = width
        self.n_bits = n_bits
        self.channels = channels
        self.grid_h = height // EXPANSION_FACTOR
        self.grid_w = width // EXPANSION_FACTOR
        self.fc = nn.Linear(n_bits, self.grid_h * self.grid_w * 3)
        # w_e is re-fed to the outputs of Conv1-5, the cover to Conv2 and Conv5.
        in_plan = [6, channels + 3, channels + 6, channels + 3,
                   channels + 3, channels + 6, channels]
        out_plan = [channels] * 6 + [3]
        self.convs = nn.ModuleList(
            nn.Conv2d(i, o, kernel_size=3, stride=1, padding=1)
            for i, o in zip(in_plan, out_plan)
        )

    def reset_parameters(self, generator: torch.Generator | None = None) -> None:
        he_init(self.fc, generator)
        for conv in self.convs[:-1]:
            he_init(conv, generator)
        glorot_init(self.convs[-1], generator)

    def expand(self, bits: torch.Tensor) -> torch.Tensor:
        """(B, N) bits -> (B, 3, H, W) expanded watermark (FC + ReLU + x8 nearest)."""
        if bits.ndim != 2 or bits.shape[1] != self.n_bits:
            raise InvalidInputError(f"expected bits of shape (B, {self.n_bits}), got {tuple(bits.shape)}")
        x = F.relu(self.fc(bits))
        x = x.reshape(bits.shape[0], 3, self.grid_h, self.grid_w)
        return F.interpolate(x, scale_factor=EXPANSION_FACTOR, mode="nearest")

    def mask(self, cover: torch.Tensor, w_e: torch.Tensor) -> torch.Tensor:
        """(B, 3, H, W) cover and expanded watermark -> (B, 3, H, W) mask."""
        if cover.shape != w_e.shape:
            raise InvalidInputError(f"cover {tuple(cover.shape)} vs expanded watermark {tuple(w_e.shape)}")
        if cover.shape[-2:] != (self.height, self.width):
            raise InvalidInputError(
                f"encoder built for {self.height}x{self.width}, got {tuple(cover.shape[-2:])}"
            )
        c = (cover - 128.0) / 128.0
        x = torch.cat([c, w_e], dim=1)
        for i, conv in enumerate(self.convs[:-1]):
            x = F.relu(conv(x))
            extra = [x, w_e]
            if i in (1, 4):  # outputs of Conv2 and Conv5 also see the cover
                extra.append(c)
            x = torch.cat(extra, dim=1)
        # Conv7 consumes only Conv6's features; linear activation.  The fixed
        # output gain puts the freshly initialized mask at a perceptible
        # fraction of the [0, 255] range; without it the decoder starts from
        # a sub-quantization signal and training stalls at chance.
        return 255.0 * self.convs[-1](x[:, : self.channels])

    def forward(self, cover: torch.Tensor, bits: torch.Tensor) -> torch.Tensor:
        return self.mask(cover, self.expand(bits))


class DecoderNet(nn.Module):
    """Seven strided convolutions, flatten, dense to N logits."""

    def __init__(self, height: int, width: int, n_bits: int,
                 channels: tuple[int, ...] = DEFAULT_DECODER_CHANNELS):
        super().__init__()
        if len(channels) != len(DECODER_STRIDES):
            raise InvalidConfigError(f"decoder channel plan needs {len(DECODER_STRIDES)} entries")
        self.height = height
        self.width = width
        self.n_bits = n_bits
        self.channels = tuple(int(c) for c in channels)
        convs = []
        in_ch = 3
        for out_ch, stride in zip(self.channels, DECODER_STRIDES):
            convs.append(nn.Conv2d(in_ch, out_ch, kernel_size=3, stride=stride, padding=0))
            in_ch = out_ch
        self.convs = nn.ModuleList(convs)
        h, w = height, width
        for s in DECODER_STRIDES:
            h, w = math.ceil(h / s), math.ceil(w / s)
        self.out_h, self.out_w = h, w
        self.dense = nn.Linear(self.channels[-1] * h * w, n_bits)

    def reset_parameters(self, generator: torch.Generator | None = None) -> None:
        for conv in self.convs:
            he_init(conv, generator)
        glorot_init(self.dense, generator)

    def logits(self, img: torch.Tensor) -> torch.Tensor:
        if img.shape[-3:] != (3, self.height, self.width):
            raise InvalidInputError(
                f"decoder built for 3x{self.height}x{self.width}, got {tuple(img.shape[-3:])}"
            )
        x = (img - 128.0) / 128.0
        for conv, stride in zip(self.convs, DECODER_STRIDES):
            x = F.relu(conv(_pad_same(x, 3, stride)))
        return self.dense(x.flatten(1))

    def forward(self, img: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.logits(img))


def add_mask(cover, mask, alpha: float):
    """Eq.-style addition cover + alpha * mask, unclamped (training path)."""
    if alpha < 0:
        raise InvalidInputError(f"embedding strength must be >= 0, got {alpha}")
    c = cover if torch.is_tensor(cover) else imaging.as_image(cover, "cover")
    m = mask if torch.is_tensor(mask) else np.asarray(mask, dtype=np.float64)
    if tuple(c.shape) != tuple(m.shape):
        raise InvalidInputError(f"cover {tuple(c.shape)} vs mask {tuple(m.shape)}")
    return c + alpha * m


# ---------------------------------------------------------------------------
# Codec container and checkpoint format
# ---------------------------------------------------------------------------

@dataclass
class CodecMeta:
    watermark_length: int = 100
    image_height: int = 400
    image_width: int = 400
    alpha_train: float = 1.0
    noise_regime: str = "untrained"
    iterations: int = 0
    encoder_channels: int = DEFAULT_ENCODER_CHANNELS
    decoder_channels: tuple[int, ...] = field(default_factory=lambda: DEFAULT_DECODER_CHANNELS)

    def to_dict(self) -> dict:
        return {
            "format_version": CHECKPOINT_FORMAT_VERSION,
            "watermark_length": self.watermark_length,
            "image_height": self.image_height,
            "image_width": self.image_width,
            "alpha_train": self.alpha_train,
            "noise_regime": self.noise_regime,
            "iterations": self.iterations,
            "channel_plan": {
                "encoder": self.encoder_channels,
                "decoder": list(self.decoder_channels),
            },
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CodecMeta":
        if d.get("format_version") != CHECKPOINT_FORMAT_VERSION:
            raise InvalidConfigError(f"unsupported checkpoint format version {d.get('format_version')}")
        plan = d["channel_plan"]
        return cls(
            watermark_length=int(d["watermark_length"]),
            image_height=int(d["image_height"]),
            image_width=int(d["image_width"]),
            alpha_train=float(d["alpha_train"]),
            noise_regime=str(d["noise_regime"]),
            iterations=int(d["iterations"]),
            encoder_channels=int(plan["encoder"]),
            decoder_channels=tuple(int(c) for c in plan["decoder"]),
        )


class Codec:
    """An encoder/decoder pair with its metadata; the unit of checkpointing."""

    def __init__(self, meta: CodecMeta, seed: int | None = None):
        self.meta = meta
        self.encoder = EncoderNet(meta.image_height, meta.image_width,
                                  meta.watermark_length, meta.encoder_channels)
        self.decoder = DecoderNet(meta.image_height, meta.image_width,
                                  meta.watermark_length, meta.decoder_channels)
        if seed is not None:
            gen = torch.Generator().manual_seed(int(seed))
            self.encoder.reset_parameters(gen)
            self.decoder.reset_parameters(gen)
        self.encoder.eval()
        self.decoder.eval()

    # -- training path (batched tensors, unclamped) --

    def mark(self, cover: torch.Tensor, bits: torch.Tensor, alpha: float):
        """Training-path embedding: returns (marked, mask), both unclamped."""
        w_e = self.encoder.expand(bits)
        mask = self.encoder.mask(cover, w_e)
        return add_mask(cover, mask, alpha), mask

    # -- inference path (numpy images) --

    def embed(self, cover, bits, alpha: float = 1.0) -> np.ndarray:
        """Embed bits into a cover image; returns the quantized marked image."""
        arr = imaging.as_image(cover, "cover")
        if arr.shape[:2] != (self.meta.image_height, self.meta.image_width):
            raise InvalidInputError(
                f"cover is {arr.shape[:2]}, codec expects "
                f"({self.meta.image_height}, {self.meta.image_width})"
            )
        w = validate_bits(bits, self.meta.watermark_length)
        if alpha > self.meta.alpha_train:
            warnings.warn(
                f"alpha_test={alpha} exceeds alpha_train={self.meta.alpha_train}; "
                "quality/robustness tradeoff is uncalibrated above the training strength",
                RuntimeWarning, stacklevel=2,
            )
        cover_t = imaging.to_tensor(arr).unsqueeze(0)
        bits_t = torch.from_numpy(w).float().unsqueeze(0)
        with torch.no_grad():
            marked, _ = self.mark(cover_t, bits_t, alpha)
        return imaging.quantize(imaging.to_image(marked))

    def decode(self, img) -> np.ndarray:
        """Decoder probabilities for one image, as a length-N float array."""
        arr = imaging.as_image(img, "image")
        if arr.shape[:2] != (self.meta.image_height, self.meta.image_width):
            raise InvalidInputError(
                f"image is {arr.shape[:2]}, codec expects "
                f"({self.meta.image_height}, {self.meta.image_width})"
            )
        with torch.no_grad():
            probs = self.decoder(imaging.to_tensor(arr).unsqueeze(0))
        return probs[0].numpy().astype(np.float64)

    def extract(self, img) -> np.ndarray:
        """Decode and threshold at 0.5."""
        return (self.decode(img) >= 0.5).astype(np.uint8)

    # -- serialization --

    def _named_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for prefix, module in (("encoder", self.encoder), ("decoder", self.decoder)):
            for name, p in module.state_dict().items():
                out[f"{prefix}.{name}"] = p.detach().cpu().numpy()
        return out

    def named_arrays(self) -> dict[str, np.ndarray]:
        """Copies of all parameters as float32 arrays keyed by qualified name."""
        return {k: v.astype(np.float32, copy=True) for k, v in self._named_arrays().items()}

    def set_named_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        """Inverse of :meth:`named_arrays`; shapes must match the built nets."""
        for prefix, module in (("encoder", self.encoder), ("decoder", self.decoder)):
            state = {}
            for name, current in module.state_dict().items():
                full = f"{prefix}.{name}"
                if full not in arrays:
                    raise InvalidConfigError(f"missing weight array {full}")
                arr = np.asarray(arrays[full], dtype=np.float32)
                if arr.shape != tuple(current.shape):
                    raise InvalidConfigError(
                        f"weight {full} has shape {arr.shape}, expected {tuple(current.shape)}"
                    )
                state[name] = torch.from_numpy(arr.copy())
            module.load_state_dict(state)

    def save(self, path) -> None:
        arrays = self._named_arrays()
        meta = self.meta.to_dict()
        meta["tensors"] = {name: list(a.shape) for name, a in sorted(arrays.items())}
        with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
            _write_entry(zf, "meta.json", json.dumps(meta, indent=2, sort_keys=True).encode())
            for name in sorted(arrays):
                data = arrays[name].astype("<f4").tobytes()
                _write_entry(zf, f"weights/{name}.f32", data)

    @classmethod
    def load(cls, path) -> "Codec":
        with zipfile.ZipFile(path, "r") as zf:
            meta_dict = json.loads(zf.read("meta.json"))
            meta = CodecMeta.from_dict(meta_dict)
            codec = cls(meta)
            expected = codec._named_arrays()
            shapes = meta_dict.get("tensors", {})
            for prefix, module in (("encoder", codec.encoder), ("decoder", codec.decoder)):
                state = {}
                for name, current in module.state_dict().items():
                    full = f"{prefix}.{name}"
                    try:
                        raw = zf.read(f"weights/{full}.f32")
                    except KeyError as exc:
                        raise InvalidConfigError(f"checkpoint missing weight array {full}") from exc
                    shape = tuple(shapes.get(full, current.shape))
                    if shape != tuple(current.shape) or len(raw) != 4 * int(np.prod(shape)):
                        raise InvalidConfigError(
                            f"checkpoint weight {full} has shape {shape}, expected {tuple(current.shape)}"
                        )
                    arr = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
                    state[name] = torch.from_numpy(arr)
                module.load_state_dict(state)
            del expected
        codec.encoder.eval()
        codec.decoder.eval()
        return codec


def _write_entry(zf: zipfile.ZipFile, name: str, data: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=_ZIP_EPOCH)
    info.compress_type = zipfile.ZIP_DEFLATED
    info.external_attr = 0o644 << 16
    zf.writestr(info, data)


# Functional aliases matching the operation names used elsewhere.

def expand_watermark(encoder: EncoderNet, bits: torch.Tensor) -> torch.Tensor:
    return encoder.expand(bits)


def encode(encoder: EncoderNet, cover: torch.Tensor, w_e: torch.Tensor) -> torch.Tensor:
    return encoder.mask(cover, w_e)


def embed(codec: Codec, cover, bits, alpha: float = 1.0) -> np.ndarray:
    return codec.embed(cover, bits, alpha)


def decode(codec: Codec, img) -> np.ndarray:
    return codec.decode(img)


def extract(codec: Codec, img) -> np.ndarray:
    return codec.extract(img)
