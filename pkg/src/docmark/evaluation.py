"""Attack-sweep robustness evaluation and report serialization.

The default grid applies six attacks at three levels each (18 rows) on the
real evaluation path: actual JFIF compression and true bilinear resampling.
Per-image randomness is derived from the image content, so evaluating
disjoint subsets composes exactly into the full-set means.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import imaging
from .codec import Codec
from .distortions import DistortionSpec, apply_spec
from .errors import InvalidConfigError, InvalidInputError
from .seeding import child_seed, child_torch_generator

DEFAULT_LEVELS = (
    ("dropout", (0.1, 0.3, 0.5)),
    ("cropout", (0.1, 0.3, 0.5)),
    ("gaussian_blur", (3, 5, 7)),
    ("gaussian_noise", (0.02, 0.03, 0.05)),
    ("resize", (0.5, 0.3, 0.1)),
    ("jpeg", (50, 30, 20)),
)


def default_grid() -> list[DistortionSpec]:
    """The 18 attack levels of the benchmark tables, on the real path.

    Blur windows use sigma = (window - 1) / 4.
    """
    grid = []
    for kind, levels in DEFAULT_LEVELS:
        for level in levels:
            sigma = (level - 1) / 4.0 if kind == "gaussian_blur" else None
            grid.append(DistortionSpec(kind, float(level), sigma=sigma, path="real"))
    return grid


@dataclass
class AttackResult:
    kind: str
    param: float
    label: str
    accuracy: float  # percent

    def to_dict(self) -> dict:
        return {"kind": self.kind, "param": self.param, "label": self.label,
                "accuracy": self.accuracy}


@dataclass
class EvalReport:
    clean_accuracy: float  # percent
    attacks: list[AttackResult]
    psnr: float
    ssim: float
    cpp: float
    metadata: dict = field(default_factory=dict)

    def to_json(self) -> str:
        payload = {
            "metadata": self.metadata,
            "clean_accuracy": self.clean_accuracy,
            "quality": {
                "psnr": imaging.float_to_json(self.psnr),
                "ssim": imaging.float_to_json(self.ssim),
                "cpp": imaging.float_to_json(self.cpp),
            },
            "attacks": [a.to_dict() for a in self.attacks],
        }
        return json.dumps(payload, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        d = json.loads(text)
        return cls(
            clean_accuracy=d["clean_accuracy"],
            attacks=[AttackResult(**a) for a in d["attacks"]],
            psnr=imaging.float_from_json(d["quality"]["psnr"]),
            ssim=imaging.float_from_json(d["quality"]["ssim"]),
            cpp=imaging.float_from_json(d["quality"]["cpp"]),
            metadata=d["metadata"],
        )

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf)
        writer.writerow(["label", "kind", "param", "accuracy"])
        for a in self.attacks:
            writer.writerow([a.label, a.kind, a.param, f"{a.accuracy:.4f}"])
        return buf.getvalue()

    def to_markdown(self) -> str:
        lines = [
            "| Attack Type | Bit accuracy (%) |",
            "|---|---|",
            f"| Clean | {self.clean_accuracy:.2f} |",
        ]
        lines += [f"| {a.label} | {a.accuracy:.2f} |" for a in self.attacks]
        lines.append("")
        lines.append(f"PSNR: {self.psnr:.2f} dB, SSIM: {self.ssim:.4f}, CPP: {self.cpp:.4f} "
                     f"(alpha_test={self.metadata.get('alpha_test')}, "
                     f"n={self.metadata.get('image_count')})")
        return "\n".join(lines)

    def accuracy_by_label(self) -> dict[str, float]:
        return {a.label: a.accuracy for a in self.attacks}


def checkpoint_id(codec: Codec) -> str:
    """Short content hash identifying a parameter set."""
    h = hashlib.sha256()
    for name, arr in sorted(codec.named_arrays().items()):
        h.update(name.encode())
        h.update(arr.astype("<f4").tobytes())
    return h.hexdigest()[:12]


def _image_stack(data) -> np.ndarray:
    if hasattr(data, "load_all"):
        return data.load_all()
    stack = np.asarray(data, dtype=np.float32)
    if stack.ndim != 4 or stack.shape[3] != 3:
        raise InvalidInputError(f"expected (n, H, W, 3) images, got {stack.shape}")
    return stack


def evaluate(codec: Codec, data, grid: list[DistortionSpec] | None = None,
             alpha_test: float = 1.0, sample_count: int = 50, seed: int = 0,
             text_threshold: float = imaging.DEFAULT_TEXT_THRESHOLD) -> EvalReport:
    """Embed, attack, and extract over ``sample_count`` images.

    Post-embedding images are quantized before each attack; attacked images
    are re-quantized before extraction (the on-disk evaluation channel).
    """
    grid = default_grid() if grid is None else list(grid)
    images = _image_stack(data)
    n = images.shape[0]
    if sample_count < 1:
        raise InvalidConfigError("sample_count must be >= 1")
    if sample_count > n:
        raise InvalidConfigError(f"requested {sample_count} images but the dataset has {n}")
    if images.shape[1] != codec.meta.image_height or images.shape[2] != codec.meta.image_width:
        raise InvalidConfigError(
            f"dataset images are {images.shape[1]}x{images.shape[2]}, checkpoint expects "
            f"{codec.meta.image_height}x{codec.meta.image_width}"
        )

    n_bits = codec.meta.watermark_length
    clean, psnrs, ssims, cpps = [], [], [], []
    attack_acc = [[] for _ in grid]
    for i in range(sample_count):
        cover = imaging.quantize(images[i])
        tag = zlib.crc32(cover.astype(np.uint8).tobytes())  # content-derived stream id
        rng = np.random.Generator(np.random.PCG64(child_seed(seed, "bits", tag)))
        bits = rng.integers(0, 2, size=n_bits, dtype=np.uint8)
        marked = codec.embed(cover, bits, alpha_test)

        clean.append(float(np.mean(codec.extract(marked) == bits)))
        psnrs.append(imaging.psnr(cover, marked))
        ssims.append(imaging.ssim(cover, marked))
        cpps.append(imaging.cpp(cover, marked, imaging.text_pixel_mask(cover, text_threshold)))

        marked_t = imaging.to_tensor(marked)
        cover_t = imaging.to_tensor(cover)
        for j, spec in enumerate(grid):
            gen = child_torch_generator(seed, "attack", tag, j)
            attacked_t = apply_spec(marked_t, cover_t, spec, gen)
            attacked = imaging.quantize(imaging.to_image(attacked_t))
            attack_acc[j].append(float(np.mean(codec.extract(attacked) == bits)))

    results = [
        AttackResult(kind=s.kind, param=s.param, label=s.label(),
                     accuracy=100.0 * float(np.mean(acc)))
        for s, acc in zip(grid, attack_acc)
    ]
    return EvalReport(
        clean_accuracy=100.0 * float(np.mean(clean)),
        attacks=results,
        psnr=float(np.mean(psnrs)),
        ssim=float(np.mean(ssims)),
        cpp=float(np.mean(cpps)),
        metadata={
            "checkpoint_id": checkpoint_id(codec),
            "alpha_test": alpha_test,
            "image_count": sample_count,
            "seed": seed,
        },
    )


def strength_sweep(codecs: list[Codec], data, grid: list[DistortionSpec] | None = None,
                   alpha_test: float = 1.0, sample_count: int = 50,
                   seed: int = 0) -> list[tuple[float, EvalReport]]:
    """Evaluate a family of models trained at increasing alpha at a fixed
    test-time strength (the strength-adjustment protocol)."""
    if not codecs:
        raise InvalidConfigError("strength_sweep needs at least one checkpoint")
    first = codecs[0].meta
    for c in codecs[1:]:
        if (c.meta.watermark_length, c.meta.image_height, c.meta.image_width) != (
                first.watermark_length, first.image_height, first.image_width):
            raise InvalidConfigError("checkpoint family must share watermark length and image size")
    out = []
    for c in codecs:
        report = evaluate(c, data, grid, alpha_test=alpha_test,
                          sample_count=sample_count, seed=seed)
        out.append((c.meta.alpha_train, report))
    return out


def report_write(report: EvalReport, path, fmt: str | None = None) -> Path:
    """Serialize a report as json, csv, or a markdown table."""
    path = Path(path)
    if fmt is None:
        fmt = {".json": "json", ".csv": "csv", ".md": "markdown"}.get(path.suffix.lower(), "json")
    if fmt == "json":
        text = report.to_json()
    elif fmt == "csv":
        text = report.to_csv()
    elif fmt in ("markdown", "md", "markdown-table"):
        text = report.to_markdown()
    else:
        raise InvalidConfigError(f"unknown report format {fmt!r}")
    path.write_text(text)
    return path
