"""Synthetic document image generation, dataset layout, and batching.

Rendered images stand in for scraped document pages: random word-like token
lines (latin) or dense box glyphs (cjk-like) in near-black ink on a
near-white canvas.  A dataset directory holds ``{train,val,test}/img_*.png``
plus ``manifest.json``; any flat directory of equal-sized RGB PNGs can also
be ingested directly.
"""

from __future__ import annotations

import functools
import json
import string
import warnings
from dataclasses import dataclass
from pathlib import Path
from random import Random

import numpy as np
from PIL import Image, ImageDraw, ImageFont

from . import imaging
from .errors import GenerationError, InvalidConfigError, InvalidInputError
from .seeding import child_rng, child_seed

MANIFEST_NAME = "manifest.json"
SPLITS = ("train", "val", "test")
TEXT_RATIO_BOUNDS = (0.02, 0.60)
RENDER_RETRIES = 10
# Full-scale split sizes used when none are given (mirrors the source corpora).
FULL_SCALE_COUNTS = (230000, 10000, 10000)


@dataclass
class DocumentSpec:
    """Concrete style parameters for one rendered document crop."""

    height: int = 400
    width: int = 400
    background: int = 250   # gray level, near-white
    ink: int = 15           # gray level, near-black
    font_size: int = 12
    line_spacing: float = 1.25
    margin: int = 12
    script: str = "latin"
    seed: int = 0


def sample_document_spec(size: int, script: str, seed: int) -> DocumentSpec:
    """Draw style parameters from their documented ranges for one image."""
    if script not in ("latin", "cjk"):
        raise InvalidConfigError(f"script must be 'latin' or 'cjk', got {script!r}")
    rng = Random(seed)
    # Margins scale down with the canvas so small crops keep enough ink to
    # satisfy the text-ratio floor; the full-scale range stays 8..32.
    max_margin = max(8, min(32, size // 6))
    return DocumentSpec(
        height=size,
        width=size,
        background=rng.randint(245, 255),
        ink=rng.randint(0, 40),
        font_size=rng.randint(10, 16),
        line_spacing=rng.uniform(1.0, 1.6),
        margin=rng.randint(min(8, max_margin), max_margin),
        script=script,
        seed=seed,
    )


@functools.lru_cache(maxsize=16)
def _font(size: int) -> ImageFont.FreeTypeFont:
    return ImageFont.load_default(size=size)


def _draw_latin(draw: ImageDraw.ImageDraw, w: int, h: int, spec: DocumentSpec, rng: Random) -> None:
    font = _font(spec.font_size)
    ink = (spec.ink,) * 3
    space = max(2, spec.font_size // 3)
    line_h = max(1, int(spec.font_size * spec.line_spacing))
    char_w = max(1.0, draw.textlength(string.ascii_lowercase, font=font) / 26.0)
    y = 0
    while y + line_h <= h:
        x = 0
        while True:
            max_chars = int((w - x) / char_w)
            if max_chars < 2:
                break
            word = "".join(rng.choice(string.ascii_lowercase)
                           for _ in range(rng.randint(2, min(9, max_chars))))
            advance = draw.textlength(word, font=font)
            if x + advance > w:
                break
            draw.text((x, y), word, font=font, fill=ink)
            x += int(advance) + space
        y += line_h


def _draw_cjk(draw: ImageDraw.ImageDraw, w: int, h: int, spec: DocumentSpec, rng: Random) -> None:
    # Dense box glyphs keep the visual density of CJK text without any font.
    cell = max(6, spec.font_size)
    gap = max(1, cell // 5)
    ink = (spec.ink,) * 3
    line_h = max(cell + gap, int(cell * spec.line_spacing))
    y = 0
    while y + cell <= h:
        x = 0
        while x + cell <= w:
            if rng.random() < 0.9:  # occasional gaps read as punctuation/space
                draw.rectangle([x, y, x + cell - 1, y + cell - 1], outline=ink)
                for _ in range(rng.randint(2, 4)):
                    if rng.random() < 0.5:
                        yy = y + rng.randint(1, cell - 2)
                        draw.line([x + 1, yy, x + cell - 2, yy], fill=ink)
                    else:
                        xx = x + rng.randint(1, cell - 2)
                        draw.line([xx, y + 1, xx, y + cell - 2], fill=ink)
            x += cell + gap
        y += line_h


def render_document(spec: DocumentSpec,
                    ratio_bounds: tuple[float, float] = TEXT_RATIO_BOUNDS) -> np.ndarray:
    """Deterministically render one document crop as a quantized RGB image.

    Content is redrawn with a fresh sub-seed when the text-pixel ratio falls
    outside ``ratio_bounds``; after RENDER_RETRIES attempts rendering fails.
    """
    if spec.height < 8 or spec.width < 8:
        raise InvalidConfigError(f"canvas {spec.height}x{spec.width} is too small")
    inner_w = spec.width - 2 * spec.margin
    inner_h = spec.height - 2 * spec.margin
    if inner_w < 4 or inner_h < 4:
        raise InvalidConfigError(f"margin {spec.margin} leaves no drawing area")
    lo, hi = ratio_bounds
    for attempt in range(RENDER_RETRIES):
        rng = Random(child_seed(spec.seed, "render", attempt))
        canvas = Image.new("RGB", (spec.width, spec.height), (spec.background,) * 3)
        inner = Image.new("RGB", (inner_w, inner_h), (spec.background,) * 3)
        draw = ImageDraw.Draw(inner)
        if spec.script == "latin":
            _draw_latin(draw, inner_w, inner_h, spec, rng)
        else:
            _draw_cjk(draw, inner_w, inner_h, spec, rng)
        canvas.paste(inner, (spec.margin, spec.margin))
        arr = np.asarray(canvas, dtype=np.float64)
        ratio = imaging.text_pixel_mask(arr).mean()
        if lo <= ratio <= hi:
            return arr
    raise GenerationError(
        f"text-pixel ratio stayed outside [{lo}, {hi}] after {RENDER_RETRIES} attempts "
        f"(spec seed {spec.seed})"
    )


# ---------------------------------------------------------------------------
# Dataset directories
# ---------------------------------------------------------------------------

@dataclass
class DatasetHandle:
    """One split of a dataset directory: resolved image paths plus metadata."""

    root: Path
    split: str
    entries: list
    image_size: tuple[int, int]

    def __len__(self) -> int:
        return len(self.entries)

    def path(self, i: int) -> Path:
        return self.root / self.entries[i]["path"]

    def load(self, i: int) -> np.ndarray:
        img = imaging.load_png(self.path(i))
        if img.shape[:2] != self.image_size:
            raise InvalidInputError(
                f"{self.path(i)} is {img.shape[:2]}, manifest declares {self.image_size}"
            )
        return img

    def load_all(self, max_skip_fraction: float = 0.01) -> np.ndarray:
        """Load every image as one (n, H, W, 3) float32 stack.

        Unreadable files are skipped with a warning; more than
        ``max_skip_fraction`` of them is an error.
        """
        images, skipped = [], 0
        for i in range(len(self.entries)):
            try:
                images.append(self.load(i).astype(np.float32))
            except (OSError, InvalidInputError) as exc:
                skipped += 1
                warnings.warn(f"skipping unreadable image {self.path(i)}: {exc}",
                              RuntimeWarning, stacklevel=2)
        if not images:
            raise InvalidInputError(f"no readable images in {self.root}/{self.split}")
        if skipped > max_skip_fraction * len(self.entries):
            raise InvalidInputError(
                f"{skipped}/{len(self.entries)} images unreadable in {self.root}/{self.split}"
            )
        return np.stack(images)

    @classmethod
    def open(cls, root, split: str = "train") -> "DatasetHandle":
        root = Path(root)
        manifest_path = root / MANIFEST_NAME
        if manifest_path.exists():
            manifest = json.loads(manifest_path.read_text())
            if split not in manifest["splits"]:
                raise InvalidConfigError(f"manifest in {root} has no split {split!r}")
            entries = manifest["splits"][split]
            size = tuple(manifest["image_size"])
            return cls(root=root, split=split, entries=entries, image_size=size)
        # Ingestion path: a bare directory of PNGs (optionally under split dirs).
        base = root / split if (root / split).is_dir() else root
        paths = sorted(base.glob("*.png"))
        if not paths:
            raise InvalidConfigError(f"no manifest and no PNG files found under {base}")
        first = imaging.load_png(paths[0])
        entries = [{"path": str(p.relative_to(root)), "seed": None, "script": "ingested"}
                   for p in paths]
        return cls(root=root, split=split, entries=entries,
                   image_size=tuple(first.shape[:2]))


def build_dataset(out_dir, counts: tuple[int, int, int] = FULL_SCALE_COUNTS,
                  script: str = "latin", seed: int = 0, size: int = 400) -> DatasetHandle:
    """Render train/val/test splits into ``out_dir`` and write the manifest.

    Returns the handle for the train split; the others open via
    :meth:`DatasetHandle.open`.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "format_version": 1,
        "image_size": [size, size],
        "script": script,
        "seed": seed,
        "splits": {},
    }
    for split, count in zip(SPLITS, counts):
        split_dir = out_dir / split
        split_dir.mkdir(exist_ok=True)
        entries = []
        for i in range(count):
            img_seed = child_seed(seed, split, i)
            spec = sample_document_spec(size, script, img_seed)
            img = render_document(spec)
            rel = f"{split}/img_{i:07d}.png"
            imaging.save_png(img, out_dir / rel)
            entries.append({"path": rel, "seed": img_seed, "script": script})
        manifest["splits"][split] = entries
    (out_dir / MANIFEST_NAME).write_text(json.dumps(manifest, indent=1))
    return DatasetHandle.open(out_dir, "train")


# ---------------------------------------------------------------------------
# Batching
# ---------------------------------------------------------------------------

@functools.lru_cache(maxsize=4)
def _epoch_permutation(n_images: int, seed: int, epoch: int) -> np.ndarray:
    return child_rng(seed, "perm", epoch).permutation(n_images)


def batch_indices(n_images: int, batch_size: int, iteration: int, seed: int) -> np.ndarray:
    """Image indices for one batch; every image appears exactly once per epoch."""
    start = iteration * batch_size
    out = np.empty(batch_size, dtype=np.int64)
    for j in range(batch_size):
        pos = start + j
        perm = _epoch_permutation(n_images, seed, pos // n_images)
        out[j] = perm[pos % n_images]
    return out


def batch_bits(n_bits: int, batch_size: int, iteration: int, seed: int) -> np.ndarray:
    """Fresh uniform random bit strings for one batch, (B, N) uint8."""
    rng = child_rng(seed, "bits", iteration)
    return rng.integers(0, 2, size=(batch_size, n_bits), dtype=np.uint8)


def batches(handle: DatasetHandle, batch_size: int, n_bits: int, rng):
    """Endless stream of (covers (B, H, W, 3) float32, bits (B, N)) batches."""
    if len(handle) == 0:
        raise InvalidInputError("dataset is empty")
    if isinstance(rng, np.random.Generator):
        seed = int(rng.integers(1 << 63))
    else:
        seed = int(rng)
    covers = handle.load_all()
    k = 0
    while True:
        idx = batch_indices(len(covers), batch_size, k, seed)
        yield covers[idx], batch_bits(n_bits, batch_size, k, seed)
        k += 1
