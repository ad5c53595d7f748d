"""The end-to-end optimization loop: batch assembly, noise scheduling,
encoder freezing, Adam updates, validation, and resumable state.

Determinism contract: every random draw is a pure function of
(cfg.seed, stream, iteration), so two runs with the same config produce
bit-identical parameters and a resumed run continues exactly where an
uninterrupted one would be (single-threaded mode).
"""

from __future__ import annotations

import dataclasses
import io
import json
import math
import time
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import dataset as dataset_mod
from . import imaging
from .codec import Codec, CodecMeta, DEFAULT_DECODER_CHANNELS, DEFAULT_ENCODER_CHANNELS
from .distortions import NoiseRegime, apply_regime, apply_spec
from .errors import InvalidConfigError, InvalidInputError, TrainingDiagnosticError
from .losses import LossBreakdown, LossWeights, image_loss, lambda_ramp, text_loss, total_loss, watermark_loss
from .seeding import child_seed, child_torch_generator

STATE_FORMAT_VERSION = 1
VARIANT_ITERATIONS = {"basic": 50000, "specified": 60000, "combined": 80000}
_ZIP_EPOCH = (1980, 1, 1, 0, 0, 0)


@dataclass
class TrainConfig:
    watermark_length: int = 100
    image_size: int = 400
    batch_size: int = 4
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    noise_regime: NoiseRegime = field(default_factory=NoiseRegime.basic)
    iterations: int = 50000
    encoder_freeze_iters: int = 3000
    lambda_ramp_iters: int = 15000
    alpha_train: float = 1.0
    seed: int = 0
    loss_weights: LossWeights = field(default_factory=LossWeights)
    encoder_channels: int = DEFAULT_ENCODER_CHANNELS
    decoder_channels: tuple[int, ...] = field(default_factory=lambda: DEFAULT_DECODER_CHANNELS)
    val_every: int = 500
    val_count: int = 8
    threads: int | None = None

    def validate(self) -> None:
        if self.watermark_length < 1 or self.batch_size < 1 or self.iterations < 1:
            raise InvalidConfigError("watermark_length, batch_size, and iterations must be positive")
        if self.image_size % 8:
            raise InvalidConfigError(f"image_size must be divisible by 8, got {self.image_size}")
        if self.iterations < self.encoder_freeze_iters:
            raise InvalidConfigError(
                f"iterations ({self.iterations}) must cover the encoder freeze window "
                f"({self.encoder_freeze_iters})"
            )
        if self.alpha_train <= 0:
            raise InvalidConfigError(f"alpha_train must be > 0, got {self.alpha_train}")
        if self.learning_rate <= 0:
            raise InvalidConfigError("learning_rate must be > 0")

    def codec_meta(self) -> CodecMeta:
        return CodecMeta(
            watermark_length=self.watermark_length,
            image_height=self.image_size,
            image_width=self.image_size,
            alpha_train=self.alpha_train,
            noise_regime=str(self.noise_regime),
            iterations=0,
            encoder_channels=self.encoder_channels,
            decoder_channels=tuple(self.decoder_channels),
        )

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        """Read a config from a TOML or JSON file mirroring the field names."""
        path = Path(path)
        text = path.read_text()
        if path.suffix.lower() == ".toml":
            try:
                import tomllib
            except ModuleNotFoundError:
                import tomli as tomllib
            raw = tomllib.loads(text)
        else:
            raw = json.loads(text)
        return cls.from_dict(raw)

    @classmethod
    def from_dict(cls, raw: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise InvalidConfigError(f"unknown config keys: {sorted(unknown)}")
        kwargs = dict(raw)
        if "noise_regime" in kwargs and isinstance(kwargs["noise_regime"], str):
            kwargs["noise_regime"] = NoiseRegime.parse(kwargs["noise_regime"])
        if "loss_weights" in kwargs and isinstance(kwargs["loss_weights"], dict):
            kwargs["loss_weights"] = LossWeights(**kwargs["loss_weights"])
        if "decoder_channels" in kwargs:
            kwargs["decoder_channels"] = tuple(kwargs["decoder_channels"])
        cfg = cls(**kwargs)
        cfg.validate()
        return cfg


def make_variant(cfg: TrainConfig, variant: str, scale: float = 1.0) -> TrainConfig:
    """Return cfg configured as the basic / specified:KIND / combined model.

    ``scale`` shrinks the default iteration budget for desk-scale runs.
    """
    regime = NoiseRegime.parse(variant)
    iterations = max(1, int(round(VARIANT_ITERATIONS[regime.mode] * scale)))
    return dataclasses.replace(cfg, noise_regime=regime, iterations=iterations)


# ---------------------------------------------------------------------------
# Train state and steps
# ---------------------------------------------------------------------------

@dataclass
class TrainState:
    codec: Codec
    enc_opt: torch.optim.Adam
    dec_opt: torch.optim.Adam
    iteration: int = 0
    best_metric: float = -math.inf
    best_iteration: int = -1
    best_arrays: dict | None = None
    last: LossBreakdown | None = None
    last_lambdas: tuple | None = None
    last_spec: object = None


def init_state(cfg: TrainConfig) -> TrainState:
    cfg.validate()
    codec = Codec(cfg.codec_meta(), seed=child_seed(cfg.seed, "init"))
    return TrainState(
        codec=codec,
        enc_opt=torch.optim.Adam(codec.encoder.parameters(), lr=cfg.learning_rate,
                                 betas=(cfg.beta1, cfg.beta2), eps=cfg.adam_eps),
        dec_opt=torch.optim.Adam(codec.decoder.parameters(), lr=cfg.learning_rate,
                                 betas=(cfg.beta1, cfg.beta2), eps=cfg.adam_eps),
    )


def _batch_tensors(batch, cfg: TrainConfig) -> tuple[torch.Tensor, torch.Tensor]:
    covers, bits = batch
    c = np.asarray(covers, dtype=np.float32)
    b = np.asarray(bits, dtype=np.float32)
    if c.ndim != 4 or c.shape[3] != 3 or c.shape[1:3] != (cfg.image_size, cfg.image_size):
        raise InvalidInputError(
            f"covers must be (B, {cfg.image_size}, {cfg.image_size}, 3), got {c.shape}"
        )
    if b.shape != (c.shape[0], cfg.watermark_length):
        raise InvalidInputError(
            f"bits must be ({c.shape[0]}, {cfg.watermark_length}), got {b.shape}"
        )
    covers_t = torch.from_numpy(np.ascontiguousarray(c.transpose(0, 3, 1, 2)))
    return covers_t, torch.from_numpy(b)


def train_step(state: TrainState, batch, cfg: TrainConfig) -> TrainState:
    """One optimization step; the encoder stays frozen for the first
    cfg.encoder_freeze_iters iterations."""
    covers_t, bits_t = _batch_tensors(batch, cfg)
    it = state.iteration
    frozen = it < cfg.encoder_freeze_iters
    for p in state.codec.encoder.parameters():
        p.requires_grad_(not frozen)

    marked, _ = state.codec.mark(covers_t, bits_t, cfg.alpha_train)
    gen = child_torch_generator(cfg.seed, "noise", it)
    noised, spec = apply_regime(marked, covers_t, cfg.noise_regime, gen)
    probs = state.codec.decoder(noised)

    w = cfg.loss_weights
    l_i = image_loss(covers_t, marked, w)
    l_t = text_loss(covers_t, marked, w)
    l_w = watermark_loss(bits_t, probs)
    lambdas = lambda_ramp(it, targets=w.lambdas, ramp_len=cfg.lambda_ramp_iters)
    total, breakdown = total_loss(l_i, l_t, l_w, lambdas)

    state.enc_opt.zero_grad(set_to_none=True)
    state.dec_opt.zero_grad(set_to_none=True)
    total.backward()
    state.dec_opt.step()
    if not frozen:
        state.enc_opt.step()

    state.iteration = it + 1
    state.last = breakdown
    state.last_lambdas = lambdas
    state.last_spec = spec
    return state


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------

def _validate(state: TrainState, cfg: TrainConfig, val_images: np.ndarray) -> dict:
    """Clean + one-attack bit accuracy and PSNR on the validation images."""
    codec = state.codec
    it = state.iteration
    rng = np.random.Generator(np.random.PCG64(child_seed(cfg.seed, "valbits", it)))
    gen = child_torch_generator(cfg.seed, "val", it)
    spec = cfg.noise_regime.sample(gen)
    if spec.kind != "identity":
        spec = dataclasses.replace(spec, path="real")  # validation attacks run the real path
    clean_acc, attacked_acc, psnrs = [], [], []
    for img in val_images:
        bits = rng.integers(0, 2, size=cfg.watermark_length, dtype=np.uint8)
        marked = codec.embed(img, bits, cfg.alpha_train)
        clean_acc.append(float(np.mean(codec.extract(marked) == bits)))
        p = imaging.psnr(imaging.quantize(img), marked)
        psnrs.append(min(p, 99.0) if math.isinf(p) else p)
        marked_t = imaging.to_tensor(marked)
        cover_t = imaging.to_tensor(imaging.quantize(img))
        attacked = apply_spec(marked_t, cover_t, spec, gen)
        attacked = imaging.quantize(imaging.to_image(attacked))
        attacked_acc.append(float(np.mean(codec.extract(attacked) == bits)))
    return {
        "val_clean": float(np.mean(clean_acc)),
        "val_attacked": float(np.mean(attacked_acc)),
        "val_attack": spec.label(),
        "val_psnr": float(np.mean(psnrs)),
    }


# ---------------------------------------------------------------------------
# The training loop
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    final: Codec
    best: Codec
    best_iteration: int
    best_metric: float

    def save(self, path) -> tuple[Path, Path]:
        """Write the final checkpoint to ``path`` and the best one next to it."""
        path = Path(path)
        best_path = path.with_name(path.stem + ".best" + (path.suffix or ".dmck"))
        self.final.save(path)
        self.best.save(best_path)
        return path, best_path


def _as_image_stack(data, cfg: TrainConfig, name: str) -> np.ndarray:
    if isinstance(data, dataset_mod.DatasetHandle):
        stack = data.load_all()
    else:
        stack = np.asarray(data, dtype=np.float32)
    if stack.ndim != 4 or stack.shape[3] != 3:
        raise InvalidInputError(f"{name}: expected (n, H, W, 3) images, got {stack.shape}")
    if stack.shape[1] != cfg.image_size or stack.shape[2] != cfg.image_size:
        raise InvalidConfigError(
            f"{name}: images are {stack.shape[1]}x{stack.shape[2]}, "
            f"config wants {cfg.image_size}x{cfg.image_size}"
        )
    return stack


def train(cfg: TrainConfig, data, val_data=None, log=None, resume: TrainState | None = None,
          timestamps: bool = False) -> TrainResult:
    """Run the full optimization loop and return final + best-validation codecs.

    ``data``/``val_data`` are DatasetHandles or (n, H, W, 3) arrays.  ``log``
    is an optional text stream receiving one JSON record per iteration plus
    validation records.
    """
    cfg.validate()
    if cfg.threads:
        torch.set_num_threads(cfg.threads)
    images = _as_image_stack(data, cfg, "train data")
    if val_data is not None:
        val_images = _as_image_stack(val_data, cfg, "val data")[: max(cfg.val_count, 1)]
    else:
        val_images = images[: max(cfg.val_count, 1)]

    state = resume if resume is not None else init_state(cfg)

    def emit(record: dict) -> None:
        if log is not None:
            if timestamps:
                record = {"ts": time.time(), **record}
            log.write(json.dumps(record) + "\n")

    n = images.shape[0]
    while state.iteration < cfg.iterations:
        k = state.iteration
        idx = dataset_mod.batch_indices(n, cfg.batch_size, k, cfg.seed)
        batch = (images[idx], dataset_mod.batch_bits(cfg.watermark_length, cfg.batch_size, k, cfg.seed))
        try:
            train_step(state, batch, cfg)
        except TrainingDiagnosticError as exc:
            emit({"iter": k, "error": str(exc)})
            raise
        emit({
            "iter": k,
            "l_image": state.last.l_image,
            "l_text": state.last.l_text,
            "l_watermark": state.last.l_watermark,
            "l_total": state.last.l_total,
            "lambda": list(state.last_lambdas),
            "noise": state.last_spec.kind,
        })
        done = state.iteration
        if cfg.val_every and (done % cfg.val_every == 0 or done == cfg.iterations):
            metrics = _validate(state, cfg, val_images)
            emit({"iter": done, **metrics})
            score = (metrics["val_clean"] + metrics["val_attacked"]) / 2.0
            if score >= state.best_metric:
                state.best_metric = score
                state.best_iteration = done
                state.best_arrays = state.codec.named_arrays()

    meta = dataclasses.replace(cfg.codec_meta(), iterations=cfg.iterations)
    final = Codec(meta)
    final.set_named_arrays(state.codec.named_arrays())
    best = Codec(meta)
    if state.best_arrays is not None:
        best.set_named_arrays(state.best_arrays)
    else:
        best.set_named_arrays(state.codec.named_arrays())
    return TrainResult(final=final, best=best, best_iteration=state.best_iteration,
                       best_metric=state.best_metric)


# ---------------------------------------------------------------------------
# Resumable state serialization
# ---------------------------------------------------------------------------

def _opt_state_arrays(opt: torch.optim.Adam, prefix: str):
    arrays, steps = {}, []
    params = opt.param_groups[0]["params"]
    for i, p in enumerate(params):
        st = opt.state.get(p)
        if st is None:
            steps.append(None)
            continue
        steps.append(float(st["step"]))
        arrays[f"{prefix}.{i}.exp_avg"] = st["exp_avg"].detach().cpu().numpy()
        arrays[f"{prefix}.{i}.exp_avg_sq"] = st["exp_avg_sq"].detach().cpu().numpy()
    return arrays, steps


def _restore_opt_state(opt: torch.optim.Adam, prefix: str, arrays: dict, steps: list) -> None:
    params = opt.param_groups[0]["params"]
    if len(steps) != len(params):
        raise InvalidConfigError("optimizer state does not match the parameter count")
    for i, p in enumerate(params):
        if steps[i] is None:
            continue
        opt.state[p] = {
            "step": torch.tensor(float(steps[i])),
            "exp_avg": torch.from_numpy(arrays[f"{prefix}.{i}.exp_avg"].copy()),
            "exp_avg_sq": torch.from_numpy(arrays[f"{prefix}.{i}.exp_avg_sq"].copy()),
        }


def save_state(state: TrainState, cfg: TrainConfig, path) -> None:
    """Serialize a mid-training snapshot (weights, Adam moments, iteration)."""
    enc_arrays, enc_steps = _opt_state_arrays(state.enc_opt, "encoder")
    dec_arrays, dec_steps = _opt_state_arrays(state.dec_opt, "decoder")
    header = {
        "format_version": STATE_FORMAT_VERSION,
        "iteration": state.iteration,
        "seed": cfg.seed,
        "best_metric": state.best_metric if math.isfinite(state.best_metric) else None,
        "best_iteration": state.best_iteration,
        "opt_steps": {"encoder": enc_steps, "decoder": dec_steps},
        "meta": state.codec.meta.to_dict(),
    }
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        def put(name: str, data: bytes) -> None:
            info = zipfile.ZipInfo(name, date_time=_ZIP_EPOCH)
            info.compress_type = zipfile.ZIP_DEFLATED
            info.external_attr = 0o644 << 16
            zf.writestr(info, data)

        put("state.json", json.dumps(header, indent=2, sort_keys=True).encode())
        for name, arr in sorted(state.codec.named_arrays().items()):
            put(f"weights/{name}.f32", arr.astype("<f4").tobytes())
        for name, arr in sorted({**enc_arrays, **dec_arrays}.items()):
            put(f"opt/{name}.f32", arr.astype("<f4").tobytes())
        if state.best_arrays is not None:
            for name, arr in sorted(state.best_arrays.items()):
                put(f"best/{name}.f32", arr.astype("<f4").tobytes())


def load_state(path, cfg: TrainConfig) -> TrainState:
    """Rebuild a TrainState snapshot; cfg must match the saved run."""
    state = init_state(cfg)
    with zipfile.ZipFile(path, "r") as zf:
        header = json.loads(zf.read("state.json"))
        if header.get("format_version") != STATE_FORMAT_VERSION:
            raise InvalidConfigError(f"unsupported state format {header.get('format_version')}")
        if header["meta"] != state.codec.meta.to_dict():
            raise InvalidConfigError("saved state metadata does not match the config")

        def arrays_under(prefix: str) -> dict:
            out = {}
            for info in zf.infolist():
                if info.filename.startswith(prefix) and info.filename.endswith(".f32"):
                    name = info.filename[len(prefix):-len(".f32")]
                    out[name] = np.frombuffer(zf.read(info.filename), dtype="<f4")
            return out

        weights = arrays_under("weights/")
        shaped = {}
        for name, ref in state.codec.named_arrays().items():
            if name not in weights:
                raise InvalidConfigError(f"state file missing weight {name}")
            shaped[name] = weights[name].reshape(ref.shape)
        state.codec.set_named_arrays(shaped)

        opt_raw = arrays_under("opt/")
        for opt, prefix in ((state.enc_opt, "encoder"), (state.dec_opt, "decoder")):
            module = state.codec.encoder if prefix == "encoder" else state.codec.decoder
            shapes = [tuple(p.shape) for p in module.parameters()]
            arrays = {}
            for i, shp in enumerate(shapes):
                for kind in ("exp_avg", "exp_avg_sq"):
                    key = f"{prefix}.{i}.{kind}"
                    if key in opt_raw:
                        arrays[key] = opt_raw[key].reshape(shp)
            _restore_opt_state(opt, prefix, arrays, header["opt_steps"][prefix])

        best = arrays_under("best/")
        if best:
            ref = state.codec.named_arrays()
            state.best_arrays = {name: best[name].reshape(ref[name].shape).copy() for name in ref}

    state.iteration = int(header["iteration"])
    state.best_iteration = int(header["best_iteration"])
    state.best_metric = header["best_metric"] if header["best_metric"] is not None else -math.inf
    return state
