"""Shared fixtures: the session document dataset, mini training profiles,
and the (expensive, lazily built) trained models used by the acceptance
suite.  A terminal-summary hook prints one PASS/FAIL line per acceptance
criterion.
"""

import io
import json
from dataclasses import replace

import numpy as np
import pytest
import torch

from docmark import dataset as dataset_mod
from docmark import training
from docmark.distortions import NoiseRegime
from docmark.losses import LossWeights

# Mini profile: 64x64 / 16 bits / half-width channel plan (CPU-friendly; the
# channel plan is checkpoint metadata, defaults stay at full width).
MINI_ENCODER_CHANNELS = 32
MINI_DECODER_CHANNELS = (16, 16, 32, 32, 64, 64, 64)
MINI_IMAGE_SIZE = 64
MINI_BITS = 16

# Toy profile for schedule/determinism tests: tiny nets on random images.
TOY_ENCODER_CHANNELS = 8
TOY_DECODER_CHANNELS = (4, 4, 8, 8, 8, 8, 8)


def mini_config(**overrides) -> training.TrainConfig:
    base = dict(
        watermark_length=MINI_BITS,
        image_size=MINI_IMAGE_SIZE,
        batch_size=4,
        noise_regime=NoiseRegime.basic(),
        iterations=3500,
        encoder_freeze_iters=300,
        lambda_ramp_iters=1500,
        alpha_train=1.0,
        seed=11,
        encoder_channels=MINI_ENCODER_CHANNELS,
        decoder_channels=MINI_DECODER_CHANNELS,
        val_every=500,
        val_count=8,
    )
    base.update(overrides)
    return training.TrainConfig(**base)


def toy_config(**overrides) -> training.TrainConfig:
    base = dict(
        watermark_length=4,
        image_size=16,
        batch_size=2,
        noise_regime=NoiseRegime.basic(),
        iterations=12,
        encoder_freeze_iters=5,
        lambda_ramp_iters=10,
        seed=7,
        encoder_channels=TOY_ENCODER_CHANNELS,
        decoder_channels=TOY_DECODER_CHANNELS,
        val_every=0,
        val_count=2,
        threads=1,
    )
    base.update(overrides)
    return training.TrainConfig(**base)


def toy_images(n=6, size=16, seed=0) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return np.round(rng.uniform(0, 255, (n, size, size, 3))).astype(np.float32)


@pytest.fixture(scope="session")
def doc_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("docs64")
    dataset_mod.build_dataset(root, (200, 20, 50), script="latin", seed=42, size=MINI_IMAGE_SIZE)
    return root


@pytest.fixture(scope="session")
def train_handle(doc_root):
    return dataset_mod.DatasetHandle.open(doc_root, "train")


@pytest.fixture(scope="session")
def val_handle(doc_root):
    return dataset_mod.DatasetHandle.open(doc_root, "val")


@pytest.fixture(scope="session")
def test_handle(doc_root):
    return dataset_mod.DatasetHandle.open(doc_root, "test")


def _train(cfg, train_handle, val_handle):
    log = io.StringIO()
    result = training.train(cfg, train_handle, val_data=val_handle, log=log)
    return result, log.getvalue()


@pytest.fixture(scope="session")
def basic_model(train_handle, val_handle):
    """Mini basic-regime model (identity noise, text loss on)."""
    return _train(mini_config(), train_handle, val_handle)


@pytest.fixture(scope="session")
def basic_model_no_text_loss(train_handle, val_handle):
    """Same run as basic_model but with the text-loss target zeroed."""
    cfg = mini_config(loss_weights=LossWeights(lambda_t=0.0))
    return _train(cfg, train_handle, val_handle)


def combined_config(**overrides) -> training.TrainConfig:
    base = dict(noise_regime=NoiseRegime.combined(), iterations=12000)
    base.update(overrides)
    return mini_config(**base)


@pytest.fixture(scope="session")
def combined_model(train_handle, val_handle):
    """Mini combined-regime model (all six distortions, alpha_train = 1)."""
    return _train(combined_config(), train_handle, val_handle)


@pytest.fixture(scope="session")
def combined_model_alpha3(train_handle, val_handle):
    """Combined model trained at alpha_train = 3 (strength-adjustment pair)."""
    return _train(combined_config(alpha_train=3.0), train_handle, val_handle)


def parse_log(text: str) -> list[dict]:
    return [json.loads(line) for line in text.splitlines() if line.strip()]


# ---------------------------------------------------------------------------
# Acceptance reporting: one PASS/FAIL line per criterion
# ---------------------------------------------------------------------------

def pytest_terminal_summary(terminalreporter, exitstatus, config):
    outcomes = {}
    for status in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(status, []):
            nodeid = getattr(rep, "nodeid", "")
            if "test_acceptance.py::test_criterion_" in nodeid and rep.when == "call":
                name = nodeid.split("::")[-1]
                outcomes[name] = "PASS" if status == "passed" else "FAIL"
    for status in ("skipped",):
        for rep in terminalreporter.stats.get(status, []):
            nodeid = getattr(rep, "nodeid", "")
            if "test_acceptance.py::test_criterion_" in nodeid:
                outcomes.setdefault(nodeid.split("::")[-1], "SKIP")
    if not outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(outcomes):
        num = name.split("_")[2]
        label = " ".join(name.split("_")[3:])
        terminalreporter.write_line(f"[{outcomes[name]}] criterion {int(num)}: {label}")
