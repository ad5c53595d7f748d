"""Synthetic renderer, dataset layout, and batching tests."""

import json

import numpy as np
import pytest

from docmark import dataset as DS
from docmark import imaging
from docmark.errors import InvalidConfigError, InvalidInputError


def test_render_deterministic_bytes(tmp_path):
    spec = DS.sample_document_spec(64, "latin", seed=5)
    a = DS.render_document(spec)
    b = DS.render_document(spec)
    assert np.array_equal(a, b)
    pa, pb = tmp_path / "a.png", tmp_path / "b.png"
    imaging.save_png(a, pa)
    imaging.save_png(b, pb)
    assert pa.read_bytes() == pb.read_bytes()


def test_render_text_ratio_bounds():
    for seed in range(40):
        spec = DS.sample_document_spec(64, "latin", seed=seed)
        img = DS.render_document(spec)
        ratio = imaging.text_pixel_mask(img).mean()
        assert 0.02 <= ratio <= 0.60


def test_render_margins_near_white():
    spec = DS.sample_document_spec(64, "latin", seed=9)
    img = DS.render_document(spec)
    m = spec.margin
    border = np.concatenate([
        img[:m].reshape(-1, 3), img[-m:].reshape(-1, 3),
        img[:, :m].reshape(-1, 3), img[:, -m:].reshape(-1, 3),
    ])
    assert border.min() >= 245


def test_render_quantized_output():
    img = DS.render_document(DS.sample_document_spec(64, "cjk", seed=2))
    assert np.array_equal(img, np.round(img))
    assert img.min() >= 0 and img.max() <= 255


def test_render_rejects_hopeless_spec():
    spec = DS.DocumentSpec(height=64, width=64, margin=30, seed=0)
    with pytest.raises(InvalidConfigError):
        DS.render_document(spec)


def test_build_dataset_counts_and_manifest(tmp_path):
    DS.build_dataset(tmp_path / "d", (6, 2, 2), script="latin", seed=1, size=64)
    manifest = json.loads((tmp_path / "d" / "manifest.json").read_text())
    assert len(manifest["splits"]["train"]) == 6
    assert len(manifest["splits"]["val"]) == 2
    assert len(manifest["splits"]["test"]) == 2
    pngs = list((tmp_path / "d").rglob("*.png"))
    assert len(pngs) == 10
    for split in ("train", "val", "test"):
        handle = DS.DatasetHandle.open(tmp_path / "d", split)
        assert handle.image_size == (64, 64)
        img = handle.load(0)
        assert img.shape == (64, 64, 3)


def test_build_dataset_deterministic(tmp_path):
    DS.build_dataset(tmp_path / "a", (3, 1, 1), seed=5, size=64)
    DS.build_dataset(tmp_path / "b", (3, 1, 1), seed=5, size=64)
    for rel in ("train/img_0000000.png", "train/img_0000002.png", "val/img_0000000.png"):
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()
    ma = json.loads((tmp_path / "a" / "manifest.json").read_text())
    mb = json.loads((tmp_path / "b" / "manifest.json").read_text())
    assert ma == mb


def test_ingest_bare_directory(tmp_path):
    rng = np.random.default_rng(0)
    for i in range(4):
        imaging.save_png(np.round(rng.uniform(0, 255, (32, 32, 3))), tmp_path / f"img{i}.png")
    handle = DS.DatasetHandle.open(tmp_path, "train")
    assert len(handle) == 4
    assert handle.image_size == (32, 32)
    assert handle.load_all().shape == (4, 32, 32, 3)


def test_open_missing_dir_errors(tmp_path):
    with pytest.raises(InvalidConfigError, match="nothere"):
        DS.DatasetHandle.open(tmp_path / "nothere", "train")


def test_load_all_skips_unreadable_within_budget(tmp_path):
    rng = np.random.default_rng(1)
    # 150 good images, 1 corrupt: under the 1% limit it must fail; use a
    # larger corpus so one bad file is tolerated.
    for i in range(150):
        imaging.save_png(np.round(rng.uniform(0, 255, (16, 16, 3))), tmp_path / f"img{i:03d}.png")
    (tmp_path / "img000.png").write_bytes(b"not a png")
    handle = DS.DatasetHandle.open(tmp_path, "train")
    with pytest.warns(RuntimeWarning):
        stack = handle.load_all()
    assert stack.shape[0] == 149


def test_load_all_fails_when_too_many_unreadable(tmp_path):
    rng = np.random.default_rng(2)
    for i in range(10):
        imaging.save_png(np.round(rng.uniform(0, 255, (16, 16, 3))), tmp_path / f"img{i}.png")
    (tmp_path / "img3.png").write_bytes(b"junk")
    handle = DS.DatasetHandle.open(tmp_path, "train")
    with pytest.warns(RuntimeWarning):
        with pytest.raises(InvalidInputError):
            handle.load_all()


def test_batches_shapes_and_epoch_permutation(tmp_path):
    DS.build_dataset(tmp_path / "d", (10, 1, 1), seed=3, size=64)
    handle = DS.DatasetHandle.open(tmp_path / "d", "train")
    gen = DS.batches(handle, batch_size=4, n_bits=16, rng=7)
    seen = []
    for _ in range(5):  # two full epochs of 10 images
        covers, bits = next(gen)
        assert covers.shape == (4, 64, 64, 3)
        assert bits.shape == (4, 16)
        assert set(np.unique(bits)) <= {0, 1}
        seen.append(covers)
    # reconstruct index stream and check each epoch is a permutation
    idx_stream = [DS.batch_indices(10, 4, k, 7) for k in range(5)]
    flat = np.concatenate(idx_stream)
    assert sorted(flat[:10].tolist()) == list(range(10))
    assert sorted(flat[10:20].tolist()) == list(range(10))


def test_batch_bits_unbiased():
    total = []
    for k in range(100):
        total.append(DS.batch_bits(100, 10, k, 123))
    mean = np.concatenate(total).mean()  # 10^5 bits
    assert 0.49 <= mean <= 0.51


def test_batches_deterministic_for_seed(tmp_path):
    DS.build_dataset(tmp_path / "d", (5, 1, 1), seed=4, size=64)
    handle = DS.DatasetHandle.open(tmp_path / "d", "train")
    a = list(zip(range(3), DS.batches(handle, 2, 8, rng=9)))
    b = list(zip(range(3), DS.batches(handle, 2, 8, rng=9)))
    for (_, (ca, ba)), (_, (cb, bb)) in zip(a, b):
        assert np.array_equal(ca, cb) and np.array_equal(ba, bb)


def test_full_scale_default_counts():
    assert DS.FULL_SCALE_COUNTS == (230000, 10000, 10000)
