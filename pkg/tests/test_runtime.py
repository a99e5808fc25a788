"""Tests for datasets, checkpoints, grids, manifests and the representation cache."""

import json

import numpy as np
import pytest
import torch
from PIL import Image

from rcdmkit.analysis.advprobe import LinearProbe
from rcdmkit.runtime import checkpoint
from rcdmkit.runtime.cache import RepresentationCache
from rcdmkit.runtime.data import ingest_dataset, load_image_folder, render_shapes
from rcdmkit.runtime.grids import emit_grid, emit_rows, to_uint8
from rcdmkit.runtime.manifest import (
    OutputLock,
    RunManifest,
    RunRecorder,
    load_manifest,
    replay_argv,
)
from rcdmkit.exceptions import (
    ArtifactError,
    ComponentTypeError,
    ConfigurationError,
    IntegrityError,
    VersionMismatchError,
)


@pytest.mark.unit
def test_shapes_are_reproducible():
    a = render_shapes(100, seed=7, image_size=16)
    b = render_shapes(100, seed=7, image_size=16)
    assert len(a) == 100
    assert torch.equal(a.images, b.images)
    assert a.digest() == b.digest()
    assert float(a.images.min()) >= -1.0 and float(a.images.max()) <= 1.0


@pytest.mark.unit
def test_splits_are_disjoint():
    train = ingest_dataset(None, "shapes", "train", count=50, image_size=8)
    val = ingest_dataset(None, "shapes", "val", count=50, image_size=8)
    assert not set(train.ids) & set(val.ids)
    assert len(train) + len(val) == 50


@pytest.mark.unit
def test_image_folder_labels_follow_sorted_dirs(tmp_path):
    for name, color in (("zebra", (255, 255, 255)), ("apple", (255, 0, 0))):
        (tmp_path / name).mkdir()
        Image.new("RGB", (4, 4), color).save(tmp_path / name / "img.png")
    dataset = load_image_folder(tmp_path, image_size=4)
    assert dataset.class_names == ["apple", "zebra"]
    assert dataset.labels.tolist() == [0, 1]
    assert dataset.ids == ["apple/img.png", "zebra/img.png"]


@pytest.mark.unit
def test_empty_image_folder(tmp_path):
    with pytest.raises(ArtifactError):
        load_image_folder(tmp_path)


@pytest.mark.unit
def test_to_uint8_maps_zero_to_mid_gray():
    assert to_uint8(torch.zeros(1, 1, 1, 1)).item() == 128
    pixels = to_uint8(torch.tensor([[[[-1.0]]], [[[1.0]]]]))
    assert pixels.flatten().tolist() == [0, 255]


@pytest.mark.unit
def test_emit_grid(tmp_path):
    path = emit_grid(torch.zeros(3, 3, 4, 4), (2, 2), tmp_path / "grid.png")
    with Image.open(path) as img:
        assert img.size == (8, 8)
        assert img.getpixel((0, 0)) == (128, 128, 128)
        assert img.getpixel((7, 7)) == (0, 0, 0)
    with pytest.raises(ConfigurationError):
        emit_grid(torch.zeros(5, 3, 4, 4), (2, 2), tmp_path / "small.png")


@pytest.mark.unit
def test_emit_rows_pads_short_rows(tmp_path):
    path = emit_rows(
        [torch.ones(3, 1, 2, 2), torch.ones(1, 1, 2, 2)], tmp_path / "rows.png"
    )
    with Image.open(path) as img:
        assert img.size == (6, 4)
        assert img.getpixel((5, 3)) == 0


@pytest.mark.unit
def test_encoder_checkpoint_round_trip(tmp_path, encoder, shapes):
    encoder.training_log = [{"step": 0, "loss": 1.5}]
    path = checkpoint.save_encoder(encoder, tmp_path / "encoder.ckpt")
    restored = checkpoint.load_encoder(path)
    assert restored.fingerprint() == encoder.fingerprint()
    assert restored.training_log == encoder.training_log
    assert torch.equal(restored(shapes.images[:2]), encoder.eval()(shapes.images[:2]))


@pytest.mark.unit
def test_checkpoint_detects_corruption(tmp_path, encoder):
    path = checkpoint.save_encoder(encoder, tmp_path / "encoder.ckpt")
    data = bytearray(path.read_bytes())
    data[-1] ^= 0xFF
    path.write_bytes(bytes(data))
    with pytest.raises(IntegrityError):
        checkpoint.load_encoder(path)


@pytest.mark.unit
def test_checkpoint_component_and_version(tmp_path, denoiser, encoder):
    denoiser.metadata = {
        "encoder_fingerprint": encoder.fingerprint(),
        "source": "backbone",
    }
    path = checkpoint.save_denoiser(denoiser, tmp_path / "denoiser.ckpt")
    restored = checkpoint.load_denoiser(path)
    assert restored.metadata["encoder_fingerprint"] == encoder.fingerprint()
    with pytest.raises(ComponentTypeError):
        checkpoint.load_encoder(path)

    container = checkpoint.load_checkpoint(path)
    container.schema_version = 99
    checkpoint.save_checkpoint(container, tmp_path / "future.ckpt")
    with pytest.raises(VersionMismatchError):
        checkpoint.load_checkpoint(tmp_path / "future.ckpt")
    with pytest.raises(ArtifactError):
        checkpoint.load_checkpoint(tmp_path / "absent.ckpt")


@pytest.mark.unit
def test_probe_checkpoint_round_trip(tmp_path):
    probe = LinearProbe(4, 3, encoder_fingerprint="abc", source="projector")
    restored = checkpoint.load_probe(
        checkpoint.save_probe(probe, tmp_path / "probe.ckpt")
    )
    assert restored.encoder_fingerprint == "abc"
    assert restored.source.value == "projector"
    assert torch.equal(restored.linear.weight, probe.linear.weight)


@pytest.mark.unit
def test_output_lock_is_exclusive(tmp_path):
    with OutputLock(tmp_path / "run"):
        with pytest.raises(ArtifactError):
            with OutputLock(tmp_path / "run"):
                pass
    with OutputLock(tmp_path / "run"):
        pass


@pytest.mark.unit
def test_recorder_writes_sorted_manifest(tmp_path):
    (tmp_path / "a.txt").write_text("hello", encoding="utf-8")
    recorder = RunRecorder(
        "sample",
        ["sample", "--seed", "3"],
        {"runtime": {"seed": 3}},
        3,
        tmp_path,
        "0.3.0",
    )
    recorder.artifact("a.txt", tmp_path / "a.txt")
    recorder.fingerprint("encoder", "f" * 64)
    path = recorder.finish()

    raw = json.loads(path.read_text(encoding="utf-8"))
    assert list(raw) == sorted(raw)
    manifest = load_manifest(tmp_path)
    assert manifest.artifacts["a.txt"]["path"] == "a.txt"
    assert manifest.checksums()["a.txt"] == checkpoint.file_sha256(tmp_path / "a.txt")


@pytest.mark.unit
def test_manifest_version_check():
    with pytest.raises(VersionMismatchError):
        RunManifest.from_dict(
            {"command": "x", "argv": [], "config": {}, "seed": 0, "schema_version": 7}
        )


@pytest.mark.unit
def test_replay_argv_replaces_config_and_out():
    argv = [
        "sample",
        "--config",
        "a.yaml",
        "--set",
        "kde.sigma=1",
        "--out=o",
        "--count",
        "2",
    ]
    manifest = RunManifest("sample", argv, {}, 0)
    assert replay_argv(manifest, "snap.yaml", "new") == [
        "sample", "--count", "2", "--config", "snap.yaml", "--out", "new",
    ]


@pytest.mark.unit
def test_cache_hits_after_first_encode(tmp_path, encoder, shapes):
    cache = RepresentationCache(tmp_path)
    first = cache.bank(shapes, encoder)
    second = cache.bank(shapes, encoder)
    assert (cache.misses, cache.hits) == (1, 1)
    np.testing.assert_array_equal(first.reps, second.reps)
    rep = cache.representation(shapes, encoder)
    assert rep.fingerprint == encoder.fingerprint()
    assert rep.values.dtype == torch.float32
