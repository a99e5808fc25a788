"""Tests for encoders, their training loops and augmentation."""

import pytest
import torch

from rcdmkit.analysis.advprobe import probe_accuracy, train_probe
from rcdmkit.encoders import training
from rcdmkit.encoders.augment import (
    AugmentationPolicy,
    apply_probe_transform,
    augment_batch,
    to_grayscale,
)
from rcdmkit.encoders.models import (
    EncoderConfig,
    Provenance,
    Source,
    build_encoder,
    encode,
    encode_projector,
)
from rcdmkit.encoders.training import (
    heldout_split,
    nt_xent,
    train_ssl,
    train_supervised,
)
from rcdmkit.exceptions import ConfigurationError, NumericalError, ShapeMismatchError
from rcdmkit.runtime.data import ImageDataset, render_shapes

SSL_CONFIG = {"steps": 2, "batch_size": 4, "heldout_pairs": 4, "log_every": 1}


@pytest.mark.unit
def test_duplicated_rows_encode_identically(encoder, shapes):
    x = torch.cat([shapes.images[:1], shapes.images[:1]])
    rep = encode(x, encoder)
    assert torch.equal(rep.values[0], rep.values[1])
    assert rep.source is Source.BACKBONE
    assert rep.fingerprint == encoder.fingerprint()


@pytest.mark.unit
def test_seeded_random_encoder_is_reproducible(encoder_config, shapes):
    a = build_encoder(encoder_config, Provenance.RANDOM, seed=5)
    b = build_encoder(encoder_config, Provenance.RANDOM, seed=5)
    assert a.fingerprint() == b.fingerprint()
    assert torch.equal(encode(shapes.images, a).values, encode(shapes.images, b).values)


@pytest.mark.unit
def test_desk_architecture_dimensions():
    encoder = build_encoder(EncoderConfig(), seed=0)
    assert encoder.backbone_dim == 128
    assert encoder.projector_dim == 32


@pytest.mark.unit
def test_projector_is_a_function_of_backbone(encoder, shapes):
    backbone = encode(shapes.images[:4], encoder).values
    projected = encode_projector(shapes.images[:4], encoder).values
    with torch.no_grad():
        assert torch.allclose(encoder.projector(backbone), projected, atol=1e-6)


@pytest.mark.unit
def test_encoder_checks_input_shape(encoder):
    with pytest.raises(ShapeMismatchError):
        encode(torch.zeros(1, 3, 16, 16), encoder)


@pytest.mark.unit
def test_nt_xent_needs_two_views():
    with pytest.raises(ConfigurationError):
        nt_xent(torch.zeros(1, 4), torch.zeros(1, 4))


@pytest.mark.unit
def test_ssl_rejects_single_image(encoder_config, shapes, generator):
    single = shapes.subset([0])
    with pytest.raises(ConfigurationError):
        train_ssl(single, SSL_CONFIG, generator, encoder_config)


@pytest.mark.unit
def test_supervised_rejects_unlabeled(encoder_config, shapes, generator):
    unlabeled = ImageDataset(images=shapes.images, ids=shapes.ids)
    with pytest.raises(ConfigurationError):
        train_supervised(unlabeled, {"steps": 1}, generator, encoder_config)


@pytest.mark.integration
def test_ssl_training_is_deterministic(encoder_config, shapes):
    a = train_ssl(shapes, SSL_CONFIG, torch.Generator().manual_seed(9), encoder_config)
    b = train_ssl(shapes, SSL_CONFIG, torch.Generator().manual_seed(9), encoder_config)
    assert a.fingerprint() == b.fingerprint()
    assert a.provenance is Provenance.SSL
    assert "heldout_loss" in a.metadata and "random_init_heldout_loss" in a.metadata
    assert [entry["step"] for entry in a.training_log] == [0, 1]


@pytest.mark.unit
def test_heldout_split_is_disjoint_and_complete(generator):
    train, held = heldout_split(20, 0.25, generator)
    assert len(held) == 5 and len(train) == 15
    assert set(train.tolist()).isdisjoint(held.tolist())
    assert sorted(train.tolist() + held.tolist()) == list(range(20))


@pytest.mark.unit
def test_heldout_split_needs_room_on_both_sides(generator):
    with pytest.raises(ConfigurationError):
        heldout_split(3, 0.1, generator)
    with pytest.raises(ConfigurationError):
        heldout_split(10, 1.0, generator)


@pytest.mark.integration
def test_ssl_heldout_images_stay_out_of_training(
    encoder_config, shapes, generator, monkeypatch
):
    seen = []
    real_augment = training.augment_batch

    def recording_augment(x, policy, gen):
        if torch.is_grad_enabled():
            seen.append(x.clone())
        return real_augment(x, policy, gen)

    monkeypatch.setattr(training, "augment_batch", recording_augment)
    config = {**SSL_CONFIG, "heldout_fraction": 0.25}
    encoder = train_ssl(shapes, config, generator, encoder_config)
    held = encoder.metadata["heldout_ids"]
    assert len(held) == 4 and set(held) <= set(shapes.ids)
    held_images = shapes.images[[shapes.ids.index(i) for i in held]]
    assert seen
    for batch in seen:
        for row in batch:
            assert not any(torch.equal(row, image) for image in held_images)


@pytest.mark.integration
def test_ssl_missed_margin_is_an_error(encoder_config, shapes, generator):
    config = {**SSL_CONFIG, "min_improvement": 1e6}
    with pytest.raises(NumericalError):
        train_ssl(shapes, config, generator, encoder_config)


@pytest.mark.integration
def test_supervised_training_records_accuracy(encoder_config, shapes, generator):
    encoder = train_supervised(
        shapes, {"steps": 2, "batch_size": 8}, generator, encoder_config
    )
    assert encoder.provenance is Provenance.SUPERVISED
    assert 0.0 <= encoder.metadata["train_accuracy"] <= 1.0


@pytest.mark.unit
def test_augment_batch_is_seeded(shapes):
    policy = AugmentationPolicy()
    a = augment_batch(shapes.images[:4], policy, torch.Generator().manual_seed(3))
    b = augment_batch(shapes.images[:4], policy, torch.Generator().manual_seed(3))
    assert torch.equal(a, b)
    assert a.shape == shapes.images[:4].shape
    assert float(a.min()) >= -1.0 and float(a.max()) <= 1.0


@pytest.mark.unit
def test_grayscale_is_a_fixed_point(shapes):
    gray = to_grayscale(shapes.images[:2])
    assert torch.allclose(to_grayscale(gray), gray, atol=1e-6)
    assert torch.allclose(apply_probe_transform(gray, "grayscale"), gray, atol=1e-6)


@pytest.mark.unit
def test_unknown_probe_transform():
    with pytest.raises(ConfigurationError):
        apply_probe_transform(torch.zeros(1, 3, 8, 8), "rotate")


@pytest.mark.unit
def test_invalid_policy():
    with pytest.raises(ConfigurationError):
        AugmentationPolicy(flip_p=1.5)


@pytest.mark.unit
def test_fingerprint_tracks_parameters(encoder_config, encoder, shapes):
    twin = build_encoder(encoder_config, Provenance.RANDOM, seed=0)
    original = encoder.fingerprint()
    assert twin.fingerprint() == original
    encode(shapes.images, encoder)
    assert encoder.fingerprint() == original

    weight = next(encoder.parameters())
    with torch.no_grad():
        weight.view(-1)[0] += 1e-3
    assert encoder.fingerprint() != original
    with torch.no_grad():
        weight.view(-1)[0] -= 1e-3
    assert encoder.fingerprint() == twin.fingerprint()


@pytest.mark.unit
def test_supervised_encoder_refuses_projector(encoder_config, shapes, generator):
    supervised = train_supervised(shapes, {"steps": 1, "batch_size": 4}, generator,
                                  encoder_config)
    assert supervised.available_sources() == [Source.BACKBONE]
    with pytest.raises(ConfigurationError):
        encode_projector(shapes.images[:2], supervised)
    assert encode(shapes.images[:2], supervised).values.shape == (2, 16)


@pytest.mark.slow
def test_supervised_training_memorizes_small_set():
    data = render_shapes(50, seed=5, image_size=16)
    config = EncoderConfig(
        image_size=16, widths=(16, 32), projector_hidden=16, projector_dim=8
    )
    encoder = train_supervised(
        data,
        {"steps": 400, "batch_size": 50, "lr": 3e-3},
        torch.Generator().manual_seed(2),
        config,
    )
    assert encoder.metadata["train_accuracy"] >= 0.95


@pytest.mark.slow
def test_ssl_probe_beats_random_init():
    data = render_shapes(400, seed=6, image_size=16)
    config = EncoderConfig(
        image_size=16, widths=(16, 32), projector_hidden=32, projector_dim=16
    )
    gen = torch.Generator().manual_seed(3)
    ssl = train_ssl(
        data, {"steps": 400, "batch_size": 64, "log_every": 100}, gen, config
    )
    random = build_encoder(config, Provenance.RANDOM, seed=3)

    train, test = data.subset(list(range(300))), data.subset(list(range(300, 400)))
    scores = {}
    for name, model in (("ssl", ssl), ("random", random)):
        probe = train_probe(
            model, train, {"steps": 500, "lr": 0.05}, torch.Generator().manual_seed(4)
        )
        scores[name] = probe_accuracy(
            probe, encode(test.images, model).values, test.labels
        )
    assert scores["ssl"] > scores["random"]
