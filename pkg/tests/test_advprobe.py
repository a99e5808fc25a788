"""Tests for linear probes and FGSM attacks."""

import pytest
import torch
import torch.nn.functional as F

from rcdmkit.analysis.advprobe import (
    LinearProbe,
    attack_sweep,
    degradation_report,
    fgsm,
    fit_probe,
    probe_accuracy,
    train_probe,
)
from rcdmkit.analysis.repops import RepresentationBank
from rcdmkit.exceptions import ConfigurationError, FingerprintMismatchError


def separable_bank(n: int = 20):
    g = torch.Generator().manual_seed(0)
    offsets = torch.randn(n, 2, generator=g) * 0.3
    labels = torch.arange(n) % 2
    centers = torch.stack([labels.float() * 4.0 - 2.0, torch.zeros(n)], dim=1)
    return centers + offsets, labels


@pytest.mark.unit
def test_probe_separates_toy_bank(generator):
    reps, labels = separable_bank()
    probe = fit_probe(reps, labels, {"steps": 200, "lr": 0.05}, generator)
    assert probe_accuracy(probe, reps, labels) == 1.0
    assert probe.metadata["train_accuracy"] == 1.0


@pytest.mark.unit
def test_probe_needs_two_classes(generator):
    with pytest.raises(ConfigurationError):
        fit_probe(
            torch.zeros(4, 2), torch.zeros(4, dtype=torch.long), {"steps": 1}, generator
        )


@pytest.mark.unit
def test_probe_refuses_other_encoder(encoder):
    probe = LinearProbe(16, 4, encoder_fingerprint="0" * 64)
    with pytest.raises(FingerprintMismatchError):
        probe.check_encoder(encoder)


@pytest.mark.integration
def test_zero_epsilon_leaves_input_unchanged(encoder, shapes, generator):
    probe = train_probe(encoder, shapes, {"steps": 5}, generator)
    x = shapes.images[:3]
    assert torch.equal(fgsm(x, shapes.labels[:3], encoder, probe, 0.0), x)
    with pytest.raises(ConfigurationError):
        fgsm(x, shapes.labels[:3], encoder, probe, -0.1)


@pytest.mark.integration
def test_fgsm_stays_in_range_and_moves_by_epsilon(encoder, shapes, generator):
    probe = train_probe(encoder, shapes, {"steps": 5}, generator)
    x = shapes.images[:2]
    x_adv = fgsm(x, shapes.labels[:2], encoder, probe, 0.1)
    assert float(x_adv.min()) >= -1.0 and float(x_adv.max()) <= 1.0
    assert float((x_adv - x).abs().max()) <= 0.1 + 1e-6


@pytest.mark.integration
def test_attack_sweep_at_zero(encoder, shapes, generator, denoiser, schedule, tmp_path):
    probe = train_probe(encoder, shapes, {"steps": 5}, generator)
    bank = RepresentationBank.from_encoder(encoder, shapes)
    records = attack_sweep(
        shapes.images[:1], int(shapes.labels[0]), encoder, probe, [0.0, 0.2],
        bank=bank, conditioning_id=shapes.ids[0], denoiser=denoiser, schedule=schedule,
        generator=generator, samples_per_epsilon=2, grid_dir=tmp_path,
    )
    first = records[0]
    assert first.prediction == first.clean_prediction
    assert first.rep_distance == 0.0
    assert first.neighbor_rank == 1
    assert len(first.sample_predictions) == 2
    assert (tmp_path / "attack_00_eps_0.png").is_file()
    assert (tmp_path / "attack_01_eps_0.2.png").is_file()


@pytest.mark.integration
def test_degradation_report_epsilons(encoder, shapes, generator):
    probe = train_probe(encoder, shapes, {"steps": 5}, generator)
    rows = degradation_report(shapes.images, shapes.labels, encoder, probe, [0.0, 0.5])
    assert [r["epsilon"] for r in rows] == [0.0, 0.5]
    assert all(0.0 <= r["accuracy"] <= 1.0 for r in rows)
    with pytest.raises(ConfigurationError):
        degradation_report(shapes.images, shapes.labels, encoder, probe, [0.5, 0.1])


def linear_encoder(a: torch.Tensor):
    return lambda x: x.flatten(1) @ a.t()


@pytest.mark.unit
def test_fgsm_follows_analytic_gradient_sign():
    g = torch.Generator().manual_seed(3)
    a = torch.randn(4, 6, generator=g)
    probe = LinearProbe(4, 3)
    x = torch.rand(5, 1, 2, 3, generator=g) - 0.5
    labels = torch.tensor([0, 1, 2, 0, 1])

    with torch.no_grad():
        w = probe.linear.weight
        probs = torch.softmax(probe(x.flatten(1) @ a.t()), dim=1)
        analytic = (probs - F.one_hot(labels, 3).float()) @ w @ a
    expected = x + 0.1 * analytic.sign().reshape(x.shape)
    assert torch.allclose(
        fgsm(x, labels, linear_encoder(a), probe, 0.1), expected, atol=1e-6
    )

    targeted = fgsm(x, labels, linear_encoder(a), probe, 0.1, target=2)
    with torch.no_grad():
        toward = (probs - F.one_hot(torch.full_like(labels, 2), 3).float()) @ w @ a
    assert torch.allclose(targeted, x - 0.1 * toward.sign().reshape(x.shape), atol=1e-6)


@pytest.mark.unit
def test_rep_distance_grows_along_the_sweep():
    g = torch.Generator().manual_seed(4)
    a = torch.randn(3, 8, generator=g)
    probe = LinearProbe(3, 2)
    x = (torch.rand(1, 2, 2, 2, generator=g) - 0.5) * 0.2
    epsilons = [0.0, 0.05, 0.1, 0.2, 0.4, 0.8]
    records = attack_sweep(x, 1, linear_encoder(a), probe, epsilons)
    distances = [r.rep_distance for r in records]
    assert distances[0] == 0.0
    assert all(hi >= lo for lo, hi in zip(distances, distances[1:]))
    assert distances[-1] > 0.0


@pytest.mark.unit
def test_largest_epsilon_hurts_accuracy(generator):
    reps, labels = separable_bank(40)
    x = (reps / 4.0).reshape(-1, 1, 1, 2)
    encoder = linear_encoder(torch.eye(2))
    probe = fit_probe(x.flatten(1), labels, {"steps": 300, "lr": 0.05}, generator)
    rows = degradation_report(x, labels, encoder, probe, [0.0, 0.25, 1.0])
    assert rows[0]["accuracy"] == 1.0
    assert rows[-1]["accuracy"] < rows[0]["accuracy"]


@pytest.mark.unit
def test_close_epsilons_get_separate_grids(tmp_path):
    probe = LinearProbe(4, 2)
    x = torch.zeros(1, 1, 2, 2)
    records = attack_sweep(x, 0, linear_encoder(torch.eye(4)), probe, [0.1, 0.1001],
                           grid_dir=tmp_path)
    assert len({r.grid for r in records}) == 2
    assert len(list(tmp_path.glob("attack_*.png"))) == 2
