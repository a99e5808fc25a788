"""Tests for faithfulness ranking, distance references, invariance and FID/IS."""

import numpy as np
import pytest
import torch

from rcdmkit.analysis.faitheval import (
    FaithfulnessReport,
    distance_reference_suite,
    faithfulness_report,
    frechet_distance,
    frechet_distance_from_moments,
    inception_style_score,
    invariance_probe,
    mrr,
    null_model_ranks,
    rank_of_conditioning,
    render_rank_table,
    sample_and_rank,
)
from rcdmkit.analysis.repops import RepresentationBank
from rcdmkit.encoders.models import Source
from rcdmkit.exceptions import ArtifactError, ConfigurationError, NumericalError


@pytest.fixture
def line_bank():
    return RepresentationBank(
        np.array([[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]]), ["a", "b", "c"]
    )


@pytest.mark.unit
def test_rank_examples(line_bank):
    assert rank_of_conditioning(np.array([0.0, 0.0]), "a", line_bank) == 1
    assert rank_of_conditioning(np.array([0.9, 0.0]), "a", line_bank) == 2
    flat = RepresentationBank(np.ones((3, 2)), ["x", "y", "z"])
    assert rank_of_conditioning(np.zeros(2), "y", flat) == 1


@pytest.mark.unit
def test_mrr_examples():
    assert mrr([1, 1, 1]) == 1.0
    assert mrr([1, 2, 4]) == pytest.approx(0.583333, abs=1e-6)
    with pytest.raises(ConfigurationError):
        mrr([])


@pytest.mark.unit
def test_faithfulness_report(line_bank):
    report = faithfulness_report(
        np.array([[0.0, 0.0], [0.9, 0.0]]), ["a", "a"], line_bank
    )
    assert report.ranks == [1, 2]
    assert report.mean_rank == 1.5
    assert report.mrr == pytest.approx(0.75)
    assert "MRR" in render_rank_table([("rcdm", report)])


@pytest.mark.unit
def test_frechet_identical_sets():
    features = np.random.default_rng(0).standard_normal((50, 3))
    assert frechet_distance(features, features) == pytest.approx(0.0, abs=1e-6)


@pytest.mark.unit
def test_frechet_closed_forms():
    one = np.array([[1.0]])
    assert frechet_distance_from_moments(
        np.array([0.0]), one, np.array([1.0]), one
    ) == pytest.approx(1.0)
    assert frechet_distance_from_moments(
        np.array([0.0]), one, np.array([0.0]), np.array([[4.0]])
    ) == pytest.approx(1.0)


@pytest.mark.unit
def test_frechet_rejects_indefinite_covariance():
    with pytest.raises(NumericalError):
        frechet_distance_from_moments(
            np.zeros(2), np.diag([1.0, -1.0]), np.zeros(2), np.eye(2)
        )


@pytest.mark.unit
def test_inception_style_score():
    assert inception_style_score([[0.3, 0.7], [0.3, 0.7]]) == pytest.approx(1.0)
    assert inception_style_score([[1.0, 0.0], [0.0, 1.0]]) == pytest.approx(2.0)
    assert inception_style_score(np.full((4, 5), 0.2)) == pytest.approx(1.0)
    with pytest.raises(ConfigurationError):
        inception_style_score([[0.5, 0.6]])


@pytest.mark.integration
def test_invariance_probe_schema(encoder, shapes):
    rows = invariance_probe(
        shapes.images[:1], ["identity", "horizontal_flip", "zoom_in"], encoder
    )
    assert len(rows) == 6
    identity = [r.distance for r in rows if r.transform == "identity"]
    assert identity == [0.0, 0.0]


@pytest.mark.integration
def test_invariance_grayscale_fixed_point(encoder, shapes):
    gray = shapes.images[:1].mean(dim=1, keepdim=True)
    gray = gray.expand(-1, 3, -1, -1).contiguous()
    rows = invariance_probe(gray, ["grayscale"], encoder)
    assert all(r.distance == 0.0 for r in rows)


@pytest.mark.integration
def test_distance_suite_generated_row(encoder, shapes, generator):
    image = shapes.images[:1]
    report = distance_reference_suite(
        image, encoder, shapes, shapes, samples=image.clone(), generator=generator,
        label=int(shapes.labels[0]), nearest_k=3, random_count=5, num_augmentations=2,
    )
    assert set(report.rows) == {
        "random-bank", "same-class", "nearest-train", "single-augmentation",
        "composite-augmentation", "generated-samples",
    }
    assert report.rows["generated-samples"].mean == 0.0
    assert report.rows["nearest-train"].count == 3
    assert report.rows["nearest-train"].mean <= report.rows["random-bank"].mean + 1e-6


@pytest.mark.integration
def test_distance_suite_preconditions(encoder, shapes):
    image = shapes.images[:1]
    with pytest.raises(ArtifactError):
        distance_reference_suite(image, encoder, shapes, rows=["generated-samples"])
    with pytest.raises(ConfigurationError):
        distance_reference_suite(image, encoder, shapes, rows=["same-class"])
    only = distance_reference_suite(
        image, encoder, shapes, rows=["random-bank"], random_count=4
    )
    assert list(only.rows) == ["random-bank"]


@pytest.mark.integration
def test_sample_and_rank(encoder, denoiser, schedule, shapes, generator):
    bank = RepresentationBank.from_encoder(encoder, shapes)
    report, samples = sample_and_rank(
        denoiser,
        encoder,
        bank,
        shapes.ids[:2],
        schedule,
        generator,
        samples_per_item=2,
        source=Source.BACKBONE,
    )
    assert isinstance(report, FaithfulnessReport)
    assert len(report.ranks) == 4
    assert all(1 <= r <= len(bank) for r in report.ranks)
    assert samples.shape == (4, 3, 8, 8)
    assert report.conditioning_ids == [shapes.ids[0]] * 2 + [shapes.ids[1]] * 2
    assert torch.isfinite(samples).all()


@pytest.mark.unit
def test_null_model_mean_rank_is_middle_of_bank():
    rng = np.random.default_rng(12)
    n = 1000
    bank = RepresentationBank(rng.standard_normal((n, 8)), [f"r{i}" for i in range(n)])
    ranks = []
    for _ in range(5):
        ranks += null_model_ranks(bank.reps, bank.ids, bank, rng)
    assert np.mean(ranks) == pytest.approx((n + 1) / 2, rel=0.05)
    assert faithfulness_report(bank.reps, bank.ids, bank).mean_rank == 1.0


@pytest.mark.unit
def test_rank_matches_brute_force_on_large_bank():
    rng = np.random.default_rng(13)
    reps = rng.standard_normal((400, 6))
    bank = RepresentationBank(reps, [f"r{i}" for i in range(400)])
    for h in rng.standard_normal((40, 6)):
        target = int(rng.integers(0, 400))
        own = sum((h[k] - reps[target][k]) ** 2 for k in range(6))
        closer = 0
        for row in reps:
            if sum((h[k] - row[k]) ** 2 for k in range(6)) < own:
                closer += 1
        assert rank_of_conditioning(h, f"r{target}", bank) == 1 + closer


@pytest.mark.unit
@pytest.mark.parametrize("seed", range(5))
def test_inception_style_score_bounds(seed):
    classes = 10
    probs = np.random.default_rng(seed).dirichlet(np.full(classes, 0.3), size=64)
    score = inception_style_score(probs)
    assert 1.0 - 1e-9 <= score <= classes + 1e-9
