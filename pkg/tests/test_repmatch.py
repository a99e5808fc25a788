"""Tests for representation matching and Jacobian analysis."""

import json

import numpy as np
import pytest
import torch

from rcdmkit.analysis.repmatch import (
    JTableRow,
    MatchConfig,
    jacobian_rows,
    jtable_json,
    match_representation,
    nullspace_dimension,
    random_init,
    relative_distance,
    render_jtable,
    run_jtable,
)
from rcdmkit.exceptions import ConfigurationError, IndexOutOfRangeError, NumericalError

pytestmark = pytest.mark.unit


def linear_map(a: torch.Tensor):
    return lambda x: x.flatten(1) @ a.t()


def test_relative_distance_examples():
    assert relative_distance(5, 5) == 100
    assert relative_distance(5, 0) == 0
    assert relative_distance(10, 9.99) == pytest.approx(99.9)
    with pytest.raises(NumericalError):
        relative_distance(0, 0)


def test_already_matched_converges_at_step_zero():
    x = torch.randn(1, 1, 2, 2)
    result = match_representation(
        lambda v: v.flatten(1), x.flatten(), x, MatchConfig(steps=10)
    )
    assert result.converged
    assert result.steps_taken == 0
    assert result.relative_distance_percent == 0.0


def test_identity_one_gradient_step():
    target = torch.tensor([0.5, -0.25, 1.0, 0.0])
    cfg = MatchConfig(optimizer="sgd", steps=1, step_size=1.0)
    result = match_representation(
        lambda v: v.flatten(1), target, torch.zeros(1, 1, 2, 2), cfg
    )
    assert torch.allclose(result.x_final.flatten(), target)
    assert result.dT == pytest.approx(0.0, abs=1e-7)


def test_linear_map_gradient_descent():
    g = torch.Generator().manual_seed(0)
    a = torch.randn(4, 16, generator=g) / 4.0
    x_true = torch.randn(1, 16, generator=g)
    h = (x_true @ a.t())[0]
    cfg = MatchConfig(optimizer="sgd", steps=500, step_size=0.5)
    result = match_representation(linear_map(a), h, torch.zeros(1, 16), cfg)
    assert result.dT / result.d0 < 1e-3


@pytest.mark.parametrize("distance", ["l2", "l1", "cosine"])
@pytest.mark.parametrize("optimizer", ["sgd", "adam", "lbfgs"])
def test_every_combination_runs(distance, optimizer):
    a = torch.randn(3, 8, generator=torch.Generator().manual_seed(1))
    cfg = MatchConfig(distance=distance, optimizer=optimizer, steps=5, step_size=0.05)
    result = match_representation(
        linear_map(a), torch.ones(3), torch.zeros(1, 8) + 0.1, cfg
    )
    assert len(result.distances) == 6
    assert all(np.isfinite(result.distances))


def test_invalid_match_config():
    with pytest.raises(ConfigurationError):
        MatchConfig(distance="l3")
    with pytest.raises(ConfigurationError):
        MatchConfig(steps=0)


def test_jacobian_rows_of_linear_map():
    a = torch.randn(3, 6, generator=torch.Generator().manual_seed(2))
    rows = jacobian_rows(linear_map(a), torch.randn(1, 6), [2, 0])
    assert torch.allclose(rows, a[[2, 0]])
    with pytest.raises(IndexOutOfRangeError):
        jacobian_rows(linear_map(a), torch.randn(1, 6), [3])


def test_nullspace_full_rank():
    a = torch.randn(
        3, 10, generator=torch.Generator().manual_seed(3), dtype=torch.float64
    )
    x = torch.zeros(1, 10, dtype=torch.float64)
    assert nullspace_dimension(linear_map(a), x) == 7


def test_nullspace_rank_deficient():
    g = torch.Generator().manual_seed(4)
    basis = torch.randn(2, 10, generator=g, dtype=torch.float64)
    mix = torch.tensor([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]], dtype=torch.float64)
    x0 = torch.zeros(1, 10, dtype=torch.float64)
    assert nullspace_dimension(linear_map(mix @ basis), x0) == 8


def test_nullspace_square_invertible():
    a = torch.eye(4, dtype=torch.float64) * 2.0
    x = torch.zeros(1, 4, dtype=torch.float64)
    assert nullspace_dimension(linear_map(a), x) == 0


def test_jtable_rows_and_rendering():
    a = torch.randn(2, 4, generator=torch.Generator().manual_seed(5))
    results = run_jtable(
        linear_map(a),
        torch.ones(2),
        torch.zeros(1, 4),
        MatchConfig(steps=3, step_size=0.1),
        ["l2", "cosine"], ["adam"], ["none", "cosine"],
    )
    rows = [JTableRow.from_result(r) for r in results]
    assert [(r.distance, r.lr_schedule) for r in rows] == [
        ("l2", "none"), ("l2", "cosine"), ("cosine", "none"), ("cosine", "cosine"),
    ]
    table = render_jtable(rows).splitlines()
    assert table[0].split("\t")[:3] == ["distance", "optimizer", "lr_schedule"]
    assert len(table) == 5
    assert len(json.loads(jtable_json(rows))) == 4


@pytest.mark.integration
def test_matching_a_real_encoder(encoder, shapes, generator):
    f = encoder.representation_fn()
    image = shapes.images[:1]
    with torch.no_grad():
        target = f(image)[0]
    x_init = torch.randn(image.shape, generator=generator).clamp(-1, 1)
    result = match_representation(
        f, target, x_init, MatchConfig(steps=20, step_size=0.05), image
    )
    assert result.dT < result.d0
    assert result.pixel_distance is not None


def test_jacobian_rows_match_finite_differences(encoder, shapes):
    encoder.double()
    f = encoder.representation_fn()
    x = shapes.images[:1].double()
    rows = jacobian_rows(f, x, [0, 5, 11])

    step = 1e-6
    flat = x.reshape(-1)
    numeric = torch.zeros_like(rows)
    with torch.no_grad():
        for j in range(flat.numel()):
            bump = torch.zeros_like(flat)
            bump[j] = step
            plus = f((flat + bump).reshape(x.shape))[0, [0, 5, 11]]
            minus = f((flat - bump).reshape(x.shape))[0, [0, 5, 11]]
            numeric[:, j] = (plus - minus) / (2 * step)
    assert torch.allclose(rows, numeric, atol=1e-6, rtol=1e-4)


def test_gradient_step_stays_in_jacobian_row_space():
    g = torch.Generator().manual_seed(6)
    a = torch.randn(3, 12, generator=g, dtype=torch.float64)
    b = torch.randn(2, 3, generator=g, dtype=torch.float64)

    def f(x):
        return torch.tanh(x.flatten(1) @ a.t()) @ b.t()

    x0 = torch.randn(1, 12, generator=g, dtype=torch.float64)
    target = torch.randn(2, generator=g, dtype=torch.float64)
    result = match_representation(f, target, x0, MatchConfig(optimizer="sgd", steps=1,
                                                              step_size=0.1))
    update = (result.x_final - x0).reshape(-1, 1)
    rows = jacobian_rows(f, x0, [0, 1])
    coef = torch.linalg.lstsq(rows.t(), update).solution
    residual = update - rows.t() @ coef
    assert float(update.norm()) > 0
    assert float(residual.norm()) < 1e-10 * max(1.0, float(update.norm()))


@pytest.mark.slow
def test_toy_encoder_nullspace_is_large(encoder, shapes):
    f = encoder.representation_fn()
    d = shapes.images[0].numel()
    k = encoder.backbone_dim
    for i in range(3):
        null = nullspace_dimension(f, shapes.images[i : i + 1])
        assert d - k <= null <= d


@pytest.mark.slow
@pytest.mark.parametrize("optimizer", ["adam", "lbfgs"])
def test_adaptive_matching_reaches_target_on_toy_encoder(encoder, shapes, optimizer):
    f = encoder.representation_fn()
    image = shapes.images[:1]
    with torch.no_grad():
        target = f(image)[0]
    x_init = random_init(image.shape, torch.Generator().manual_seed(8))
    step_size = 0.01 if optimizer == "adam" else 1.0
    cfg = MatchConfig(optimizer=optimizer, steps=3000, step_size=step_size)
    result = match_representation(f, target, x_init, cfg, image)
    assert result.relative_distance_percent <= 5.0
