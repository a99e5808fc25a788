"""Shared fixtures: tiny networks and datasets that run in milliseconds on CPU."""

from pathlib import Path

import pytest
import torch

from rcdmkit.diffusion.denoiser import DenoiserConfig, build_denoiser
from rcdmkit.diffusion.schedule import make_schedule
from rcdmkit.encoders.models import EncoderConfig, Provenance, build_encoder
from rcdmkit.runtime.data import render_shapes

SMOKE_CONFIG = Path(__file__).resolve().parents[1] / "config" / "smoke_config.yaml"


@pytest.fixture
def generator():
    return torch.Generator().manual_seed(1234)


@pytest.fixture
def shapes():
    return render_shapes(16, seed=3, image_size=8)


@pytest.fixture
def encoder_config():
    return EncoderConfig(
        image_channels=3,
        image_size=8,
        widths=(8, 16),
        projector_hidden=16,
        projector_dim=8,
    )


@pytest.fixture
def encoder(encoder_config):
    return build_encoder(encoder_config, Provenance.RANDOM, seed=0)


@pytest.fixture
def denoiser_config():
    return DenoiserConfig(
        rep_dim=16,
        cond_dim=8,
        widths=(8, 16),
        blocks_per_level=1,
        time_dim=8,
        image_channels=3,
        image_size=8,
    )


@pytest.fixture
def denoiser(denoiser_config):
    return build_denoiser(denoiser_config, seed=0)


@pytest.fixture
def schedule():
    return make_schedule(4, 1e-4, 0.02)


@pytest.fixture
def smoke_config():
    return SMOKE_CONFIG
