"""
Representation-conditioned denoiser.

A small U-shaped residual network predicting the noise in ``x_t``. Every
residual block holds one conditional normalization layer whose per-channel
scale and shift are linear functions of a projected representation.
"""

import logging
import math
from dataclasses import asdict, dataclass
from typing import Any, Dict, List, Optional, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from rcdmkit.exceptions import ConfigurationError, ShapeMismatchError

logger = logging.getLogger(__name__)

NORM_EPS = 1e-5


@dataclass
class DenoiserConfig:
    """Architecture descriptor of a denoiser."""

    rep_dim: int
    cond_dim: int = 64
    widths: Tuple[int, ...] = (32, 64, 128)
    blocks_per_level: int = 2
    time_dim: int = 64
    image_channels: int = 3
    image_size: int = 32

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        if self.rep_dim < 1 or self.cond_dim < 1 or self.time_dim < 2:
            raise ConfigurationError("rep_dim, cond_dim must be >= 1 and time_dim >= 2")
        if not self.widths or self.blocks_per_level < 1:
            raise ConfigurationError("need at least one level and one block per level")
        if self.image_size % (2 ** (len(self.widths) - 1)):
            raise ConfigurationError(
                f"image size {self.image_size} not divisible by "
                f"2^{len(self.widths) - 1}"
            )

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["widths"] = list(self.widths)
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "DenoiserConfig":
        return cls(**data)


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Sinusoidal embedding of integer timesteps."""
    half = dim // 2
    freqs = torch.exp(
        -math.log(10000.0)
        * torch.arange(half, dtype=torch.float64, device=t.device)
        / max(half - 1, 1)
    )
    args = t.to(torch.float64)[:, None] * freqs[None]
    embedding = torch.cat([torch.sin(args), torch.cos(args)], dim=-1)
    if dim % 2:
        embedding = F.pad(embedding, (0, 1))
    return embedding


def conditional_norm(
    features: torch.Tensor, c: torch.Tensor, w_gamma: torch.Tensor, w_beta: torch.Tensor
) -> torch.Tensor:
    """Standardize each channel per sample, then modulate with ``c``.

    ``gamma(c) = 1 + W_gamma c`` and ``beta(c) = W_beta c`` are broadcast per
    channel. A constant channel normalizes to zeros.

    Args:
        features: Feature map (N, channels, H, W)
        c: Conditioning vectors (N, C)
        w_gamma: Scale generator (channels, C)
        w_beta: Shift generator (channels, C)

    Returns:
        torch.Tensor: Modulated feature map
    """
    if features.ndim != 4:
        raise ShapeMismatchError(f"features must be rank-4, got rank {features.ndim}")
    channels = features.shape[1]
    if c.ndim != 2 or c.shape[0] != features.shape[0]:
        raise ShapeMismatchError(
            f"conditioning batch {tuple(c.shape)} for {features.shape[0]} maps"
        )
    expected = (channels, c.shape[1])
    if w_gamma.shape != expected or w_beta.shape != expected:
        raise ShapeMismatchError(
            f"affine generators must be ({channels}, {c.shape[1]}), "
            f"got {tuple(w_gamma.shape)} and {tuple(w_beta.shape)}"
        )

    normalized = F.group_norm(features, num_groups=channels, eps=NORM_EPS)
    gamma = 1.0 + c @ w_gamma.t()
    beta = c @ w_beta.t()
    return gamma[:, :, None, None] * normalized + beta[:, :, None, None]


class ConditionalNorm(nn.Module):
    """Conditional normalization layer with zero-initialized generators."""

    def __init__(self, channels: int, cond_dim: int):
        super().__init__()
        self.w_gamma = nn.Parameter(torch.zeros(channels, cond_dim))
        self.w_beta = nn.Parameter(torch.zeros(channels, cond_dim))

    def forward(self, features: torch.Tensor, c: torch.Tensor) -> torch.Tensor:
        return conditional_norm(features, c, self.w_gamma, self.w_beta)


class CondResBlock(nn.Module):
    """Residual block: cond-norm, SiLU, conv, + time, SiLU, conv."""

    def __init__(self, in_ch: int, out_ch: int, time_dim: int, cond_dim: int):
        super().__init__()
        self.norm = ConditionalNorm(in_ch, cond_dim)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.time_proj = nn.Linear(time_dim, out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.shortcut = (
            nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()
        )

    def forward(
        self, x: torch.Tensor, t_emb: torch.Tensor, c: torch.Tensor
    ) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm(x, c)))
        h = h + self.time_proj(t_emb)[:, :, None, None]
        h = self.conv2(F.silu(h))
        return h + self.shortcut(x)


class Downsample(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 3, stride=2, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.conv(x)


class Upsample(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.conv(F.interpolate(x, scale_factor=2, mode="nearest"))


class RCDMDenoiser(nn.Module):
    """U-shaped noise predictor conditioned on a representation ``h``.

    ``forward(x_t, t, h)`` projects ``h`` to the conditioning vector and runs
    :meth:`denoise`. Provenance (encoder fingerprint, source tag, schedule)
    is kept in :attr:`metadata` and travels with checkpoints.
    """

    def __init__(self, config: DenoiserConfig):
        super().__init__()
        self.config = config
        self.metadata: Dict[str, Any] = {}
        self.training_log: List[Dict[str, float]] = []
        widths = config.widths

        self.proj = nn.Linear(config.rep_dim, config.cond_dim)
        self.time_embed = nn.Sequential(
            nn.Linear(config.time_dim, config.time_dim),
            nn.SiLU(),
            nn.Linear(config.time_dim, config.time_dim),
        )
        self.in_conv = nn.Conv2d(config.image_channels, widths[0], 3, padding=1)

        ch = widths[0]
        skip_channels: List[int] = []
        self.down = nn.ModuleList()
        for level, width in enumerate(widths):
            for _ in range(config.blocks_per_level):
                self.down.append(
                    CondResBlock(ch, width, config.time_dim, config.cond_dim)
                )
                ch = width
                skip_channels.append(ch)
            if level < len(widths) - 1:
                self.down.append(Downsample(ch))

        self.mid = CondResBlock(ch, ch, config.time_dim, config.cond_dim)

        self.up = nn.ModuleList()
        for level, width in reversed(list(enumerate(widths))):
            for _ in range(config.blocks_per_level):
                in_ch = ch + skip_channels.pop()
                self.up.append(
                    CondResBlock(in_ch, width, config.time_dim, config.cond_dim)
                )
                ch = width
            if level > 0:
                self.up.append(Upsample(ch))

        self.out_norm = ConditionalNorm(ch, config.cond_dim)
        self.out_conv = nn.Conv2d(ch, config.image_channels, 3, padding=1)

    @property
    def rep_dim(self) -> int:
        return self.config.rep_dim

    def project_representation(self, h: torch.Tensor) -> torch.Tensor:
        """Map representations (N, K) to conditioning vectors (N, C)."""
        if h.ndim != 2 or h.shape[1] != self.config.rep_dim:
            raise ShapeMismatchError(
                f"expected representations of length {self.config.rep_dim}, "
                f"got {tuple(h.shape)}"
            )
        return self.proj(h.to(self.proj.weight.dtype))

    def denoise(
        self, x_t: torch.Tensor, t: torch.Tensor, c: torch.Tensor
    ) -> torch.Tensor:
        """Predict the noise in ``x_t`` given timesteps and conditioning vectors."""
        cfg = self.config
        expected = (cfg.image_channels, cfg.image_size, cfg.image_size)
        if x_t.ndim != 4 or tuple(x_t.shape[1:]) != expected:
            raise ShapeMismatchError(
                f"expected images (N, {expected}), got {tuple(x_t.shape)}"
            )
        if c.ndim != 2 or c.shape != (x_t.shape[0], cfg.cond_dim):
            raise ShapeMismatchError(
                f"expected conditioning ({x_t.shape[0]}, {cfg.cond_dim}), "
                f"got {tuple(c.shape)}"
            )
        t = torch.as_tensor(t, device=x_t.device).reshape(-1).expand(x_t.shape[0])

        t_emb = self.time_embed(timestep_embedding(t, cfg.time_dim).to(x_t.dtype))
        skips: List[torch.Tensor] = []

        h = self.in_conv(x_t)
        for layer in self.down:
            if isinstance(layer, CondResBlock):
                h = layer(h, t_emb, c)
                skips.append(h)
            else:
                h = layer(h)

        h = self.mid(h, t_emb, c)

        for layer in self.up:
            if isinstance(layer, CondResBlock):
                h = layer(torch.cat([h, skips.pop()], dim=1), t_emb, c)
            else:
                h = layer(h)

        return self.out_conv(F.silu(self.out_norm(h, c)))

    def forward(
        self, x_t: torch.Tensor, t: torch.Tensor, h: torch.Tensor
    ) -> torch.Tensor:
        return self.denoise(x_t, t, self.project_representation(h))

    def architecture(self) -> Dict[str, Any]:
        return self.config.to_dict()


def build_denoiser(config: DenoiserConfig, seed: Optional[int] = None) -> RCDMDenoiser:
    """Construct a denoiser, optionally with seeded initialization."""
    if seed is None:
        return RCDMDenoiser(config)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return RCDMDenoiser(config)
