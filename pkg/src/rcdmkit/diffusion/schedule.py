"""
Noise schedule and forward process.

Linear beta schedule, closed-form corruption ``q(x_t | x_0)`` and the
epsilon-prediction training objective. Timesteps are 0-based.
"""

import logging
from dataclasses import dataclass
from typing import Any, Callable, Dict, Union

import numpy as np
import torch
import torch.nn.functional as F

from rcdmkit.exceptions import ConfigurationError, ShapeMismatchError

logger = logging.getLogger(__name__)

StepIndex = Union[int, torch.Tensor]


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-timestep diffusion coefficients, stored in float64."""

    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray

    @classmethod
    def from_betas(cls, beta: Any) -> "NoiseSchedule":
        """Build a schedule from explicit betas and check its invariants.

        Args:
            beta: Sequence of per-step variances

        Returns:
            NoiseSchedule: Validated schedule
        """
        beta = np.asarray(beta, dtype=np.float64)
        if beta.ndim != 1 or beta.size < 2:
            raise ConfigurationError(
                f"schedule needs at least 2 steps, got {beta.size}"
            )
        if not np.all((beta > 0.0) & (beta < 1.0)):
            raise ConfigurationError("every beta must lie in (0, 1)")
        if np.any(np.diff(beta) < 0.0):
            raise ConfigurationError("betas must be non-decreasing")

        alpha = 1.0 - beta
        alpha_bar = np.cumprod(alpha)
        for array in (beta, alpha, alpha_bar):
            array.setflags(write=False)
        return cls(beta=beta, alpha=alpha, alpha_bar=alpha_bar)

    @property
    def T(self) -> int:
        return int(self.beta.size)

    def coefficient(self, name: str, t: StepIndex, like: torch.Tensor) -> torch.Tensor:
        """Gather a coefficient for step(s) ``t`` shaped to broadcast over ``like``."""
        table = torch.as_tensor(
            getattr(self, name), dtype=like.dtype, device=like.device
        )
        if isinstance(t, torch.Tensor) and t.ndim > 0:
            values = table[t.to(device=like.device, dtype=torch.long)]
            return values.reshape(-1, *([1] * (like.ndim - 1)))
        return table[int(t)]

    def check_step(self, t: StepIndex) -> None:
        values = t if isinstance(t, torch.Tensor) else torch.tensor([int(t)])
        if values.numel() and (int(values.min()) < 0 or int(values.max()) >= self.T):
            raise ConfigurationError(f"timestep out of range [0, {self.T})")

    def to_dict(self) -> Dict[str, Any]:
        """Serialize the betas; the rest is derived on load."""
        return {"T": self.T, "beta": self.beta.tolist()}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "NoiseSchedule":
        return cls.from_betas(data["beta"])


def make_schedule(T: int, beta_min: float, beta_max: float) -> NoiseSchedule:
    """Create a linear beta schedule.

    Args:
        T: Number of diffusion steps (at least 2)
        beta_min: First beta
        beta_max: Last beta

    Returns:
        NoiseSchedule: Schedule with ``beta`` spaced linearly over ``T`` steps
    """
    if int(T) != T or T < 2:
        raise ConfigurationError(f"T must be an integer >= 2, got {T}")
    if not 0.0 < beta_min <= beta_max < 1.0:
        raise ConfigurationError(
            f"need 0 < beta_min <= beta_max < 1, got {beta_min}, {beta_max}"
        )
    betas = np.linspace(beta_min, beta_max, int(T), dtype=np.float64)
    return NoiseSchedule.from_betas(betas)


def forward_diffuse(
    x0: torch.Tensor, t: StepIndex, eps: torch.Tensor, schedule: NoiseSchedule
) -> torch.Tensor:
    """Corrupt ``x0`` to step ``t`` in closed form.

    ``x_t = sqrt(alpha_bar[t]) * x0 + sqrt(1 - alpha_bar[t]) * eps``. The
    result is not clamped.
    """
    if eps.shape != x0.shape:
        raise ShapeMismatchError(
            f"noise shape {tuple(eps.shape)} != image shape {tuple(x0.shape)}"
        )
    schedule.check_step(t)
    if isinstance(t, torch.Tensor) and t.ndim > 0 and t.shape[0] != x0.shape[0]:
        raise ShapeMismatchError(f"{t.shape[0]} timesteps for {x0.shape[0]} images")

    alpha_bar = schedule.coefficient("alpha_bar", t, x0)
    return torch.sqrt(alpha_bar) * x0 + torch.sqrt(1.0 - alpha_bar) * eps


def noise_prediction_loss(
    denoiser: Callable[[torch.Tensor, torch.Tensor, torch.Tensor], torch.Tensor],
    x0: torch.Tensor,
    h_batch: torch.Tensor,
    schedule: NoiseSchedule,
    generator: torch.Generator,
) -> torch.Tensor:
    """Mean squared error between drawn noise and the denoiser's prediction.

    Timesteps are drawn uniformly from ``[0, T)``, one per image.

    Args:
        denoiser: Callable taking ``(x_t, t, h)``
        x0: Clean images (N, C, H, W)
        h_batch: Conditioning representations (N, K)
        schedule: Noise schedule
        generator: Source of randomness for timesteps and noise

    Returns:
        torch.Tensor: Scalar loss, averaged over all elements
    """
    if h_batch.shape[0] != x0.shape[0]:
        raise ShapeMismatchError(
            f"{h_batch.shape[0]} representations for {x0.shape[0]} images"
        )

    device = x0.device
    t = torch.randint(0, schedule.T, (x0.shape[0],), generator=generator).to(device)
    eps = torch.randn(x0.shape, generator=generator, dtype=x0.dtype).to(device)
    x_t = forward_diffuse(x0, t, eps, schedule)

    prediction = denoiser(x_t, t, h_batch)
    if prediction.shape != eps.shape:
        raise ShapeMismatchError(
            f"denoiser output {tuple(prediction.shape)} != noise {tuple(eps.shape)}"
        )
    return F.mse_loss(prediction, eps)
