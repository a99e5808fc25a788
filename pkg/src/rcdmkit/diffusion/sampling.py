"""
Generation.

Reverse diffusion conditioned on representations, linear interpolation of
conditionings, and kernel density estimation over a representation bank
for unconditional sampling.
"""

import logging
import math
from dataclasses import dataclass
from typing import Any, List, Sequence

import numpy as np
import torch
from scipy.special import logsumexp

from rcdmkit.diffusion.denoiser import RCDMDenoiser
from rcdmkit.diffusion.schedule import NoiseSchedule
from rcdmkit.exceptions import ConfigurationError, NumericalError, ShapeMismatchError

logger = logging.getLogger(__name__)


def _as_vector_batch(h: Any) -> torch.Tensor:
    values = getattr(h, "values", h)
    if not isinstance(values, torch.Tensor):
        values = np.asarray(values)
    tensor = torch.as_tensor(values)
    return tensor.reshape(1, -1) if tensor.ndim == 1 else tensor


@torch.no_grad()
def sample_conditional(
    net: RCDMDenoiser,
    h: Any,
    schedule: NoiseSchedule,
    generator: torch.Generator,
    count: int = 1,
) -> torch.Tensor:
    """Run the reverse chain from standard-normal noise conditioned on ``h``.

    ``x_{t-1} = (x_t - beta_t / sqrt(1 - alpha_bar_t) * eps) / sqrt(alpha_t)
    + sqrt(beta_t) z`` with ``z = 0`` at the last step. Only the final
    sample is clamped to [-1, 1].

    Args:
        net: Trained denoiser
        h: One representation (K,) repeated ``count`` times, or a batch (count, K)
        schedule: Noise schedule the denoiser was trained with
        generator: Source of the initial state and step noise
        count: Number of samples

    Returns:
        torch.Tensor: Samples (count, C, H, W)
    """
    if count < 1:
        raise ConfigurationError(f"count must be >= 1, got {count}")
    h = _as_vector_batch(h)
    if h.shape[1] != net.rep_dim:
        raise ShapeMismatchError(
            f"representation length {h.shape[1]} != denoiser K {net.rep_dim}"
        )
    if h.shape[0] == 1:
        h = h.expand(count, -1)
    elif h.shape[0] != count:
        raise ShapeMismatchError(f"{h.shape[0]} representations for {count} samples")

    net.eval()
    device = next(net.parameters()).device
    dtype = next(net.parameters()).dtype
    cfg = net.config
    c = net.project_representation(h.to(device=device, dtype=dtype))

    shape = (count, cfg.image_channels, cfg.image_size, cfg.image_size)
    x = torch.randn(shape, generator=generator, dtype=dtype).to(device)
    for t in reversed(range(schedule.T)):
        beta = float(schedule.beta[t])
        alpha = float(schedule.alpha[t])
        alpha_bar = float(schedule.alpha_bar[t])
        steps = torch.full((count,), t, dtype=torch.long, device=device)

        eps = net.denoise(x, steps, c)
        x = (x - beta / math.sqrt(1.0 - alpha_bar) * eps) / math.sqrt(alpha)
        if t > 0:
            z = torch.randn(shape, generator=generator, dtype=dtype).to(device)
            x = x + math.sqrt(beta) * z
        if not torch.isfinite(x).all():
            raise NumericalError(
                f"reverse diffusion produced non-finite values at step {t}"
            )

    return x.clamp(-1.0, 1.0)


def interpolate(h1: Any, h2: Any, lam: float) -> np.ndarray:
    """Linear interpolation ``(1 - lam) h1 + lam h2``."""
    a = np.asarray(getattr(h1, "values", h1), dtype=np.float64)
    b = np.asarray(getattr(h2, "values", h2), dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatchError(f"cannot interpolate shapes {a.shape} and {b.shape}")
    if not 0.0 <= lam <= 1.0:
        raise ConfigurationError(f"lam must be in [0, 1], got {lam}")
    return (1.0 - lam) * a + lam * b


def sample_interpolation_path(
    net: RCDMDenoiser,
    h1: Any,
    h2: Any,
    lambdas: Sequence[float],
    schedule: NoiseSchedule,
    generator: torch.Generator,
    count: int = 1,
) -> torch.Tensor:
    """Samples for each interpolation weight, ordered weight-major.

    Returns:
        torch.Tensor: (len(lambdas) * count, C, H, W)
    """
    batches = [
        sample_conditional(
            net, interpolate(h1, h2, lam).astype(np.float32), schedule, generator, count
        )
        for lam in lambdas
    ]
    return torch.cat(batches)


@dataclass
class KdeModel:
    """Isotropic Gaussian KDE over stored representations; ``sigma`` is a std."""

    bank: np.ndarray
    sigma: float

    @property
    def size(self) -> int:
        return int(self.bank.shape[0])

    @property
    def dim(self) -> int:
        return int(self.bank.shape[1])


def kde_fit(bank: Any, sigma: float = 0.01) -> KdeModel:
    """Validate and store a representation bank and bandwidth."""
    values = getattr(bank, "reps", getattr(bank, "values", bank))
    array = np.asarray(values, dtype=np.float64)
    if array.ndim == 1:
        array = array.reshape(1, -1)
    if array.ndim != 2 or array.shape[0] == 0:
        raise ConfigurationError("KDE bank must be a non-empty (N, K) array")
    if not sigma > 0.0:
        raise ConfigurationError(f"KDE sigma must be positive, got {sigma}")
    return KdeModel(bank=array.copy(), sigma=float(sigma))


def kde_log_density(model: KdeModel, h: Any) -> np.ndarray:
    """Log of ``(1/N) sum_n N(h; bank_n, sigma^2 I)`` for one or more points."""
    points = np.asarray(h, dtype=np.float64)
    points = points.reshape(1, -1) if points.ndim == 1 else points
    if points.shape[1] != model.dim:
        raise ShapeMismatchError(
            f"point length {points.shape[1]} != bank K {model.dim}"
        )
    sq = ((points[:, None, :] - model.bank[None, :, :]) ** 2).sum(axis=2)
    log_norm = -0.5 * model.dim * math.log(2.0 * math.pi * model.sigma**2)
    mixture = logsumexp(-sq / (2.0 * model.sigma**2), axis=1)
    return mixture - math.log(model.size) + log_norm


def kde_density(model: KdeModel, h: Any) -> np.ndarray:
    return np.exp(kde_log_density(model, h))


def kde_sample(model: KdeModel, rng: np.random.Generator, count: int) -> np.ndarray:
    """Draw ``bank[i] + sigma z`` with ``i`` uniform and ``z`` standard normal."""
    if count < 1:
        raise ConfigurationError(f"count must be >= 1, got {count}")
    index = rng.integers(0, model.size, size=count)
    return model.bank[index] + model.sigma * rng.standard_normal((count, model.dim))


def sample_unconditional(
    net: RCDMDenoiser,
    kde: KdeModel,
    schedule: NoiseSchedule,
    rng: np.random.Generator,
    generator: torch.Generator,
    count: int,
) -> torch.Tensor:
    """Sample conditionings from the KDE, then images from the denoiser."""
    h = kde_sample(kde, rng, count).astype(np.float32)
    return sample_conditional(net, h, schedule, generator, count)


def sample_grid_rows(
    net: RCDMDenoiser,
    conditionings: Sequence[Any],
    schedule: NoiseSchedule,
    generator: torch.Generator,
    per_row: int,
) -> List[torch.Tensor]:
    """One row of ``per_row`` samples (different noise) per conditioning."""
    return [
        sample_conditional(net, h, schedule, generator, per_row) for h in conditionings
    ]
