"""
Image augmentations.

Random augmentations used for contrastive training and deterministic
transforms used to probe how invariant a representation is. Images are
(N, C, H, W) tensors in [-1, 1].
"""

import logging
from dataclasses import asdict, dataclass
from enum import Enum
from typing import Any, Callable, Dict, Optional

import torch
import torch.nn.functional as F

from rcdmkit.exceptions import ConfigurationError

logger = logging.getLogger(__name__)

LUMA = (0.299, 0.587, 0.114)


@dataclass
class AugmentationPolicy:
    """Random augmentation policy for two-view contrastive training."""

    crop_scale_min: float = 0.5
    flip_p: float = 0.5
    grayscale_p: float = 0.2
    jitter_p: float = 0.8
    jitter_strength: float = 0.4

    def __post_init__(self):
        if not 0.0 < self.crop_scale_min <= 1.0:
            raise ConfigurationError(
                f"crop_scale_min must be in (0, 1], got {self.crop_scale_min}"
            )
        for name in ("flip_p", "grayscale_p", "jitter_p"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigurationError(f"{name} must be a probability")
        if not 0.0 <= self.jitter_strength < 1.0:
            raise ConfigurationError("jitter_strength must be in [0, 1)")

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "AugmentationPolicy":
        return cls(**data)


def _uniform(generator: torch.Generator, low: float, high: float) -> float:
    return low + (high - low) * float(torch.rand((), generator=generator))


def _to_unit(x: torch.Tensor) -> torch.Tensor:
    return (x + 1.0) / 2.0


def _from_unit(y: torch.Tensor) -> torch.Tensor:
    return y.clamp(0.0, 1.0) * 2.0 - 1.0


def to_grayscale(x: torch.Tensor) -> torch.Tensor:
    """Luminance grayscale; images whose channels already agree are returned as-is."""
    if x.shape[1] != 3:
        return x.clone()
    out = x.clone()
    weights = torch.tensor(LUMA, dtype=x.dtype, device=x.device)
    for i in range(x.shape[0]):
        if torch.equal(x[i, 0], x[i, 1]) and torch.equal(x[i, 1], x[i, 2]):
            continue
        gray = (x[i] * weights[:, None, None]).sum(dim=0, keepdim=True)
        out[i] = gray.expand_as(x[i])
    return out


def adjust_colors(
    x: torch.Tensor, brightness: float, contrast: float, saturation: float
) -> torch.Tensor:
    """Brightness, contrast and saturation factors applied in [0, 1] space."""
    y = _to_unit(x) * brightness
    mean = y.mean(dim=(1, 2, 3), keepdim=True)
    y = (y - mean) * contrast + mean
    if y.shape[1] == 3:
        weights = torch.tensor(LUMA, dtype=x.dtype, device=x.device)
        gray = (y * weights[None, :, None, None]).sum(dim=1, keepdim=True)
        y = gray + (y - gray) * saturation
    return _from_unit(y)


def crop_resize(x: torch.Tensor, top: int, left: int, side: int) -> torch.Tensor:
    size = x.shape[-1]
    crop = x[..., top : top + side, left : left + side]
    return F.interpolate(crop, size=(size, size), mode="bilinear", align_corners=False)


def augment_batch(
    x: torch.Tensor, policy: AugmentationPolicy, generator: torch.Generator
) -> torch.Tensor:
    """Apply an independently drawn random augmentation to every image."""
    size = x.shape[-1]
    views = []
    for i in range(x.shape[0]):
        view = x[i : i + 1]

        scale = _uniform(generator, policy.crop_scale_min, 1.0)
        side = max(1, min(size, int(round(size * scale**0.5))))
        top = int(torch.randint(0, size - side + 1, (), generator=generator))
        left = int(torch.randint(0, size - side + 1, (), generator=generator))
        view = crop_resize(view, top, left, side)

        if float(torch.rand((), generator=generator)) < policy.flip_p:
            view = view.flip(-1)

        if float(torch.rand((), generator=generator)) < policy.jitter_p:
            s = policy.jitter_strength
            view = adjust_colors(
                view,
                brightness=_uniform(generator, 1.0 - s, 1.0 + s),
                contrast=_uniform(generator, 1.0 - s, 1.0 + s),
                saturation=_uniform(generator, 1.0 - s, 1.0 + s),
            )

        if float(torch.rand((), generator=generator)) < policy.grayscale_p:
            view = to_grayscale(view)

        views.append(view)
    return torch.cat(views)


def single_augmentations(policy: AugmentationPolicy) -> Dict[str, AugmentationPolicy]:
    """One policy per augmentation kind with every other kind switched off."""
    off = dict(crop_scale_min=1.0, flip_p=0.0, grayscale_p=0.0, jitter_p=0.0)
    return {
        "crop": AugmentationPolicy(**{**off, "crop_scale_min": policy.crop_scale_min}),
        "flip": AugmentationPolicy(**{**off, "flip_p": 1.0}),
        "grayscale": AugmentationPolicy(**{**off, "grayscale_p": 1.0}),
        "jitter": AugmentationPolicy(
            **{**off, "jitter_p": 1.0, "jitter_strength": policy.jitter_strength}
        ),
    }


class ProbeTransform(Enum):
    """Deterministic transforms used for invariance probing."""

    IDENTITY = "identity"
    VERTICAL_SHIFT = "vertical_shift"
    ZOOM_IN = "zoom_in"
    ZOOM_OUT = "zoom_out"
    GRAYSCALE = "grayscale"
    COLOR_JITTER = "color_jitter"
    HORIZONTAL_FLIP = "horizontal_flip"


ZOOM_FACTOR = 0.6


def _vertical_shift(x: torch.Tensor) -> torch.Tensor:
    shift = max(1, x.shape[-2] // 8)
    padded = F.pad(x, (0, 0, shift, 0), mode="replicate")
    return padded[..., : x.shape[-2], :]


def _zoom_in(x: torch.Tensor) -> torch.Tensor:
    size = x.shape[-1]
    side = max(1, int(round(size * ZOOM_FACTOR)))
    offset = (size - side) // 2
    return crop_resize(x, offset, offset, side)


def _zoom_out(x: torch.Tensor) -> torch.Tensor:
    size = x.shape[-1]
    side = max(1, int(round(size * ZOOM_FACTOR)))
    small = F.interpolate(x, size=(side, side), mode="bilinear", align_corners=False)
    before = (size - side) // 2
    after = size - side - before
    return F.pad(small, (before, after, before, after), mode="replicate")


PROBE_TRANSFORMS: Dict[ProbeTransform, Callable[[torch.Tensor], torch.Tensor]] = {
    ProbeTransform.IDENTITY: lambda x: x.clone(),
    ProbeTransform.VERTICAL_SHIFT: _vertical_shift,
    ProbeTransform.ZOOM_IN: _zoom_in,
    ProbeTransform.ZOOM_OUT: _zoom_out,
    ProbeTransform.GRAYSCALE: to_grayscale,
    ProbeTransform.COLOR_JITTER: lambda x: adjust_colors(x, 1.2, 0.8, 1.5),
    ProbeTransform.HORIZONTAL_FLIP: lambda x: x.flip(-1),
}


def apply_probe_transform(x: torch.Tensor, transform: Any) -> torch.Tensor:
    """Apply a named probe transform to a batch."""
    try:
        kind = ProbeTransform(getattr(transform, "value", transform))
    except ValueError:
        supported = ", ".join(t.value for t in ProbeTransform)
        raise ConfigurationError(
            f"unsupported transform {transform!r}; choose from {supported}"
        ) from None
    return PROBE_TRANSFORMS[kind](x)


def policy_from_config(section: Optional[Dict[str, Any]]) -> AugmentationPolicy:
    return AugmentationPolicy.from_dict(section or {})
