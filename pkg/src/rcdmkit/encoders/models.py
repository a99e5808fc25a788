"""
Encoder models.

Toy counterparts of the encoders being analyzed: a convolutional backbone
with global average pooling, followed by a two-layer projector head.
"""

import hashlib
import logging
from dataclasses import asdict, dataclass
from enum import Enum
from typing import Any, Callable, Dict, List, Optional, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from rcdmkit.exceptions import ConfigurationError, NumericalError, ShapeMismatchError

logger = logging.getLogger(__name__)


class Provenance(Enum):
    """How an encoder's parameters were obtained."""

    RANDOM = "random"
    SUPERVISED = "supervised"
    SSL = "ssl"


class Source(Enum):
    """Which encoder output a representation was read from."""

    BACKBONE = "backbone"
    PROJECTOR = "projector"


@dataclass
class EncoderConfig:
    """Architecture descriptor of an encoder."""

    image_channels: int = 3
    image_size: int = 32
    widths: Tuple[int, ...] = (32, 64, 96, 128)
    projector_hidden: int = 128
    projector_dim: int = 32
    normalize_projector: bool = False

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        if not self.widths:
            raise ConfigurationError("encoder needs at least one stage")
        if self.projector_dim < 1 or self.projector_hidden < 1:
            raise ConfigurationError("projector sizes must be positive")

    @property
    def backbone_dim(self) -> int:
        return self.widths[-1]

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["widths"] = list(self.widths)
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "EncoderConfig":
        return cls(**data)


@dataclass
class Representation:
    """A batch of representation vectors with their provenance."""

    values: torch.Tensor
    source: Source
    fingerprint: str

    def __post_init__(self):
        if self.values.ndim != 2:
            raise ShapeMismatchError(
                f"representations must be (count, K), got {tuple(self.values.shape)}"
            )
        if not torch.isfinite(self.values).all():
            raise NumericalError("representation contains non-finite entries")

    @property
    def dim(self) -> int:
        return int(self.values.shape[1])

    def __len__(self) -> int:
        return int(self.values.shape[0])

    def __array__(self, dtype=None):
        array = self.values.detach().cpu().numpy()
        return array.astype(dtype) if dtype is not None else array

    def numpy(self) -> np.ndarray:
        return self.values.detach().cpu().numpy().astype(np.float64)


class Backbone(nn.Module):
    """Conv stages (first at full resolution, then stride 2) + global average pool."""

    def __init__(self, config: EncoderConfig):
        super().__init__()
        layers: List[nn.Module] = []
        in_ch = config.image_channels
        for stage, width in enumerate(config.widths):
            stride = 1 if stage == 0 else 2
            layers += [
                nn.Conv2d(in_ch, width, 3, stride=stride, padding=1, bias=False),
                nn.BatchNorm2d(width),
                nn.ReLU(),
            ]
            in_ch = width
        self.stages = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.stages(x).mean(dim=(2, 3))


class Projector(nn.Module):
    """Two-layer MLP head."""

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(config.backbone_dim, config.projector_hidden),
            nn.ReLU(),
            nn.Linear(config.projector_hidden, config.projector_dim),
        )
        self.normalize = config.normalize_projector

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        z = self.net(features)
        return F.normalize(z, dim=1) if self.normalize else z


class EncoderModel(nn.Module):
    """The mapping ``f`` with backbone and projector outputs."""

    def __init__(
        self,
        config: EncoderConfig,
        provenance: Provenance = Provenance.RANDOM,
        augmentation: Optional[Dict[str, Any]] = None,
    ):
        super().__init__()
        self.config = config
        self.provenance = provenance
        self.augmentation = dict(augmentation or {})
        self.metadata: Dict[str, Any] = {}
        self.training_log: List[Dict[str, float]] = []
        self.backbone = Backbone(config)
        self.projector = Projector(config)

    @property
    def backbone_dim(self) -> int:
        return self.config.backbone_dim

    @property
    def projector_dim(self) -> int:
        return self.config.projector_dim

    def output_dim(self, source: Source) -> int:
        if Source(source) is Source.BACKBONE:
            return self.backbone_dim
        return self.projector_dim

    def available_sources(self) -> List[Source]:
        """Outputs with trained weights; a supervised projector is never trained."""
        if self.provenance is Provenance.SUPERVISED:
            return [Source.BACKBONE]
        return [Source.BACKBONE, Source.PROJECTOR]

    def check_source(self, source: Source) -> Source:
        source = Source(source)
        if source not in self.available_sources():
            raise ConfigurationError(
                f"{self.provenance.value} encoders have no trained "
                f"{source.value} output"
            )
        return source

    def check_input(self, x: torch.Tensor) -> None:
        cfg = self.config
        expected = (cfg.image_channels, cfg.image_size, cfg.image_size)
        if x.ndim != 4 or tuple(x.shape[1:]) != expected:
            raise ShapeMismatchError(
                f"expected images (N, {expected}), got {tuple(x.shape)}"
            )

    def forward(
        self, x: torch.Tensor, source: Source = Source.BACKBONE
    ) -> torch.Tensor:
        """Gradient-enabled forward pass returning the requested output."""
        self.check_input(x)
        features = self.backbone(x)
        if Source(source) is Source.PROJECTOR:
            return self.projector(features)
        return features

    def representation_fn(
        self, source: Source = Source.BACKBONE
    ) -> Callable[[torch.Tensor], torch.Tensor]:
        """A differentiable ``f`` for one source, evaluated in inference mode."""
        source = self.check_source(source)
        self.eval()

        def f(x: torch.Tensor) -> torch.Tensor:
            return self(x, source)

        return f

    def fingerprint(self) -> str:
        """sha256 over every parameter and buffer in state-dict order."""
        digest = hashlib.sha256()
        for name, tensor in self.state_dict().items():
            digest.update(name.encode("utf-8"))
            digest.update(tensor.detach().cpu().contiguous().numpy().tobytes())
        return digest.hexdigest()

    def architecture(self) -> Dict[str, Any]:
        return self.config.to_dict()


def build_encoder(
    config: EncoderConfig,
    provenance: Provenance = Provenance.RANDOM,
    seed: Optional[int] = None,
    augmentation: Optional[Dict[str, Any]] = None,
) -> EncoderModel:
    """Construct an encoder, optionally with seeded initialization."""
    if seed is None:
        return EncoderModel(config, provenance, augmentation)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return EncoderModel(config, provenance, augmentation)


@torch.no_grad()
def _encode(
    x: torch.Tensor, enc: EncoderModel, source: Source, batch_size: int
) -> Representation:
    enc.check_input(x)
    source = enc.check_source(source)
    enc.eval()
    outputs = [
        enc(x[i : i + batch_size], source) for i in range(0, x.shape[0], batch_size)
    ]
    values = torch.cat(outputs) if outputs else x.new_zeros((0, enc.output_dim(source)))
    return Representation(
        values=values, source=Source(source), fingerprint=enc.fingerprint()
    )


def encode(x: torch.Tensor, enc: EncoderModel, batch_size: int = 256) -> Representation:
    """Backbone representations (count, K_b) in inference mode."""
    return _encode(x, enc, Source.BACKBONE, batch_size)


def encode_projector(
    x: torch.Tensor, enc: EncoderModel, batch_size: int = 256
) -> Representation:
    """Projector representations (count, K_p) in inference mode."""
    return _encode(x, enc, Source.PROJECTOR, batch_size)


def encode_source(
    x: torch.Tensor, enc: EncoderModel, source: Source, batch_size: int = 256
) -> Representation:
    return _encode(x, enc, Source(source), batch_size)
