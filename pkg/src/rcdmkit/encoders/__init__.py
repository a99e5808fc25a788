"""
Toy image encoders with a backbone and a projector head.
"""

from rcdmkit.encoders.augment import AugmentationPolicy, augment_batch
from rcdmkit.encoders.models import (
    EncoderConfig,
    EncoderModel,
    Provenance,
    Representation,
    Source,
    build_encoder,
    encode,
    encode_projector,
    encode_source,
)
from rcdmkit.encoders.training import train_ssl, train_supervised

__all__ = [
    "AugmentationPolicy",
    "augment_batch",
    "EncoderConfig",
    "EncoderModel",
    "Provenance",
    "Representation",
    "Source",
    "build_encoder",
    "encode",
    "encode_projector",
    "encode_source",
    "train_ssl",
    "train_supervised",
]
