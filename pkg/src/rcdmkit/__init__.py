#!/usr/bin/env python3
"""
🎨 rcdmkit - Representation-Conditioned Diffusion Toolkit

Visualizes what a frozen image encoder keeps and discards by training a
diffusion model that generates images from the encoder's representations.

Features:
- 🧠 Toy encoders: random, supervised and self-supervised (contrastive)
- 🌫️ Conditional denoiser with representation-modulated normalization
- 🎲 Conditional, interpolated and KDE-based unconditional sampling
- 🔁 Gradient-based representation matching and Jacobian nullspace
- ✂️ Representation manipulation (zero, swap, algebra, neighborhood masks)
- 🎯 FGSM attacks on linear probes, visualized through the denoiser
- 📊 Rank/MRR faithfulness, distance references, invariance, FID/IS

Example usage:
    >>> from rcdmkit import Config, main
    >>> main(["train-encoder", "--flavor", "ssl", "--out", "runs/ssl"])
"""

__version__ = "0.3.0"
__author__ = "Tom Sapletta"
__email__ = "info@softreck.dev"
__license__ = "Apache-2.0"
__description__ = "🎨 Representation-conditioned diffusion for inspecting encoders"

from .config import DEFAULT_CONFIG, Config
from .exceptions import (
    ArtifactError,
    ComponentTypeError,
    ConfigurationError,
    FingerprintMismatchError,
    IndexOutOfRangeError,
    IntegrityError,
    NumericalError,
    RcdmError,
    ShapeMismatchError,
    UnknownIdError,
    VersionMismatchError,
)

VERSION_INFO = {
    "major": 0,
    "minor": 3,
    "patch": 0,
    "release": "beta",
}

# Public API
__all__ = [
    "Config",
    "DEFAULT_CONFIG",
    "main",
    # Metadata
    "__version__",
    "__author__",
    "__email__",
    "__license__",
    "__description__",
    "VERSION_INFO",
    # Errors
    "RcdmError",
    "ConfigurationError",
    "ShapeMismatchError",
    "IndexOutOfRangeError",
    "UnknownIdError",
    "ArtifactError",
    "IntegrityError",
    "VersionMismatchError",
    "ComponentTypeError",
    "FingerprintMismatchError",
    "NumericalError",
    "get_version",
    "check_features",
]


def get_version() -> str:
    """Get the current version string."""
    return __version__


def check_features() -> dict:
    """Check which optional capabilities are available."""
    features = {}

    try:
        import torch

        features["cuda"] = torch.cuda.is_available()
    except ImportError:
        features["cuda"] = False

    try:
        import tqdm  # noqa: F401

        features["progress_bars"] = True
    except ImportError:
        features["progress_bars"] = False

    try:
        from PIL import Image  # noqa: F401

        features["image_folders"] = True
    except ImportError:
        features["image_folders"] = False

    return features


def main(args=None) -> int:
    """Run the command line interface."""
    from .cli import main as cli_main

    return cli_main(args)
