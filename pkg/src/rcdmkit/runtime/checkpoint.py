"""
Checkpoint container.

Layout: the 8-byte magic ``RCDMCKPT``, a little-endian uint32 header length,
a UTF-8 JSON header (sorted keys), then the parameter blobs as little-endian
float32 in header order. Every blob carries its shape and sha256.
"""

import hashlib
import json
import logging
import os
import struct
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Dict, Optional, Union

import numpy as np
import torch
import torch.nn as nn

from rcdmkit.exceptions import (
    ArtifactError,
    ComponentTypeError,
    IntegrityError,
    ShapeMismatchError,
    VersionMismatchError,
)

logger = logging.getLogger(__name__)

MAGIC = b"RCDMCKPT"
SCHEMA_VERSION = 1
BLOB_DTYPE = "<f4"


class ComponentType(Enum):
    ENCODER = "encoder"
    DENOISER = "denoiser"
    PROBE = "probe"


@dataclass
class CheckpointContainer:
    """A component's architecture, parameters and training metadata."""

    component: ComponentType
    architecture: Dict[str, Any]
    blobs: Dict[str, np.ndarray]
    metadata: Dict[str, Any] = field(default_factory=dict)
    schema_version: int = SCHEMA_VERSION

    @classmethod
    def from_module(
        cls,
        component: ComponentType,
        module: nn.Module,
        architecture: Dict[str, Any],
        metadata: Optional[Dict[str, Any]] = None,
    ) -> "CheckpointContainer":
        """Snapshot a module's state dict as float32 blobs."""
        blobs = {
            name: tensor.detach().cpu().to(torch.float32).contiguous().numpy().copy()
            for name, tensor in module.state_dict().items()
        }
        return cls(component, dict(architecture), blobs, dict(metadata or {}))

    def load_into(self, module: nn.Module) -> None:
        """Copy blobs into a module built from :attr:`architecture`."""
        state = module.state_dict()
        missing = set(state) - set(self.blobs)
        unexpected = set(self.blobs) - set(state)
        if missing or unexpected:
            raise ShapeMismatchError(
                f"checkpoint does not match architecture (missing {sorted(missing)}, "
                f"unexpected {sorted(unexpected)})"
            )
        restored = {}
        for name, target in state.items():
            blob = self.blobs[name]
            if tuple(blob.shape) != tuple(target.shape):
                raise ShapeMismatchError(
                    f"blob {name} has shape {blob.shape}, "
                    f"expected {tuple(target.shape)}"
                )
            restored[name] = torch.from_numpy(blob.copy()).to(target.dtype)
        module.load_state_dict(restored)


def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def save_checkpoint(container: CheckpointContainer, path: Union[str, Path]) -> Path:
    """Write a container atomically.

    Args:
        container: Container to persist
        path: Destination file

    Returns:
        Path: The written file
    """
    path = Path(path)
    payloads = []
    entries = []
    offset = 0
    for name, array in container.blobs.items():
        data = np.ascontiguousarray(array, dtype=BLOB_DTYPE).tobytes()
        entries.append(
            {
                "name": name,
                "shape": list(array.shape),
                "offset": offset,
                "nbytes": len(data),
                "sha256": _sha256(data),
            }
        )
        payloads.append(data)
        offset += len(data)

    header = {
        "schema_version": container.schema_version,
        "component": container.component.value,
        "architecture": container.architecture,
        "metadata": container.metadata,
        "dtype": BLOB_DTYPE,
        "blobs": entries,
    }
    header_json = json.dumps(header, sort_keys=True, separators=(",", ":"))
    header_bytes = header_json.encode("utf-8")

    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(header_bytes)))
        f.write(header_bytes)
        for data in payloads:
            f.write(data)
    os.replace(tmp, path)
    logger.info(f"Saved {container.component.value} checkpoint to {path}")
    return path


def load_checkpoint(
    path: Union[str, Path], expected: Optional[ComponentType] = None
) -> CheckpointContainer:
    """Read and verify a container.

    Args:
        path: Checkpoint file
        expected: Component type the caller needs, if any

    Returns:
        CheckpointContainer: Verified container
    """
    path = Path(path)
    if not path.is_file():
        raise ArtifactError(f"missing checkpoint: {path}")
    raw = path.read_bytes()
    if raw[: len(MAGIC)] != MAGIC or len(raw) < len(MAGIC) + 4:
        raise IntegrityError(f"{path} is not an rcdmkit checkpoint")

    (header_len,) = struct.unpack("<I", raw[len(MAGIC) : len(MAGIC) + 4])
    start = len(MAGIC) + 4
    try:
        header = json.loads(raw[start : start + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise IntegrityError(f"corrupted checkpoint header in {path}: {e}") from e

    version = header.get("schema_version")
    if version != SCHEMA_VERSION:
        raise VersionMismatchError(
            f"checkpoint schema version {version}, this build reads {SCHEMA_VERSION}"
        )
    try:
        component = ComponentType(header["component"])
    except (KeyError, ValueError):
        raise IntegrityError(f"unknown component type in {path}") from None
    if expected is not None and component is not expected:
        raise ComponentTypeError(
            f"{path} holds a {component.value}, expected a {expected.value}"
        )

    body = raw[start + header_len :]
    blobs: Dict[str, np.ndarray] = {}
    for entry in header["blobs"]:
        data = body[entry["offset"] : entry["offset"] + entry["nbytes"]]
        if len(data) != entry["nbytes"] or _sha256(data) != entry["sha256"]:
            raise IntegrityError(
                f"checksum mismatch for blob {entry['name']} in {path}"
            )
        array = np.frombuffer(data, dtype=BLOB_DTYPE).reshape(entry["shape"])
        blobs[entry["name"]] = array.copy()

    return CheckpointContainer(
        component=component,
        architecture=header["architecture"],
        blobs=blobs,
        metadata=header.get("metadata", {}),
        schema_version=version,
    )


def file_sha256(path: Union[str, Path]) -> str:
    """sha256 of a file's bytes."""
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def save_encoder(encoder, path: Union[str, Path]) -> Path:
    """Persist an encoder with its provenance, augmentation policy and training log."""
    metadata = {
        "provenance": encoder.provenance.value,
        "augmentation": encoder.augmentation,
        "fingerprint": encoder.fingerprint(),
        "training_log": encoder.training_log,
        **encoder.metadata,
    }
    container = CheckpointContainer.from_module(
        ComponentType.ENCODER, encoder, encoder.architecture(), metadata
    )
    return save_checkpoint(container, path)


def load_encoder(path: Union[str, Path]):
    from rcdmkit.encoders.models import EncoderConfig, EncoderModel, Provenance

    container = load_checkpoint(path, ComponentType.ENCODER)
    meta = dict(container.metadata)
    encoder = EncoderModel(
        EncoderConfig.from_dict(container.architecture),
        Provenance(meta.pop("provenance", "random")),
        meta.pop("augmentation", None),
    )
    container.load_into(encoder)
    encoder.training_log = meta.pop("training_log", [])
    meta.pop("fingerprint", None)
    encoder.metadata = meta
    encoder.eval()
    return encoder


def save_denoiser(net, path: Union[str, Path]) -> Path:
    """Persist a denoiser; fingerprint, source tag and schedule ride in metadata."""
    metadata = {"training_log": net.training_log, **net.metadata}
    container = CheckpointContainer.from_module(
        ComponentType.DENOISER, net, net.architecture(), metadata
    )
    return save_checkpoint(container, path)


def load_denoiser(path: Union[str, Path]):
    from rcdmkit.diffusion.denoiser import DenoiserConfig, RCDMDenoiser

    container = load_checkpoint(path, ComponentType.DENOISER)
    net = RCDMDenoiser(DenoiserConfig.from_dict(container.architecture))
    container.load_into(net)
    meta = dict(container.metadata)
    net.training_log = meta.pop("training_log", [])
    net.metadata = meta
    net.eval()
    return net


def save_probe(probe, path: Union[str, Path]) -> Path:
    metadata = {"training_log": probe.training_log, **probe.metadata}
    container = CheckpointContainer.from_module(
        ComponentType.PROBE, probe, probe.architecture(), metadata
    )
    return save_checkpoint(container, path)


def load_probe(path: Union[str, Path]):
    from rcdmkit.analysis.advprobe import LinearProbe

    container = load_checkpoint(path, ComponentType.PROBE)
    probe = LinearProbe.from_architecture(container.architecture)
    container.load_into(probe)
    meta = dict(container.metadata)
    probe.training_log = meta.pop("training_log", [])
    probe.metadata = meta
    return probe
