"""
Configuration module.

Built-in defaults are deep-merged with an optional YAML file, then with
dotted ``section.key=value`` overrides, then with dedicated CLI flags.
"""

import copy
import hashlib
import json
import logging
from pathlib import Path
from typing import Any, Dict, Iterable, Mapping, Optional, Union

import yaml

from rcdmkit.exceptions import ArtifactError, ConfigurationError

logger = logging.getLogger(__name__)

# Default configuration (desk scale)
DEFAULT_CONFIG: Dict[str, Dict[str, Any]] = {
    "schedule": {
        "steps": 200,
        "beta_min": 1e-4,
        "beta_max": 0.02,
    },
    "denoiser": {
        "rep_dim": None,
        "cond_dim": 64,
        "widths": [32, 64, 128],
        "blocks_per_level": 2,
        "time_dim": 64,
    },
    "encoder": {
        "widths": [32, 64, 96, 128],
        "projector_hidden": 128,
        "projector_dim": 32,
        "normalize_projector": False,
    },
    "augment": {
        "crop_scale_min": 0.5,
        "flip_p": 0.5,
        "grayscale_p": 0.2,
        "jitter_p": 0.8,
        "jitter_strength": 0.4,
    },
    "ssl": {
        "steps": 2000,
        "batch_size": 128,
        "lr": 1e-3,
        "temperature": 0.1,
        "heldout_pairs": 256,
        "heldout_fraction": 0.1,
        "min_improvement": 0.0,
        "log_every": 100,
    },
    "supervised": {
        "steps": 1000,
        "batch_size": 128,
        "lr": 1e-3,
        "log_every": 100,
    },
    "rcdm": {
        "steps": 20000,
        "batch_size": 64,
        "lr": 2e-4,
        "grad_clip": 1.0,
        "source": "backbone",
        "log_every": 200,
    },
    "match": {
        "distance": "l2",
        "optimizer": "adam",
        "steps": 10000,
        "step_size": 0.01,
        "tolerance": 0.0,
        "lr_schedule": "none",
    },
    "kde": {
        "sigma": 0.01,
    },
    "repops": {
        "k": 10,
        "top_m": None,
        "zero_tol": 0.0,
        "metric": "squared_l2",
    },
    "probe": {
        "steps": 500,
        "lr": 0.05,
        "weight_decay": 0.0,
    },
    "attack": {
        "epsilons": [0.0, 0.02, 0.05, 0.1, 0.25, 0.5],
        "targeted": False,
        "target": None,
        "samples_per_epsilon": 4,
    },
    "evaluate": {
        "metric": "squared_l2",
        "nearest_k": 10,
        "random_count": 100,
        "num_augmentations": 16,
        "transforms": [
            "identity",
            "vertical_shift",
            "zoom_in",
            "zoom_out",
            "grayscale",
            "color_jitter",
            "horizontal_flip",
        ],
    },
    "sample": {
        "count": 4,
        "heldout": 8,
        "interpolation_steps": 5,
    },
    "data": {
        "format": "shapes",
        "path": None,
        "count": 1000,
        "seed": 7,
        "image_size": 32,
        "val_fraction": 0.2,
        "workers": 0,
    },
    "runtime": {
        "seed": 0,
        "progress": True,
        "cache_dir": None,
        "threads": None,
    },
}


def merge_config(
    default: Dict[str, Any], user: Mapping[str, Any], path: str = ""
) -> Dict:
    """Deep merge ``user`` into a copy of ``default``.

    Keys unknown to ``default`` are rejected so that typos never go silent.

    Args:
        default: Base configuration
        user: Overrides to apply
        path: Dotted prefix used in error messages

    Returns:
        Dict: Merged configuration
    """
    merged = copy.deepcopy(default)
    for key, value in user.items():
        dotted = f"{path}.{key}" if path else str(key)
        if key not in merged:
            raise ConfigurationError(f"unknown config key: {dotted}")
        if isinstance(merged[key], dict):
            if not isinstance(value, Mapping):
                raise ConfigurationError(f"config section {dotted} must be a mapping")
            merged[key] = merge_config(merged[key], value, dotted)
        else:
            merged[key] = value
    return merged


def parse_override(item: str) -> Dict[str, Any]:
    """Turn ``section.key=value`` into a nested mapping.

    The value is parsed as a YAML scalar so ``0.5``, ``true`` and ``[1, 2]``
    get their natural types.
    """
    if "=" not in item:
        raise ConfigurationError(f"override must look like section.key=value: {item}")
    dotted, raw = item.split("=", 1)
    parts = [p for p in dotted.strip().split(".") if p]
    if len(parts) < 2:
        raise ConfigurationError(f"override key needs a section: {dotted}")
    try:
        value = yaml.safe_load(raw)
    except yaml.YAMLError as e:
        raise ConfigurationError(f"cannot parse override value {raw!r}: {e}") from e

    nested: Dict[str, Any] = {parts[-1]: value}
    for part in reversed(parts[:-1]):
        nested = {part: nested}
    return nested


class Config:
    """Resolved configuration with dotted-key access."""

    def __init__(self, data: Optional[Dict[str, Any]] = None):
        self._data = merge_config(DEFAULT_CONFIG, data or {})

    @classmethod
    def load(
        cls,
        config_file: Optional[Union[str, Path]] = None,
        overrides: Iterable[str] = (),
        flags: Optional[Mapping[str, Any]] = None,
    ) -> "Config":
        """Resolve defaults, file, ``--set`` overrides and CLI flags.

        Args:
            config_file: Optional YAML file
            overrides: ``section.key=value`` strings
            flags: Dotted keys set by dedicated CLI flags; ``None`` values are skipped

        Returns:
            Config: The resolved configuration
        """
        data = copy.deepcopy(DEFAULT_CONFIG)

        if config_file:
            path = Path(config_file)
            if not path.exists():
                raise ArtifactError(f"config file not found: {path}")
            try:
                with open(path, "r", encoding="utf-8") as f:
                    user_config = yaml.safe_load(f) or {}
            except yaml.YAMLError as e:
                raise ConfigurationError(f"invalid YAML in {path}: {e}") from e
            if not isinstance(user_config, Mapping):
                raise ConfigurationError(f"config file {path} must hold a mapping")
            data = merge_config(data, user_config)
            logger.debug(f"Loaded config file {path}")

        for item in overrides:
            data = merge_config(data, parse_override(item))

        for dotted, value in (flags or {}).items():
            if value is None:
                continue
            data = merge_config(data, parse_override(f"{dotted}={json.dumps(value)}"))

        config = cls.__new__(cls)
        config._data = data
        return config

    def get(self, dotted: str, default: Any = None) -> Any:
        """Get a value by ``section.key``."""
        node: Any = self._data
        for part in dotted.split("."):
            if not isinstance(node, Mapping) or part not in node:
                return default
            node = node[part]
        return node

    def section(self, name: str) -> Dict[str, Any]:
        """Get a copy of one section."""
        if name not in self._data:
            raise ConfigurationError(f"unknown config section: {name}")
        return copy.deepcopy(self._data[name])

    def to_dict(self) -> Dict[str, Any]:
        """Convert configuration to a plain dictionary."""
        return copy.deepcopy(self._data)

    def fingerprint(self) -> str:
        """Stable sha256 of the canonical JSON form."""
        blob = json.dumps(self._data, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()

    def save(self, path: Union[str, Path]) -> None:
        """Write the configuration as YAML."""
        with open(path, "w", encoding="utf-8") as f:
            f.write("# rcdmkit configuration snapshot\n\n")
            yaml.safe_dump(
                self._data, f, default_flow_style=False, indent=2, sort_keys=True
            )
