"""
Representation manipulation.

Nearest-neighbor search over a representation bank, discovery of the
dimensions a neighborhood has in common, zeroing/swapping of dimensions and
representation algebra. Vectors are float64 numpy arrays.
"""

import hashlib
import json
import logging
import os
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch

from rcdmkit.exceptions import (
    ArtifactError,
    ConfigurationError,
    IndexOutOfRangeError,
    IntegrityError,
    ShapeMismatchError,
    UnknownIdError,
)

logger = logging.getLogger(__name__)

BANK_DTYPE = "<f8"
BANK_SCHEMA_VERSION = 1


class Metric(Enum):
    SQUARED_L2 = "squared_l2"
    COSINE = "cosine"


def as_vector(h: Any) -> np.ndarray:
    """Flatten a single representation to a float64 vector."""
    values = getattr(h, "values", h)
    if isinstance(values, torch.Tensor):
        values = values.detach().cpu().numpy()
    return np.asarray(values, dtype=np.float64).reshape(-1)


def _metric(metric: Any) -> Metric:
    try:
        return Metric(getattr(metric, "value", metric))
    except ValueError:
        raise ConfigurationError(f"unsupported metric {metric!r}") from None


def distances_to(
    query: np.ndarray, reps: np.ndarray, metric: Any = Metric.SQUARED_L2
) -> np.ndarray:
    """Distance from one query to every row; cosine distance is ``1 - cos``."""
    metric = _metric(metric)
    if query.shape[-1] != reps.shape[1]:
        raise ShapeMismatchError(
            f"query length {query.shape[-1]} != bank K {reps.shape[1]}"
        )
    if metric is Metric.SQUARED_L2:
        return ((reps - query[None, :]) ** 2).sum(axis=1)
    norms = np.linalg.norm(reps, axis=1) * np.linalg.norm(query)
    dots = reps @ query
    with np.errstate(invalid="ignore", divide="ignore"):
        cos = np.where(norms > 0, dots / np.where(norms > 0, norms, 1.0), 0.0)
    return 1.0 - cos


@dataclass(eq=False)
class RepresentationBank:
    """Immutable representations with stable ids and optional labels."""

    reps: np.ndarray
    ids: List[str]
    labels: Optional[np.ndarray] = None
    metric: str = Metric.SQUARED_L2.value
    metadata: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        self.reps = np.array(self.reps, dtype=np.float64)
        if self.reps.ndim != 2:
            raise ShapeMismatchError(f"bank must be (N, K), got {self.reps.shape}")
        if len(self.ids) != self.reps.shape[0]:
            raise ShapeMismatchError(
                f"{len(self.ids)} ids for {self.reps.shape[0]} rows"
            )
        if len(set(self.ids)) != len(self.ids):
            raise ConfigurationError("bank ids must be unique")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape[0] != self.reps.shape[0]:
                raise ShapeMismatchError(
                    f"{self.labels.shape[0]} labels for {self.reps.shape[0]} rows"
                )
        self.metric = _metric(self.metric).value
        self.reps.setflags(write=False)
        self._index = {item_id: i for i, item_id in enumerate(self.ids)}

    def __len__(self) -> int:
        return int(self.reps.shape[0])

    @property
    def dim(self) -> int:
        return int(self.reps.shape[1])

    def index_of(self, item_id: str) -> int:
        try:
            return self._index[item_id]
        except KeyError:
            raise UnknownIdError(f"unknown bank id: {item_id}") from None

    def vector(self, item_id: str) -> np.ndarray:
        return self.reps[self.index_of(item_id)].copy()

    def rows(self, item_ids: Sequence[str]) -> np.ndarray:
        return self.reps[[self.index_of(i) for i in item_ids]]

    @classmethod
    def from_encoder(
        cls,
        encoder,
        dataset,
        source: Any = "backbone",
        metric: Any = Metric.SQUARED_L2,
    ) -> "RepresentationBank":
        """Encode every dataset image with one encoder source."""
        from rcdmkit.encoders.models import encode_source

        rep = encode_source(dataset.images, encoder, source)
        return cls(
            reps=rep.numpy(),
            ids=list(dataset.ids),
            labels=dataset.labels.numpy() if dataset.labels is not None else None,
            metric=_metric(metric).value,
            metadata={
                "encoder_fingerprint": rep.fingerprint,
                "source": rep.source.value,
                "dataset": dataset.name,
            },
        )

    def save(self, path: Union[str, Path]) -> Path:
        """Write ``<path>.bin`` (little-endian float64 rows) and a ``.json`` index."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        data = np.ascontiguousarray(self.reps, dtype=BANK_DTYPE).tobytes()
        index = {
            "schema_version": BANK_SCHEMA_VERSION,
            "ids": self.ids,
            "K": self.dim,
            "N": len(self),
            "metric": self.metric,
            "labels": self.labels.tolist() if self.labels is not None else None,
            "dtype": BANK_DTYPE,
            "sha256": hashlib.sha256(data).hexdigest(),
            "metadata": self.metadata,
        }
        blob, sidecar = path.with_suffix(".bin"), path.with_suffix(".json")
        blob_tmp = blob.with_name(blob.name + ".tmp")
        sidecar_tmp = sidecar.with_name(sidecar.name + ".tmp")
        blob_tmp.write_bytes(data)
        with open(sidecar_tmp, "w", encoding="utf-8") as f:
            json.dump(index, f, sort_keys=True, indent=2)
        os.replace(blob_tmp, blob)
        os.replace(sidecar_tmp, sidecar)
        logger.info(f"Saved bank of {len(self)} representations to {blob}")
        return blob

    @classmethod
    def load(cls, path: Union[str, Path]) -> "RepresentationBank":
        path = Path(path)
        blob, sidecar = path.with_suffix(".bin"), path.with_suffix(".json")
        if not blob.is_file() or not sidecar.is_file():
            raise ArtifactError(f"missing bank files for {path}")
        index = json.loads(sidecar.read_text(encoding="utf-8"))
        data = blob.read_bytes()
        if hashlib.sha256(data).hexdigest() != index["sha256"]:
            raise IntegrityError(f"checksum mismatch for bank {blob}")
        reps = np.frombuffer(data, dtype=BANK_DTYPE).reshape(index["N"], index["K"])
        labels = index.get("labels")
        return cls(
            reps=reps,
            ids=index["ids"],
            labels=np.asarray(labels) if labels is not None else None,
            metric=index["metric"],
            metadata=index.get("metadata", {}),
        )


def knn(h: Any, bank: RepresentationBank, k: int, metric: Any = None) -> List[str]:
    """Ids of the ``k`` nearest bank rows, by ascending distance then id."""
    if not 1 <= k <= len(bank):
        raise IndexOutOfRangeError(f"k must be in [1, {len(bank)}], got {k}")
    dist = distances_to(as_vector(h), bank.reps, metric or bank.metric)
    order = sorted(range(len(bank)), key=lambda i: (dist[i], bank.ids[i]))
    return [bank.ids[i] for i in order[:k]]


def _dim_counts(neighbor_reps: Any, top_m: int, zero_tol: float) -> np.ndarray:
    reps = np.asarray(neighbor_reps, dtype=np.float64)
    if reps.ndim != 2:
        raise ShapeMismatchError(
            f"neighbor representations must be (k, K), got {reps.shape}"
        )
    if not 1 <= top_m <= reps.shape[1]:
        raise IndexOutOfRangeError(
            f"top_m must be in [1, {reps.shape[1]}], got {top_m}"
        )
    if zero_tol < 0:
        raise ConfigurationError(f"zero_tol must be non-negative, got {zero_tol}")
    return (np.abs(reps) > zero_tol).sum(axis=0)


def common_nonzero_dims(
    neighbor_reps: Any, top_m: int, zero_tol: float = 0.0
) -> List[int]:
    """The ``top_m`` dimensions most often non-zero, ties to the lower index."""
    counts = _dim_counts(neighbor_reps, top_m, zero_tol)
    order = np.lexsort((np.arange(counts.size), -counts))
    return [int(i) for i in order[:top_m]]


def least_common_nonzero_dims(
    neighbor_reps: Any, top_m: int, zero_tol: float = 0.0
) -> List[int]:
    """The ``top_m`` dimensions least often non-zero, ties to the lower index."""
    counts = _dim_counts(neighbor_reps, top_m, zero_tol)
    order = np.lexsort((np.arange(counts.size), counts))
    return [int(i) for i in order[:top_m]]


def default_top_m(dim: int) -> int:
    return max(1, int(round(0.1 * dim)))


def _check_dims(dims: Sequence[int], size: int) -> List[int]:
    dims = [int(d) for d in dims]
    for d in dims:
        if not 0 <= d < size:
            raise IndexOutOfRangeError(f"dimension {d} outside [0, {size})")
    return dims


def zero_dims(h: Any, dims: Sequence[int]) -> np.ndarray:
    out = as_vector(h).copy()
    out[_check_dims(dims, out.size)] = 0.0
    return out


def swap_dims(h: Any, donor: Any, dims: Sequence[int]) -> np.ndarray:
    """Copy ``donor`` values into ``h`` at ``dims``."""
    out = as_vector(h).copy()
    source = as_vector(donor)
    if source.size != out.size:
        raise ShapeMismatchError(
            f"donor length {source.size} != representation length {out.size}"
        )
    dims = _check_dims(dims, out.size)
    out[dims] = source[dims]
    return out


def rep_algebra(h_base: Any, h_plus: Any, h_minus: Any) -> np.ndarray:
    """``h_base + h_plus - h_minus``."""
    base, plus, minus = as_vector(h_base), as_vector(h_plus), as_vector(h_minus)
    if not base.size == plus.size == minus.size:
        raise ShapeMismatchError(
            f"representation lengths differ: {base.size}, {plus.size}, {minus.size}"
        )
    return base + plus - minus


def neighborhood_mask(
    h: Any,
    bank: RepresentationBank,
    k: int,
    top_m: Optional[int] = None,
    zero_tol: float = 0.0,
    least: bool = False,
    donor: Any = None,
) -> Tuple[np.ndarray, List[int], List[str]]:
    """Find a neighborhood's shared dimensions and zero them, or swap in ``donor``.

    Returns:
        Tuple: (edited representation, masked dimensions, neighbor ids)
    """
    neighbors = knn(h, bank, k)
    top_m = top_m or default_top_m(bank.dim)
    finder = least_common_nonzero_dims if least else common_nonzero_dims
    dims = finder(bank.rows(neighbors), top_m, zero_tol)
    edited = zero_dims(h, dims) if donor is None else swap_dims(h, donor, dims)
    logger.debug(f"masked dims {dims} from {k} neighbors")
    return edited, dims, neighbors
