"""
Representation cache.

Banks are keyed by (dataset digest, encoder fingerprint, source tag), so a
retrained encoder or a changed dataset never reads a stale bank.
"""

import hashlib
import logging
from pathlib import Path
from typing import Optional, Union

import torch

from rcdmkit.analysis.repops import RepresentationBank
from rcdmkit.encoders.models import EncoderModel, Representation, Source
from rcdmkit.exceptions import ArtifactError
from rcdmkit.runtime.data import ImageDataset

logger = logging.getLogger(__name__)

DEFAULT_CACHE_DIR = Path.home() / ".cache" / "rcdmkit"


def cache_key(dataset_digest: str, fingerprint: str, source: Union[str, Source]) -> str:
    source = Source(getattr(source, "value", source)).value
    key = f"{dataset_digest}:{fingerprint}:{source}"
    return hashlib.sha256(key.encode("utf-8")).hexdigest()


class RepresentationCache:
    """Directory of representation banks addressed by :func:`cache_key`."""

    def __init__(self, cache_dir: Optional[Union[str, Path]] = None):
        self.cache_dir = Path(cache_dir) if cache_dir else DEFAULT_CACHE_DIR
        self.hits = 0
        self.misses = 0

    def _path(self, key: str) -> Path:
        return self.cache_dir / key[:2] / key

    def bank(
        self,
        dataset: ImageDataset,
        encoder: EncoderModel,
        source: Union[str, Source] = Source.BACKBONE,
    ) -> RepresentationBank:
        """Load the bank for this triple, encoding and storing it on a miss."""
        source = Source(getattr(source, "value", source))
        fingerprint = encoder.fingerprint()
        key = cache_key(dataset.digest(), fingerprint, source)
        path = self._path(key)
        try:
            bank = RepresentationBank.load(path)
            self.hits += 1
            logger.debug(f"Representation cache hit {key[:12]}")
            return bank
        except ArtifactError:
            pass

        self.misses += 1
        bank = RepresentationBank.from_encoder(encoder, dataset, source)
        try:
            bank.save(path)
        except OSError as e:
            logger.warning(f"Could not write representation cache {path}: {e}")
        return bank

    def representation(
        self,
        dataset: ImageDataset,
        encoder: EncoderModel,
        source: Union[str, Source] = Source.BACKBONE,
    ) -> Representation:
        """The cached bank as a float32 :class:`Representation` in dataset order."""
        bank = self.bank(dataset, encoder, source)
        return Representation(
            values=torch.from_numpy(bank.reps.copy()).float(),
            source=Source(getattr(source, "value", source)),
            fingerprint=bank.metadata.get("encoder_fingerprint", encoder.fingerprint()),
        )
