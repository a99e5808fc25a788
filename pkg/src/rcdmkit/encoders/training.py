"""
Encoder training.

Contrastive (normalized temperature-scaled cross entropy over two augmented
views) and supervised (cross entropy through a temporary linear head)
training of the toy encoder. All randomness comes from the caller's
generator so a fixed seed reproduces the final parameters.
"""

import logging
import math
from typing import Any, Dict, Optional, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F
from tqdm import tqdm

from rcdmkit.encoders.augment import AugmentationPolicy, augment_batch
from rcdmkit.encoders.models import (
    EncoderConfig,
    EncoderModel,
    Provenance,
    Source,
    build_encoder,
)
from rcdmkit.exceptions import ConfigurationError, NumericalError
from rcdmkit.runtime.data import ImageDataset

logger = logging.getLogger(__name__)


def nt_xent(
    z1: torch.Tensor, z2: torch.Tensor, temperature: float = 0.1
) -> torch.Tensor:
    """Normalized temperature-scaled cross entropy for paired views.

    Row ``i`` of ``z1`` and row ``i`` of ``z2`` are positives; the other
    ``2N - 2`` embeddings are negatives.
    """
    if z1.shape != z2.shape or z1.shape[0] < 2:
        raise ConfigurationError(
            "contrastive loss needs two matching batches of at least 2 views"
        )
    n = z1.shape[0]
    z = F.normalize(torch.cat([z1, z2]), dim=1)
    logits = z @ z.t() / temperature
    self_pairs = torch.eye(2 * n, dtype=torch.bool, device=z.device)
    logits = logits.masked_fill(self_pairs, float("-inf"))
    targets = torch.cat([torch.arange(n, 2 * n), torch.arange(0, n)]).to(z.device)
    return F.cross_entropy(logits, targets)


def _draw_seed(generator: torch.Generator) -> int:
    return int(torch.randint(0, 2**31 - 1, (), generator=generator))


def _check_finite(loss: torch.Tensor, step: int) -> None:
    if not torch.isfinite(loss):
        raise NumericalError(f"training diverged: non-finite loss at step {step}")


def heldout_split(
    count: int, fraction: float, generator: torch.Generator
) -> Tuple[torch.Tensor, torch.Tensor]:
    """Disjoint (train, held-out) index sets; at least 2 rows are held out."""
    if not 0.0 < fraction < 1.0:
        raise ConfigurationError(f"heldout_fraction must be in (0, 1), got {fraction}")
    held = max(2, int(round(fraction * count)))
    if count - held < 2:
        raise ConfigurationError(
            f"contrastive training needs at least 2 training and 2 held-out images "
            f"(dataset has {count})"
        )
    order = torch.randperm(count, generator=generator)
    return order[held:].sort().values, order[:held].sort().values


@torch.no_grad()
def heldout_contrastive_loss(
    encoder: EncoderModel,
    images: torch.Tensor,
    policy: AugmentationPolicy,
    temperature: float,
    pairs: int,
    seed: int,
) -> float:
    """Contrastive loss on a fixed set of augmented pairs, in inference mode."""
    generator = torch.Generator().manual_seed(seed)
    count = min(pairs, images.shape[0])
    index = torch.randperm(images.shape[0], generator=generator)[:count]
    x = images[index]
    v1 = augment_batch(x, policy, generator)
    v2 = augment_batch(x, policy, generator)
    encoder.eval()
    z1, z2 = encoder(v1, Source.PROJECTOR), encoder(v2, Source.PROJECTOR)
    return float(nt_xent(z1, z2, temperature))


def train_ssl(
    dataset: ImageDataset,
    config: Dict[str, Any],
    generator: torch.Generator,
    encoder_config: Optional[EncoderConfig] = None,
    policy: Optional[AugmentationPolicy] = None,
    progress: bool = False,
) -> EncoderModel:
    """Train an encoder with the two-view contrastive objective.

    A seeded share of the dataset (``heldout_fraction``) never enters a
    training batch; the trained and a random-init encoder are both scored on
    it. When ``min_improvement`` is set, the trained loss must undercut the
    random-init loss by that margin.

    Args:
        dataset: Training images (labels unused)
        config: The ``ssl`` config section
        generator: Source of all randomness
        encoder_config: Architecture; defaults to the desk architecture
        policy: Augmentation policy for the two views
        progress: Show a progress bar

    Returns:
        EncoderModel: Trained encoder with ``training_log`` and held-out
        losses in ``metadata``
    """
    if len(dataset) == 0:
        raise ConfigurationError("cannot train on an empty dataset")
    train_index, eval_index = heldout_split(
        len(dataset), float(config.get("heldout_fraction", 0.1)), generator
    )
    batch_size = min(int(config.get("batch_size", 128)), len(train_index))
    if batch_size < 2:
        raise ConfigurationError(
            f"contrastive loss needs at least 2 distinct images per batch "
            f"(batch size {batch_size})"
        )
    steps = int(config.get("steps", 2000))
    temperature = float(config.get("temperature", 0.1))
    log_every = max(1, int(config.get("log_every", 100)))
    policy = policy or AugmentationPolicy()
    encoder_config = encoder_config or EncoderConfig(
        image_channels=dataset.images.shape[1], image_size=dataset.images.shape[-1]
    )

    encoder = build_encoder(
        encoder_config, Provenance.SSL, _draw_seed(generator), policy.to_dict()
    )
    eval_seed = _draw_seed(generator)
    random_init = build_encoder(
        encoder_config, Provenance.RANDOM, _draw_seed(generator)
    )
    pairs = int(config.get("heldout_pairs", 256))
    heldout_images = dataset.images[eval_index]
    baseline = heldout_contrastive_loss(
        random_init, heldout_images, policy, temperature, pairs, eval_seed
    )

    lr = float(config.get("lr", 1e-3))
    optimizer = torch.optim.Adam(encoder.parameters(), lr=lr)
    encoder.train()
    for step in tqdm(range(steps), desc="ssl", disable=not progress):
        pick = torch.randperm(len(train_index), generator=generator)[:batch_size]
        x = dataset.images[train_index[pick]]
        v1 = augment_batch(x, policy, generator)
        v2 = augment_batch(x, policy, generator)
        z1, z2 = encoder(v1, Source.PROJECTOR), encoder(v2, Source.PROJECTOR)
        loss = nt_xent(z1, z2, temperature)
        _check_finite(loss, step)

        optimizer.zero_grad()
        loss.backward()
        optimizer.step()

        if step % log_every == 0 or step == steps - 1:
            encoder.training_log.append({"step": step, "loss": float(loss)})
            logger.info(f"ssl step {step}/{steps} loss {float(loss):.4f}")

    heldout = heldout_contrastive_loss(
        encoder, heldout_images, policy, temperature, pairs, eval_seed
    )
    margin = config.get("min_improvement")
    encoder.metadata.update(
        {
            "objective": "nt_xent",
            "temperature": temperature,
            "heldout_ids": [dataset.ids[i] for i in eval_index.tolist()],
            "heldout_loss": heldout,
            "random_init_heldout_loss": baseline,
            "margin_met": heldout <= baseline - float(margin or 0.0),
        }
    )
    encoder.eval()
    if margin is not None and heldout > baseline - float(margin):
        raise NumericalError(
            f"held-out contrastive loss {heldout:.4f} not below random init "
            f"{baseline:.4f} by {float(margin)}"
        )
    if not encoder.metadata["margin_met"]:
        logger.warning(
            f"held-out contrastive loss {heldout:.4f} not below random init "
            f"{baseline:.4f}"
        )
    return encoder


def train_supervised(
    dataset: ImageDataset,
    config: Dict[str, Any],
    generator: torch.Generator,
    encoder_config: Optional[EncoderConfig] = None,
    progress: bool = False,
) -> EncoderModel:
    """Train an encoder with cross entropy through a temporary linear head.

    The head is discarded; training accuracy is kept in ``metadata``.
    """
    if dataset.labels is None or len(dataset) == 0 or dataset.num_classes == 0:
        raise ConfigurationError(
            "supervised training needs a labeled, non-empty dataset"
        )
    num_classes = int(dataset.labels.max()) + 1
    batch_size = min(int(config.get("batch_size", 128)), len(dataset))
    steps = int(config.get("steps", 1000))
    log_every = max(1, int(config.get("log_every", 100)))
    encoder_config = encoder_config or EncoderConfig(
        image_channels=dataset.images.shape[1], image_size=dataset.images.shape[-1]
    )

    encoder = build_encoder(
        encoder_config, Provenance.SUPERVISED, _draw_seed(generator)
    )
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(_draw_seed(generator))
        head = nn.Linear(encoder.backbone_dim, num_classes)

    params = list(encoder.backbone.parameters()) + list(head.parameters())
    optimizer = torch.optim.Adam(params, lr=float(config.get("lr", 1e-3)))
    encoder.train()
    for step in tqdm(range(steps), desc="supervised", disable=not progress):
        index = torch.randperm(len(dataset), generator=generator)[:batch_size]
        logits = head(encoder(dataset.images[index], Source.BACKBONE))
        loss = F.cross_entropy(logits, dataset.labels[index])
        _check_finite(loss, step)

        optimizer.zero_grad()
        loss.backward()
        optimizer.step()

        if step % log_every == 0 or step == steps - 1:
            encoder.training_log.append({"step": step, "loss": float(loss)})
            logger.info(f"supervised step {step}/{steps} loss {float(loss):.4f}")

    encoder.eval()
    with torch.no_grad():
        logits = torch.cat(
            [
                head(encoder(dataset.images[i : i + 256]))
                for i in range(0, len(dataset), 256)
            ]
        )
    accuracy = float((logits.argmax(dim=1) == dataset.labels).float().mean())
    encoder.metadata.update(
        {
            "objective": "cross_entropy",
            "num_classes": num_classes,
            "train_accuracy": accuracy,
        }
    )
    logger.info(f"supervised training accuracy {accuracy:.3f}")
    if not math.isfinite(accuracy):
        raise NumericalError("training accuracy is not finite")
    return encoder
