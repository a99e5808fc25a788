"""
RCDM training loop.

The encoder is frozen; its representations of the training images are
computed once and reused as the conditioning bank for every step.
"""

import logging
from typing import Any, Dict, Optional

import torch
from tqdm import tqdm

from rcdmkit.diffusion.denoiser import DenoiserConfig, RCDMDenoiser, build_denoiser
from rcdmkit.diffusion.schedule import (
    NoiseSchedule,
    make_schedule,
    noise_prediction_loss,
)
from rcdmkit.encoders.models import EncoderModel, Representation, Source, encode_source
from rcdmkit.exceptions import (
    ConfigurationError,
    FingerprintMismatchError,
    NumericalError,
)
from rcdmkit.runtime.data import ImageDataset

logger = logging.getLogger(__name__)


def schedule_from_config(section: Dict[str, Any]) -> NoiseSchedule:
    return make_schedule(
        int(section.get("steps", 200)),
        float(section.get("beta_min", 1e-4)),
        float(section.get("beta_max", 0.02)),
    )


def train_rcdm(
    encoder: EncoderModel,
    dataset: ImageDataset,
    config: Dict[str, Any],
    generator: torch.Generator,
    schedule: NoiseSchedule,
    denoiser_config: Optional[DenoiserConfig] = None,
    source: Source = Source.BACKBONE,
    bank: Optional[Representation] = None,
    progress: bool = False,
) -> RCDMDenoiser:
    """Train a denoiser conditioned on a frozen encoder's representations.

    Args:
        encoder: Frozen encoder providing ``h``
        dataset: Training images
        config: The ``rcdm`` config section
        generator: Source of all randomness
        schedule: Noise schedule
        denoiser_config: Architecture; defaults to the desk architecture sized to
            the encoder
        source: Which encoder output conditions the denoiser
        bank: Precomputed representations of ``dataset`` (e.g. from the cache)
        progress: Show a progress bar

    Returns:
        RCDMDenoiser: Trained denoiser carrying encoder fingerprint, source and schedule
        in ``metadata``
    """
    if len(dataset) == 0:
        raise ConfigurationError("cannot train on an empty dataset")
    source = encoder.check_source(source)
    rep_dim = encoder.output_dim(source)
    denoiser_config = denoiser_config or DenoiserConfig(
        rep_dim=rep_dim,
        image_channels=dataset.images.shape[1],
        image_size=dataset.images.shape[-1],
    )
    if denoiser_config.rep_dim != rep_dim:
        raise FingerprintMismatchError(
            f"encoder {source.value} output has K={rep_dim}, "
            f"denoiser expects K={denoiser_config.rep_dim}"
        )

    fingerprint = encoder.fingerprint()
    if bank is None:
        bank = encode_source(dataset.images, encoder, source)
    elif bank.fingerprint != fingerprint or len(bank) != len(dataset):
        raise FingerprintMismatchError(
            "conditioning bank was not produced by this encoder on this dataset"
        )
    h_all = bank.values.detach()

    steps = int(config.get("steps", 20000))
    batch_size = min(int(config.get("batch_size", 64)), len(dataset))
    grad_clip = config.get("grad_clip")
    log_every = max(1, int(config.get("log_every", 200)))

    seed = int(torch.randint(0, 2**31 - 1, (), generator=generator))
    net = build_denoiser(denoiser_config, seed)
    optimizer = torch.optim.Adam(net.parameters(), lr=float(config.get("lr", 2e-4)))
    net.train()
    for step in tqdm(range(steps), desc="rcdm", disable=not progress):
        index = torch.randperm(len(dataset), generator=generator)[:batch_size]
        loss = noise_prediction_loss(
            net, dataset.images[index], h_all[index], schedule, generator
        )
        if not torch.isfinite(loss):
            raise NumericalError(f"training diverged: non-finite loss at step {step}")

        optimizer.zero_grad()
        loss.backward()
        if grad_clip:
            torch.nn.utils.clip_grad_norm_(net.parameters(), float(grad_clip))
        optimizer.step()

        if step % log_every == 0 or step == steps - 1:
            net.training_log.append({"step": step, "loss": float(loss)})
            logger.info(f"rcdm step {step}/{steps} loss {float(loss):.4f}")

    net.eval()
    net.metadata.update(
        {
            "encoder_fingerprint": fingerprint,
            "source": source.value,
            "schedule": schedule.to_dict(),
            "dataset": dataset.name,
        }
    )
    return net
