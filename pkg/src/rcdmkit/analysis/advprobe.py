"""
Linear probes and adversarial attacks.

A linear classifier is trained on frozen representations; FGSM perturbs
inputs along the sign of the probe loss gradient, and a sweep over attack
strengths shows what the representation (and an RCDM conditioned on it)
sees.
"""

import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

import torch
import torch.nn as nn
import torch.nn.functional as F

from rcdmkit.encoders.models import EncoderModel, Source, encode_source
from rcdmkit.exceptions import (
    ConfigurationError,
    FingerprintMismatchError,
    NumericalError,
    ShapeMismatchError,
)

logger = logging.getLogger(__name__)


class LinearProbe(nn.Module):
    """Affine classifier over representations, bound to one encoder."""

    def __init__(
        self,
        rep_dim: int,
        num_classes: int,
        encoder_fingerprint: str = "",
        source: Source = Source.BACKBONE,
    ):
        super().__init__()
        self.linear = nn.Linear(rep_dim, num_classes)
        self.encoder_fingerprint = encoder_fingerprint
        self.source = Source(source)
        self.metadata: Dict[str, Any] = {}
        self.training_log: List[Dict[str, float]] = []

    @property
    def rep_dim(self) -> int:
        return self.linear.in_features

    @property
    def num_classes(self) -> int:
        return self.linear.out_features

    def forward(self, reps: torch.Tensor) -> torch.Tensor:
        return self.linear(reps.to(self.linear.weight.dtype))

    @torch.no_grad()
    def predict(self, reps: Any) -> torch.Tensor:
        values = getattr(reps, "values", reps)
        return self(torch.as_tensor(values)).argmax(dim=1)

    def check_encoder(self, encoder: Any) -> None:
        """Refuse an encoder other than the one the probe was trained on."""
        fingerprint = getattr(encoder, "fingerprint", None)
        if (
            self.encoder_fingerprint
            and callable(fingerprint)
            and fingerprint() != self.encoder_fingerprint
        ):
            raise FingerprintMismatchError("probe was trained on a different encoder")

    def architecture(self) -> Dict[str, Any]:
        return {
            "rep_dim": self.rep_dim,
            "num_classes": self.num_classes,
            "encoder_fingerprint": self.encoder_fingerprint,
            "source": self.source.value,
        }

    @classmethod
    def from_architecture(cls, data: Dict[str, Any]) -> "LinearProbe":
        return cls(
            data["rep_dim"],
            data["num_classes"],
            data.get("encoder_fingerprint", ""),
            data.get("source", "backbone"),
        )


def _features(encoder: Any, x: torch.Tensor, source: Source) -> torch.Tensor:
    if isinstance(encoder, EncoderModel):
        encoder.eval()
        return encoder(x, source)
    return encoder(x)


def fit_probe(
    reps: torch.Tensor,
    labels: torch.Tensor,
    config: Dict[str, Any],
    generator: torch.Generator,
    encoder_fingerprint: str = "",
    source: Source = Source.BACKBONE,
) -> LinearProbe:
    """Full-batch cross-entropy training of a probe on fixed representations."""
    reps = torch.as_tensor(getattr(reps, "values", reps)).detach().float()
    labels = torch.as_tensor(labels, dtype=torch.long)
    if reps.ndim != 2 or reps.shape[0] != labels.shape[0]:
        raise ShapeMismatchError(
            f"{labels.shape[0]} labels for representations {tuple(reps.shape)}"
        )
    if torch.unique(labels).numel() < 2:
        raise ConfigurationError("probe training needs at least 2 classes")

    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(int(torch.randint(0, 2**31 - 1, (), generator=generator)))
        num_classes = int(labels.max()) + 1
        probe = LinearProbe(reps.shape[1], num_classes, encoder_fingerprint, source)

    steps = int(config.get("steps", 500))
    optimizer = torch.optim.Adam(
        probe.parameters(),
        lr=float(config.get("lr", 0.05)),
        weight_decay=float(config.get("weight_decay", 0.0)),
    )
    for step in range(steps):
        loss = F.cross_entropy(probe(reps), labels)
        if not torch.isfinite(loss):
            raise NumericalError(f"probe training diverged at step {step}")
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        if step % 100 == 0 or step == steps - 1:
            probe.training_log.append({"step": step, "loss": float(loss)})

    accuracy = probe_accuracy(probe, reps, labels)
    probe.metadata["train_accuracy"] = accuracy
    logger.info(f"probe training accuracy {accuracy:.3f} over {reps.shape[0]} items")
    return probe


def train_probe(
    encoder: EncoderModel,
    dataset,
    config: Dict[str, Any],
    generator: torch.Generator,
    source: Source = Source.BACKBONE,
) -> LinearProbe:
    """Train a probe on the frozen encoder's representations of a labeled dataset."""
    if dataset.labels is None:
        raise ConfigurationError("probe training needs a labeled dataset")
    rep = encode_source(dataset.images, encoder, source)
    return fit_probe(
        rep.values, dataset.labels, config, generator, rep.fingerprint, source
    )


def probe_accuracy(probe: LinearProbe, reps: Any, labels: Any) -> float:
    """Fraction of items whose predicted class equals the label."""
    labels = torch.as_tensor(labels, dtype=torch.long)
    if labels.numel() == 0:
        raise ConfigurationError("accuracy of an empty set is undefined")
    return float((probe.predict(reps) == labels).float().mean())


def fgsm(
    x: torch.Tensor,
    label: Any,
    encoder: Any,
    probe: LinearProbe,
    epsilon: float,
    target: Optional[Any] = None,
) -> torch.Tensor:
    """Fast gradient sign attack on ``probe(encoder(x))``.

    Untargeted attacks ascend the NLL of ``label``; with ``target`` set the
    attack descends the NLL of the target class. ``sign(0) = 0`` and the
    result is clamped to [-1, 1].
    """
    if epsilon < 0:
        raise ConfigurationError(f"epsilon must be non-negative, got {epsilon}")
    probe.check_encoder(encoder)
    x_var = x.detach().clone().requires_grad_(True)
    logits = probe(_features(encoder, x_var, probe.source))

    def class_tensor(value: Any) -> torch.Tensor:
        index = torch.as_tensor(value, dtype=torch.long, device=x.device).reshape(-1)
        return index.expand(x.shape[0])

    if target is None:
        loss = F.cross_entropy(logits, class_tensor(label), reduction="sum")
        direction = 1.0
    else:
        loss = F.cross_entropy(logits, class_tensor(target), reduction="sum")
        direction = -1.0
    (grad,) = torch.autograd.grad(loss, x_var)
    if not torch.isfinite(grad).all():
        raise NumericalError("attack gradient is not finite")
    return (x.detach() + direction * epsilon * grad.sign()).clamp(-1.0, 1.0)


def _check_epsilons(epsilons: Sequence[float]) -> List[float]:
    values = [float(e) for e in epsilons]
    if not values:
        raise ConfigurationError("need at least one epsilon")
    if any(e < 0 for e in values) or any(b < a for a, b in zip(values, values[1:])):
        raise ConfigurationError(
            f"epsilons must be non-negative and ascending, got {values}"
        )
    return values


def degradation_report(
    x: torch.Tensor,
    labels: Any,
    encoder: Any,
    probe: LinearProbe,
    epsilons: Sequence[float],
    batch_size: int = 256,
) -> List[Dict[str, float]]:
    """Probe accuracy on attacked inputs for each epsilon."""
    labels = torch.as_tensor(labels, dtype=torch.long)
    rows = []
    for eps in _check_epsilons(epsilons):
        correct = 0
        for i in range(0, x.shape[0], batch_size):
            x_batch, y_batch = x[i : i + batch_size], labels[i : i + batch_size]
            x_adv = fgsm(x_batch, y_batch, encoder, probe, eps)
            with torch.no_grad():
                pred = probe(_features(encoder, x_adv, probe.source)).argmax(dim=1)
            correct += int((pred == y_batch).sum())
        rows.append({"epsilon": eps, "accuracy": correct / max(1, x.shape[0])})
        logger.info(f"attack epsilon {eps}: accuracy {rows[-1]['accuracy']:.3f}")
    return rows


@dataclass
class AttackRecord:
    """One row of an epsilon sweep."""

    epsilon: float
    prediction: int
    clean_prediction: int
    rep_distance: float
    neighbor_rank: Optional[int] = None
    sample_predictions: List[int] = field(default_factory=list)
    grid: Optional[str] = None

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def attack_sweep(
    x: torch.Tensor,
    label: int,
    encoder: Any,
    probe: LinearProbe,
    epsilons: Sequence[float],
    bank=None,
    conditioning_id: Optional[str] = None,
    denoiser=None,
    schedule=None,
    generator: Optional[torch.Generator] = None,
    samples_per_epsilon: int = 4,
    grid_dir: Optional[Union[str, Path]] = None,
    target: Optional[int] = None,
) -> List[AttackRecord]:
    """Attack one image at increasing strength and follow it through the pipeline.

    Per epsilon: the probe's prediction on the attacked image, the
    representation distance ``||f(x_adv) - f(x)||``, the rank of the clean
    item among bank neighbors of ``f(x_adv)`` (when ``bank`` and
    ``conditioning_id`` are given), and the probe's predictions on RCDM
    samples conditioned on ``f(x_adv)`` (when a denoiser is given).

    Args:
        x: One image (1, C, H, W)
        label: True class
        encoder: Frozen encoder
        probe: Probe trained on ``encoder``
        epsilons: Non-negative ascending attack strengths
        bank: Representation bank holding the clean item
        conditioning_id: Bank id of the clean item
        denoiser: RCDM conditioned on the probe's source
        schedule: Noise schedule of ``denoiser``
        generator: Sampling randomness
        samples_per_epsilon: Samples drawn per epsilon
        grid_dir: Where to write one grid per epsilon
        target: Target class for a targeted attack

    Returns:
        List[AttackRecord]: One record per epsilon
    """
    from rcdmkit.analysis.faitheval import rank_of_conditioning
    from rcdmkit.diffusion.sampling import sample_conditional
    from rcdmkit.runtime.grids import emit_grid

    if x.ndim != 4 or x.shape[0] != 1:
        raise ShapeMismatchError(
            f"attack sweep takes a single image, got {tuple(x.shape)}"
        )
    epsilons = _check_epsilons(epsilons)
    if denoiser is not None and (schedule is None or generator is None):
        raise ConfigurationError("sampling needs a schedule and a generator")

    with torch.no_grad():
        h_clean = _features(encoder, x, probe.source)
        clean_prediction = int(probe(h_clean).argmax(dim=1))

    records = []
    for step, eps in enumerate(epsilons):
        x_adv = fgsm(x, label, encoder, probe, eps, target=target)
        with torch.no_grad():
            h_adv = _features(encoder, x_adv, probe.source)
            record = AttackRecord(
                epsilon=eps,
                prediction=int(probe(h_adv).argmax(dim=1)),
                clean_prediction=clean_prediction,
                rep_distance=float((h_adv - h_clean).norm()),
            )
        if bank is not None and conditioning_id is not None:
            record.neighbor_rank = rank_of_conditioning(
                h_adv[0].numpy(), conditioning_id, bank
            )

        images = [x_adv]
        if denoiser is not None:
            samples = sample_conditional(
                denoiser, h_adv, schedule, generator, samples_per_epsilon
            )
            with torch.no_grad():
                logits = probe(_features(encoder, samples, probe.source))
                record.sample_predictions = logits.argmax(dim=1).tolist()
            images.append(samples)
        if grid_dir is not None:
            batch = torch.cat(images)
            path = Path(grid_dir) / f"attack_{step:02d}_eps_{eps:g}.png"
            emit_grid(batch, (1, batch.shape[0]), path)
            record.grid = str(path)
        records.append(record)
    return records
