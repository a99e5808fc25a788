"""
Quantitative evaluation.

Rank and mean reciprocal rank of the conditioning item among neighbors of a
generated sample, reference distance distributions, invariance of encoder
outputs to fixed transforms, and Frechet / inception-style scores computed
with a pluggable feature extractor.
"""

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
from scipy import linalg
from scipy.special import rel_entr

from rcdmkit.analysis.repops import RepresentationBank, as_vector, distances_to
from rcdmkit.encoders.augment import (
    AugmentationPolicy,
    ProbeTransform,
    apply_probe_transform,
    augment_batch,
    single_augmentations,
)
from rcdmkit.encoders.models import EncoderModel, Source, encode_source
from rcdmkit.exceptions import (
    ArtifactError,
    ConfigurationError,
    NumericalError,
    ShapeMismatchError,
)

logger = logging.getLogger(__name__)

PSD_TOLERANCE = 1e-8
DISTANCE_ROWS = (
    "random-bank",
    "same-class",
    "nearest-train",
    "single-augmentation",
    "composite-augmentation",
    "generated-samples",
)


def rank_of_conditioning(
    h_generated: Any, conditioning_id: str, bank: RepresentationBank, metric: Any = None
) -> int:
    """1 plus the number of bank entries strictly closer than the conditioning entry."""
    dist = distances_to(as_vector(h_generated), bank.reps, metric or bank.metric)
    return 1 + int((dist < dist[bank.index_of(conditioning_id)]).sum())


def mrr(ranks: Sequence[int]) -> float:
    """Mean reciprocal rank."""
    ranks = np.asarray(list(ranks), dtype=np.float64)
    if ranks.size == 0:
        raise ConfigurationError("mean reciprocal rank of no ranks")
    if np.any(ranks < 1):
        raise ConfigurationError("ranks start at 1")
    return float(np.mean(1.0 / ranks))


@dataclass
class FaithfulnessReport:
    ranks: List[int]
    mean_rank: float
    mrr: float
    bank_size: int
    metric: str
    conditioning_ids: List[str] = field(default_factory=list)

    @classmethod
    def from_ranks(
        cls, ranks: Sequence[int], bank_size: int, metric: str, ids: Sequence[str] = ()
    ) -> "FaithfulnessReport":
        ranks = [int(r) for r in ranks]
        return cls(
            ranks=ranks,
            mean_rank=float(np.mean(ranks)) if ranks else float("nan"),
            mrr=mrr(ranks),
            bank_size=bank_size,
            metric=metric,
            conditioning_ids=list(ids),
        )

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def faithfulness_report(
    generated: Any,
    conditioning_ids: Sequence[str],
    bank: RepresentationBank,
    metric: Any = None,
) -> FaithfulnessReport:
    """Rank every generated representation against its own conditioning id."""
    reps = np.asarray(getattr(generated, "values", generated), dtype=np.float64)
    if reps.shape[0] != len(conditioning_ids):
        raise ShapeMismatchError(
            f"{reps.shape[0]} samples for {len(conditioning_ids)} conditioning ids"
        )
    metric = metric or bank.metric
    ranks = [
        rank_of_conditioning(r, i, bank, metric) for r, i in zip(reps, conditioning_ids)
    ]
    return FaithfulnessReport.from_ranks(
        ranks, len(bank), getattr(metric, "value", metric), conditioning_ids
    )


def null_model_ranks(
    generated: Any,
    conditioning_ids: Sequence[str],
    bank: RepresentationBank,
    rng: np.random.Generator,
) -> List[int]:
    """Ranks after shuffling which conditioning id each sample is scored against."""
    shuffled = [conditioning_ids[i] for i in rng.permutation(len(conditioning_ids))]
    reps = np.asarray(getattr(generated, "values", generated), dtype=np.float64)
    return [rank_of_conditioning(r, i, bank) for r, i in zip(reps, shuffled)]


def sample_and_rank(
    net,
    encoder: EncoderModel,
    bank: RepresentationBank,
    conditioning_ids: Sequence[str],
    schedule,
    generator: torch.Generator,
    samples_per_item: int = 1,
    source: Source = Source.BACKBONE,
) -> Tuple[FaithfulnessReport, torch.Tensor]:
    """Sample from each conditioning item's representation and rank the samples.

    Returns:
        Tuple: (report over all samples, samples stacked item-major)
    """
    from rcdmkit.diffusion.sampling import sample_conditional

    batches, ids = [], []
    for item_id in conditioning_ids:
        h = torch.as_tensor(bank.vector(item_id), dtype=torch.float32)
        batches.append(
            sample_conditional(net, h, schedule, generator, samples_per_item)
        )
        ids.extend([item_id] * samples_per_item)
    samples = torch.cat(batches)
    reps = encode_source(samples, encoder, source)
    return faithfulness_report(reps.numpy(), ids, bank), samples


def nearest_training_neighbors(
    sample_reps: Any, train_bank: RepresentationBank, k: int = 5
) -> List[List[Dict[str, Any]]]:
    """For each generated sample, the ``k`` closest training items and distances."""
    from rcdmkit.analysis.repops import knn

    reps = np.asarray(getattr(sample_reps, "values", sample_reps), dtype=np.float64)
    out = []
    for rep in reps:
        ids = knn(rep, train_bank, k)
        dist = distances_to(rep, train_bank.rows(ids), train_bank.metric)
        out.append([{"id": i, "distance": float(d)} for i, d in zip(ids, dist)])
    return out


@dataclass
class DistanceRow:
    mean: float
    std: float
    count: int

    @classmethod
    def from_values(cls, values: Sequence[float]) -> "DistanceRow":
        values = np.asarray(values, dtype=np.float64)
        return cls(
            mean=float(values.mean()), std=float(values.std()), count=int(values.size)
        )


@dataclass
class DistanceReferenceReport:
    rows: Dict[str, DistanceRow]
    metric: str = "squared_l2"
    encoder_fingerprint: str = ""

    def to_dict(self) -> Dict[str, Any]:
        return {
            "metric": self.metric,
            "encoder_fingerprint": self.encoder_fingerprint,
            "rows": {name: asdict(row) for name, row in self.rows.items()},
        }


def _squared(h0: np.ndarray, reps: Any) -> np.ndarray:
    rows = np.asarray(reps, dtype=np.float64).reshape(-1, h0.size)
    return distances_to(h0, rows, "squared_l2")


def distance_reference_suite(
    image: torch.Tensor,
    encoder: EncoderModel,
    val_dataset,
    train_dataset=None,
    samples: Optional[torch.Tensor] = None,
    policy: Optional[AugmentationPolicy] = None,
    generator: Optional[torch.Generator] = None,
    label: Optional[int] = None,
    rows: Sequence[str] = DISTANCE_ROWS,
    source: Source = Source.BACKBONE,
    random_count: int = 100,
    nearest_k: int = 10,
    num_augmentations: int = 16,
) -> DistanceReferenceReport:
    """Squared Euclidean distances from ``f(image)`` to reference populations.

    Args:
        image: Conditioning image (1, C, H, W)
        encoder: Encoder used for every population
        val_dataset: Source of random and same-class images
        train_dataset: Source of nearest training neighbors
        samples: Generated samples conditioned on ``image``
        policy: Augmentation policy for the augmentation rows
        generator: Randomness for random images and augmentations
        label: Class of ``image``, needed for the same-class row
        rows: Which rows to populate
        source: Encoder output to compare
        random_count: Random validation images
        nearest_k: Nearest training neighbors
        num_augmentations: Augmented views per augmentation kind

    Returns:
        DistanceReferenceReport: Exactly the requested rows
    """
    unknown = set(rows) - set(DISTANCE_ROWS)
    if unknown:
        raise ConfigurationError(f"unknown distance rows: {sorted(unknown)}")
    generator = generator or torch.Generator().manual_seed(0)
    policy = policy or AugmentationPolicy()
    h0 = encode_source(image, encoder, source).numpy()[0]

    def encoded(x: torch.Tensor) -> np.ndarray:
        return encode_source(x, encoder, source).numpy()

    report: Dict[str, DistanceRow] = {}
    for name in rows:
        if name == "random-bank":
            count = min(random_count, len(val_dataset))
            index = torch.randperm(len(val_dataset), generator=generator)[:count]
            values = _squared(h0, encoded(val_dataset.images[index]))
        elif name == "same-class":
            if label is None or val_dataset.labels is None:
                raise ConfigurationError("same-class distances need class labels")
            members = (val_dataset.labels == int(label)).nonzero().flatten()
            values = (
                _squared(h0, encoded(val_dataset.images[members]))
                if members.numel()
                else []
            )
        elif name == "nearest-train":
            if train_dataset is None:
                raise ArtifactError("nearest-train distances need a training dataset")
            values = np.sort(_squared(h0, encoded(train_dataset.images)))[:nearest_k]
        elif name == "single-augmentation":
            views = [
                augment_batch(image.expand(num_augmentations, -1, -1, -1), p, generator)
                for p in single_augmentations(policy).values()
            ]
            values = _squared(h0, encoded(torch.cat(views)))
        elif name == "composite-augmentation":
            batch = image.expand(num_augmentations, -1, -1, -1)
            views = augment_batch(batch, policy, generator)
            values = _squared(h0, encoded(views))
        else:
            if samples is None or samples.shape[0] == 0:
                raise ArtifactError("missing generated samples for the distance suite")
            values = _squared(h0, encoded(samples))
        if len(values) == 0:
            raise ConfigurationError(f"distance row {name} has no members")
        report[name] = DistanceRow.from_values(values)

    return DistanceReferenceReport(
        rows=report, encoder_fingerprint=encoder.fingerprint()
    )


@dataclass
class InvarianceRow:
    transform: str
    source: str
    distance: float


def invariance_probe(
    image: torch.Tensor,
    transforms: Sequence[Any],
    encoder: EncoderModel,
    sources: Optional[Sequence[Source]] = None,
) -> List[InvarianceRow]:
    """Squared distance between ``f(x)`` and ``f(t(x))`` per transform and source.

    ``sources`` defaults to every output the encoder has trained weights for.

    Each image is encoded on its own so the identity transform gives exactly 0.
    """
    if image.ndim == 3:
        image = image.unsqueeze(0)
    if image.shape[0] != 1:
        raise ShapeMismatchError(
            f"invariance probe takes a single image, got {tuple(image.shape)}"
        )
    transformed = {
        ProbeTransform(getattr(t, "value", t)).value: apply_probe_transform(image, t)
        for t in transforms
    }

    rows = []
    for source in sources or encoder.available_sources():
        source = Source(source)
        h0 = encode_source(image, encoder, source, batch_size=1).numpy()[0]
        for name, x_t in transformed.items():
            h_t = encode_source(x_t, encoder, source, batch_size=1).numpy()[0]
            distance = float(((h_t - h0) ** 2).sum())
            rows.append(InvarianceRow(name, source.value, distance))
    return rows


def invariance_summary(
    images: torch.Tensor,
    transforms: Sequence[Any],
    encoder: EncoderModel,
    sources: Optional[Sequence[Source]] = None,
) -> List[Dict[str, Any]]:
    """Mean and std of :func:`invariance_probe` distances over several images."""
    collected: Dict[Tuple[str, str], List[float]] = {}
    for i in range(images.shape[0]):
        for row in invariance_probe(images[i : i + 1], transforms, encoder, sources):
            collected.setdefault((row.transform, row.source), []).append(row.distance)
    return [
        {"transform": t, "source": s, **asdict(DistanceRow.from_values(v))}
        for (t, s), v in collected.items()
    ]


def _psd_sqrt(matrix: np.ndarray, name: str) -> np.ndarray:
    values, vectors = linalg.eigh((matrix + matrix.T) / 2.0)
    scale = max(1.0, float(np.abs(values).max(initial=0.0)))
    if np.any(values < -PSD_TOLERANCE * scale):
        raise NumericalError(
            f"{name} is not positive semidefinite (min eigenvalue {values.min():.3e})"
        )
    return (vectors * np.sqrt(np.clip(values, 0.0, None))) @ vectors.T


def frechet_distance_from_moments(
    mu_a: np.ndarray, sigma_a: np.ndarray, mu_b: np.ndarray, sigma_b: np.ndarray
) -> float:
    """``||mu_a - mu_b||^2 + tr(S_a + S_b - 2 (S_a S_b)^(1/2))``.

    The trace of the square root is taken from the eigenvalues of the
    symmetric ``S_a^(1/2) S_b S_a^(1/2)``.
    """
    mu_a = np.atleast_1d(mu_a).astype(np.float64)
    mu_b = np.atleast_1d(mu_b).astype(np.float64)
    sigma_a = np.atleast_2d(sigma_a).astype(np.float64)
    sigma_b = np.atleast_2d(sigma_b).astype(np.float64)
    if (
        mu_a.shape != mu_b.shape
        or sigma_a.shape != sigma_b.shape
        or sigma_a.shape[0] != mu_a.size
    ):
        raise ShapeMismatchError("feature statistics have mismatched shapes")

    root_a = _psd_sqrt(sigma_a, "covariance a")
    _psd_sqrt(sigma_b, "covariance b")
    product = root_a @ sigma_b @ root_a
    values = linalg.eigvalsh((product + product.T) / 2.0)
    scale = max(1.0, float(np.abs(values).max(initial=0.0)))
    if np.any(values < -PSD_TOLERANCE * scale):
        raise NumericalError(f"covariance product has eigenvalue {values.min():.3e}")
    trace_sqrt = float(np.sqrt(np.clip(values, 0.0, None)).sum())

    diff = mu_a - mu_b
    traces = np.trace(sigma_a) + np.trace(sigma_b)
    value = float(diff @ diff + traces - 2.0 * trace_sqrt)
    if not math.isfinite(value):
        raise NumericalError("Frechet distance is not finite")
    return max(value, 0.0)


def feature_moments(features: Any) -> Tuple[np.ndarray, np.ndarray]:
    array = np.asarray(getattr(features, "values", features), dtype=np.float64)
    if array.ndim == 1:
        array = array.reshape(-1, 1)
    if array.shape[0] < 2:
        raise ConfigurationError("need at least 2 feature rows for a covariance")
    return array.mean(axis=0), np.atleast_2d(np.cov(array, rowvar=False))


def frechet_distance(features_a: Any, features_b: Any) -> float:
    """Frechet distance between Gaussians fitted to two feature sets."""
    mu_a, sigma_a = feature_moments(features_a)
    mu_b, sigma_b = feature_moments(features_b)
    if mu_a.size != mu_b.size:
        raise ShapeMismatchError(f"feature dims differ: {mu_a.size} vs {mu_b.size}")
    if min(len(np.asarray(features_a)), len(np.asarray(features_b))) <= mu_a.size:
        logger.warning(
            "fewer feature rows than dimensions; covariance is rank deficient"
        )
    return frechet_distance_from_moments(mu_a, sigma_a, mu_b, sigma_b)


def inception_style_score(class_probabilities: Any, atol: float = 1e-6) -> float:
    """``exp(mean_n KL(p(y|x_n) || p(y)))`` with ``p(y)`` the row mean."""
    probs = np.asarray(class_probabilities, dtype=np.float64)
    if probs.ndim != 2 or probs.shape[0] == 0:
        raise ShapeMismatchError(
            f"class probabilities must be (N, C), got {probs.shape}"
        )
    sums_to_one = np.allclose(probs.sum(axis=1), 1.0, rtol=0.0, atol=atol)
    if np.any(probs < 0) or not sums_to_one:
        raise ConfigurationError("every row must be a probability distribution")
    marginal = probs.mean(axis=0, keepdims=True)
    kl = rel_entr(probs, marginal).sum(axis=1)
    return float(np.exp(kl.mean()))


@torch.no_grad()
def class_probabilities(
    images: torch.Tensor, encoder: EncoderModel, probe
) -> np.ndarray:
    """Softmax of a probe over an encoder's features; the desk classifier for IS."""
    reps = encode_source(images, encoder, probe.source)
    return torch.softmax(probe(reps.values), dim=1).double().numpy()


def render_rank_table(rows: Sequence[Tuple[str, FaithfulnessReport]]) -> str:
    lines = [f"{'model':<24}{'rank':>8}{'MRR':>8}"]
    for name, report in rows:
        lines.append(f"{name:<24}{report.mean_rank:>8.2f}{report.mrr:>8.2f}")
    return "\n".join(lines) + "\n"


def render_fid_table(
    rows: Sequence[Tuple[str, Optional[float], Optional[float]]]
) -> str:
    def cell(value: Optional[float]) -> str:
        return f"{value:>8.2f}" if value is not None else f"{'-':>8}"

    lines = [f"{'model':<24}{'FID':>8}{'IS':>8}"]
    for name, fid, score in rows:
        lines.append(f"{name:<24}{cell(fid)}{cell(score)}")
    return "\n".join(lines) + "\n"


def render_distance_table(report: DistanceReferenceReport) -> str:
    lines = [f"{'reference':<26}{'mean':>12}{'std':>12}{'count':>8}"]
    for name, row in report.rows.items():
        lines.append(f"{name:<26}{row.mean:>12.4f}{row.std:>12.4f}{row.count:>8d}")
    return "\n".join(lines) + "\n"
