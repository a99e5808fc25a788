"""
Representation matching.

Optimizes an input so that the encoder maps it onto a target representation,
records the distance trajectory, and exposes Jacobian analysis of the
encoder around an input.
"""

import json
import logging
from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import Any, Callable, Dict, List, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from scipy import linalg

from rcdmkit.exceptions import (
    ConfigurationError,
    IndexOutOfRangeError,
    NumericalError,
    ShapeMismatchError,
)

logger = logging.getLogger(__name__)

Mapping = Callable[[torch.Tensor], torch.Tensor]

PLATEAU_FACTOR = 0.5
PLATEAU_PATIENCE = 100
LBFGS_HISTORY = 10


class DistanceKind(Enum):
    L2 = "l2"
    L1 = "l1"
    COSINE = "cosine"


class OptimizerKind(Enum):
    GRADIENT_DESCENT = "sgd"
    ADAM = "adam"
    LBFGS = "lbfgs"


class LrSchedule(Enum):
    NONE = "none"
    PLATEAU = "plateau"
    COSINE = "cosine"


def _raw(value: Any) -> Any:
    return getattr(value, "value", value)


@dataclass
class MatchConfig:
    """Objective, optimizer and stopping rule of one matching run."""

    distance: DistanceKind = DistanceKind.L2
    optimizer: OptimizerKind = OptimizerKind.ADAM
    steps: int = 10000
    step_size: float = 0.01
    tolerance: float = 0.0
    lr_schedule: LrSchedule = LrSchedule.NONE

    def __post_init__(self):
        try:
            self.distance = DistanceKind(_raw(self.distance))
            self.optimizer = OptimizerKind(_raw(self.optimizer))
            self.lr_schedule = LrSchedule(_raw(self.lr_schedule))
        except ValueError as e:
            raise ConfigurationError(str(e)) from e
        if int(self.steps) < 1:
            raise ConfigurationError(f"steps must be >= 1, got {self.steps}")
        if not self.step_size > 0:
            raise ConfigurationError(
                f"step size must be positive, got {self.step_size}"
            )
        if self.tolerance < 0:
            raise ConfigurationError(
                f"tolerance must be non-negative, got {self.tolerance}"
            )
        self.steps = int(self.steps)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "MatchConfig":
        return cls(**data)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "distance": self.distance.value,
            "optimizer": self.optimizer.value,
            "steps": self.steps,
            "step_size": self.step_size,
            "tolerance": self.tolerance,
            "lr_schedule": self.lr_schedule.value,
        }


@dataclass
class MatchResult:
    """Outcome of a matching run; ``distances[0]`` is ``d0``."""

    x_final: torch.Tensor
    distances: List[float]
    converged: bool
    relative_distance_percent: float
    pixel_distance: Optional[float] = None
    config: Dict[str, Any] = field(default_factory=dict)

    @property
    def d0(self) -> float:
        return self.distances[0]

    @property
    def dT(self) -> float:
        return self.distances[-1]

    @property
    def steps_taken(self) -> int:
        return len(self.distances) - 1

    def summary(self) -> Dict[str, Any]:
        return {
            **self.config,
            "d0": self.d0,
            "dT": self.dT,
            "relative_distance": self.relative_distance_percent,
            "converged": self.converged,
            "steps_taken": self.steps_taken,
            "pixel_distance": self.pixel_distance,
        }


def relative_distance(d0: float, dT: float) -> float:
    """``100 - 100 |d0 - dT| / d0``: 100 means no progress, 0 a perfect match."""
    if d0 < 0 or dT < 0:
        raise ConfigurationError("distances must be non-negative")
    if d0 == 0:
        raise NumericalError("relative distance is undefined for d0 = 0")
    return 100.0 - 100.0 * abs(d0 - dT) / d0


def _objective(
    out: torch.Tensor, target: torch.Tensor, kind: DistanceKind
) -> torch.Tensor:
    """Per-sample objective; the L2 objective is half the squared distance."""
    if kind is DistanceKind.L2:
        return 0.5 * ((out - target) ** 2).sum(dim=1)
    if kind is DistanceKind.L1:
        return (out - target).abs().sum(dim=1)
    return 1.0 - F.cosine_similarity(out, target, dim=1)


def _distance(
    out: torch.Tensor, target: torch.Tensor, kind: DistanceKind
) -> torch.Tensor:
    if kind is DistanceKind.L2:
        return (out - target).norm(dim=1)
    return _objective(out, target, kind)


def random_init(shape: Sequence[int], generator: torch.Generator) -> torch.Tensor:
    """Standard-normal image clamped to [-1, 1]."""
    return torch.randn(tuple(shape), generator=generator).clamp(-1.0, 1.0)


def _as_target(h_target: Any, like: torch.Tensor) -> torch.Tensor:
    values = getattr(h_target, "values", h_target)
    if not isinstance(values, torch.Tensor):
        values = np.asarray(values)
    target = torch.as_tensor(values)
    target = target.detach().to(device=like.device, dtype=like.dtype)
    return target.reshape(1, -1) if target.ndim == 1 else target


def _make_optimizer(x: torch.Tensor, cfg: MatchConfig) -> torch.optim.Optimizer:
    if cfg.optimizer is OptimizerKind.GRADIENT_DESCENT:
        return torch.optim.SGD([x], lr=cfg.step_size, momentum=0.0)
    if cfg.optimizer is OptimizerKind.ADAM:
        return torch.optim.Adam([x], lr=cfg.step_size)
    return torch.optim.LBFGS(
        [x],
        lr=cfg.step_size,
        max_iter=1,
        history_size=LBFGS_HISTORY,
        line_search_fn="strong_wolfe",
    )


def _make_scheduler(optimizer: torch.optim.Optimizer, cfg: MatchConfig):
    if cfg.lr_schedule is LrSchedule.PLATEAU:
        return torch.optim.lr_scheduler.ReduceLROnPlateau(
            optimizer, mode="min", factor=PLATEAU_FACTOR, patience=PLATEAU_PATIENCE
        )
    if cfg.lr_schedule is LrSchedule.COSINE:
        return torch.optim.lr_scheduler.CosineAnnealingLR(optimizer, T_max=cfg.steps)
    return None


def match_representation(
    f: Mapping,
    h_target: Any,
    x_init: torch.Tensor,
    cfg: MatchConfig,
    source_image: Optional[torch.Tensor] = None,
) -> MatchResult:
    """Move ``x_init`` in input space until ``f(x)`` matches ``h_target``.

    With plain gradient descent and the L2 objective every update is
    ``-step_size * J_f(x)^T (f(x) - h)``, a combination of Jacobian rows.
    Iterates are not clamped.

    Args:
        f: Differentiable mapping (N, C, H, W) -> (N, K)
        h_target: Target (K,) for every image, or (N, K)
        x_init: Starting images (N, C, H, W)
        cfg: Match configuration
        source_image: Image that produced ``h_target``; its pixel distance to
            the result is recorded

    Returns:
        MatchResult: Final input, distance trajectory and convergence flag
    """
    x = x_init.detach().clone().requires_grad_(True)
    with torch.no_grad():
        out = f(x)
    target = _as_target(h_target, out)
    if target.shape[1] != out.shape[1]:
        raise ShapeMismatchError(
            f"target length {target.shape[1]} != encoder output {out.shape[1]}"
        )
    if target.shape[0] not in (1, out.shape[0]):
        raise ShapeMismatchError(f"{target.shape[0]} targets for {out.shape[0]} inputs")
    target = target.expand_as(out)

    def current_distance() -> float:
        with torch.no_grad():
            value = float(_distance(f(x), target, cfg.distance).mean())
        if not np.isfinite(value):
            raise NumericalError("representation distance became non-finite")
        return value

    distances = [current_distance()]
    optimizer = _make_optimizer(x, cfg)
    scheduler = _make_scheduler(optimizer, cfg)

    def closure() -> torch.Tensor:
        optimizer.zero_grad()
        loss = _objective(f(x), target, cfg.distance).sum()
        if not torch.isfinite(loss):
            raise NumericalError("matching objective became non-finite")
        (x.grad,) = torch.autograd.grad(loss, x)
        return loss

    step = 0
    while distances[-1] > cfg.tolerance and step < cfg.steps:
        optimizer.step(closure)
        distances.append(current_distance())
        if isinstance(scheduler, torch.optim.lr_scheduler.ReduceLROnPlateau):
            scheduler.step(distances[-1])
        elif scheduler is not None:
            scheduler.step()
        step += 1
        if step % 1000 == 0:
            logger.debug(f"match step {step}/{cfg.steps} distance {distances[-1]:.6f}")

    d0, dT = distances[0], distances[-1]
    rel = 0.0 if d0 == 0 else relative_distance(d0, dT)
    pixel = None
    if source_image is not None:
        diff = (x.detach() - source_image.to(x.dtype)).flatten(1)
        pixel = float(diff.norm(dim=1).mean())

    logger.info(
        f"match {cfg.distance.value}/{cfg.optimizer.value}: d0={d0:.4f} dT={dT:.4f} "
        f"relative={rel:.2f}% in {step} steps"
    )
    return MatchResult(
        x_final=x.detach(),
        distances=distances,
        converged=dT <= cfg.tolerance,
        relative_distance_percent=rel,
        pixel_distance=pixel,
        config=cfg.to_dict(),
    )


def _single_input(x: torch.Tensor) -> torch.Tensor:
    if x.ndim == 3:
        x = x.unsqueeze(0)
    if x.shape[0] != 1:
        raise ShapeMismatchError(f"expected a single image, got batch of {x.shape[0]}")
    return x.detach()


def jacobian_rows(
    f: Mapping, x: torch.Tensor, row_indices: Sequence[int]
) -> torch.Tensor:
    """Gradients of selected output coordinates w.r.t. the flattened input.

    Returns:
        torch.Tensor: (len(row_indices), D)
    """
    x = _single_input(x).clone().requires_grad_(True)
    out = f(x).reshape(-1)
    rows = []
    for i in row_indices:
        if not 0 <= int(i) < out.numel():
            raise IndexOutOfRangeError(f"row index {i} outside [0, {out.numel()})")
        (grad,) = torch.autograd.grad(
            out[int(i)], x, retain_graph=True, allow_unused=True
        )
        if grad is None:
            grad = torch.zeros_like(x)
        rows.append(grad.reshape(-1))
    if not rows:
        return x.new_zeros((0, x.numel()))
    return torch.stack(rows)


def full_jacobian(f: Mapping, x: torch.Tensor) -> torch.Tensor:
    """The (K, D) Jacobian of ``f`` at one image."""
    x = _single_input(x)
    shape = x.shape
    return torch.autograd.functional.jacobian(
        lambda v: f(v.reshape(shape)).reshape(-1), x.reshape(-1)
    )


def nullspace_dimension(
    f: Mapping, x: torch.Tensor, rank_tolerance: float = 1e-6
) -> int:
    """``D`` minus the numerical rank of ``J_f(x)``.

    Singular values at or below ``rank_tolerance`` times the largest one
    count as zero. The result is at least ``D - K``.
    """
    if not rank_tolerance > 0:
        raise ConfigurationError(
            f"rank tolerance must be positive, got {rank_tolerance}"
        )
    jac = full_jacobian(f, x).detach().cpu().double().numpy()
    k, d = jac.shape
    singular = linalg.svdvals(jac)
    if singular.size == 0 or singular[0] == 0:
        rank = 0
    else:
        rank = int((singular > rank_tolerance * singular[0]).sum())
    null = d - rank
    if null < d - k:
        raise NumericalError(f"nullspace dimension {null} below D - K = {d - k}")
    return null


@dataclass
class JTableRow:
    distance: str
    optimizer: str
    lr_schedule: str
    d0: float
    dT: float
    relative_distance: float
    steps_taken: int

    @classmethod
    def from_result(cls, result: MatchResult) -> "JTableRow":
        cfg = result.config
        return cls(
            distance=cfg["distance"],
            optimizer=cfg["optimizer"],
            lr_schedule=cfg["lr_schedule"],
            d0=result.d0,
            dT=result.dT,
            relative_distance=result.relative_distance_percent,
            steps_taken=result.steps_taken,
        )


JTABLE_COLUMNS = (
    "distance",
    "optimizer",
    "lr_schedule",
    "d0",
    "dT",
    "relative_distance",
    "steps_taken",
)


def run_jtable(
    f: Mapping,
    h_target: Any,
    x_init: torch.Tensor,
    base: MatchConfig,
    distances: Sequence[str],
    optimizers: Sequence[str],
    schedules: Sequence[str],
    source_image: Optional[torch.Tensor] = None,
) -> List[MatchResult]:
    """Run one match per (distance, optimizer, schedule) from the same start."""
    results = []
    for dist in distances:
        for opt in optimizers:
            for sched in schedules:
                cfg = MatchConfig(
                    distance=dist,
                    optimizer=opt,
                    steps=base.steps,
                    step_size=base.step_size,
                    tolerance=base.tolerance,
                    lr_schedule=sched,
                )
                results.append(
                    match_representation(f, h_target, x_init, cfg, source_image)
                )
    return results


def render_jtable(rows: Sequence[JTableRow], delimiter: str = "\t") -> str:
    """Delimited text with a header row; distances to 4 decimals, percentages to 2."""
    lines = [delimiter.join(JTABLE_COLUMNS)]
    for row in rows:
        lines.append(
            delimiter.join(
                [
                    row.distance,
                    row.optimizer,
                    row.lr_schedule,
                    f"{row.d0:.4f}",
                    f"{row.dT:.4f}",
                    f"{row.relative_distance:.2f}",
                    str(row.steps_taken),
                ]
            )
        )
    return "\n".join(lines) + "\n"


def jtable_json(rows: Sequence[JTableRow]) -> str:
    return json.dumps([asdict(r) for r in rows], indent=2, sort_keys=True)
