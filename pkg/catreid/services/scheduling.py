"""Learning-rate schedules and the early-stopping rule."""

import logging
import math
from typing import Optional, Sequence, Union

import torch
from torch.optim.lr_scheduler import LRScheduler, ReduceLROnPlateau, StepLR

from catreid.schemas.training import (
    EpochMetrics,
    MonitoredMetric,
    SchedulerKind,
    SchedulerSpec,
)

logger = logging.getLogger(__name__)

TorchScheduler = Union[LRScheduler, ReduceLROnPlateau]


def build_lr_scheduler(optimizer: torch.optim.Optimizer, spec: SchedulerSpec) -> TorchScheduler:
    """
    Torch scheduler for a run's schedule, stepped once per completed epoch.

    Plateau decay: the first value sets the best; each later epoch that does
    not improve on it by more than min_delta counts as bad, and after
    `patience` consecutive bad epochs lr is multiplied by the factor and the
    count restarts. ReduceLROnPlateau reduces once the count *exceeds* its
    patience, hence `patience - 1`.

    Step decay: epoch e (1-based) trains at
    lr0 * factor ** ((e - 1) // interval_epochs).
    """
    if spec.kind == SchedulerKind.STEP_DECAY:
        return StepLR(optimizer, step_size=spec.step.interval_epochs, gamma=spec.step.factor)
    plateau = spec.plateau
    return ReduceLROnPlateau(
        optimizer,
        mode="max" if plateau.monitored == MonitoredMetric.VAL_ACC else "min",
        factor=plateau.factor,
        patience=plateau.patience - 1,
        threshold=plateau.min_delta,
        threshold_mode="abs",
    )


class SchedulerState:
    """
    A torch scheduler bound to an optimizer, advanced once per completed epoch.

    `lr` is the rate the next epoch trains with.
    """

    def __init__(self, spec: SchedulerSpec, optimizer: torch.optim.Optimizer):
        self.spec = spec
        self.optimizer = optimizer
        self.scheduler = build_lr_scheduler(optimizer, spec)
        self.epoch = 0
        self.reductions = 0

    @classmethod
    def start(
        cls, spec: SchedulerSpec, lr0: float, optimizer: Optional[torch.optim.Optimizer] = None
    ) -> "SchedulerState":
        """Bind to `optimizer`, or to a throwaway one at lr0 for offline replay."""
        if optimizer is not None:
            for group in optimizer.param_groups:
                group["lr"] = lr0
            return cls(spec, optimizer)
        optimizer = torch.optim.SGD([torch.zeros(1, requires_grad=True)], lr=lr0)
        state = cls(spec, optimizer)
        # no grads, so this only marks the optimizer as stepped
        optimizer.step()
        return state

    @property
    def lr(self) -> float:
        return float(self.optimizer.param_groups[0]["lr"])


def scheduler_step(s: SchedulerState, epoch_metric: float) -> float:
    """Advance the schedule past one epoch and return the lr for the next."""
    s.epoch += 1
    old = s.lr
    if s.spec.kind == SchedulerKind.STEP_DECAY:
        s.scheduler.step()
    else:
        if not math.isfinite(epoch_metric):
            logger.warning(f"Non-finite monitored metric at epoch {s.epoch}; counted as no improvement")
        s.scheduler.step(epoch_metric)
    if s.lr < old:
        s.reductions += 1
        logger.info(f"Schedule after epoch {s.epoch}: lr {old:g} -> {s.lr:g}")
    return s.lr


def replay_schedule(spec: SchedulerSpec, lr0: float, metrics: Sequence[float]) -> list[float]:
    """Learning rates each epoch trained with, for a stream of monitored values."""
    state = SchedulerState.start(spec, lr0)
    rates = []
    for value in metrics:
        rates.append(state.lr)
        scheduler_step(state, value)
    return rates


def early_stop_check(
    history: Sequence[EpochMetrics],
    patience_epochs: int = 10,
    min_delta: float = 0.001,
    metric: MonitoredMetric = MonitoredMetric.VAL_ACC,
) -> bool:
    """
    True once the watched metric has gone `patience_epochs` consecutive
    epochs without beating the best so far by more than `min_delta`.
    Accuracy must rise, loss must fall.
    """
    if not history:
        raise ValueError("history must not be empty")
    values = [getattr(m, metric.value) for m in history]
    best = values[0]
    stale = 0
    for value in values[1:]:
        if metric == MonitoredMetric.VAL_LOSS:
            improved = value < best - min_delta
        else:
            improved = value > best + min_delta
        if improved:
            best = value
            stale = 0
        else:
            stale += 1
    return stale >= patience_epochs
