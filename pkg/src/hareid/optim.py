"""RMSprop, the two-phase learning-rate schedule, and the training loop.

The optimizer keeps a running average of squared gradients per parameter:

    v <- alpha * v + (1 - alpha) * g^2
    theta <- theta - lr * g / (sqrt(v) + delta)

with alpha = 0.99, delta = 1e-8 and no momentum (the common library
defaults). The learning rate starts at 1e-3 and drops to 1e-4 from epoch 5.
Batch gradients are the mean of per-sample gradients; the per-epoch shuffle
comes from a counter-based generator keyed on (seed, epoch) so a run can be
resumed mid-way and reproduce the uninterrupted trace exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .autodiff import Tensor, backward
from .errors import ConfigError, NumericError
from .gru import LossReport
from .model import Model


def rng_for(*key: int) -> np.random.Generator:
    """Deterministic counter-based generator for a small integer key."""
    k = np.zeros(2, dtype=np.uint64)
    for i, v in enumerate(key[:2]):
        k[i] = np.uint64(int(v) & 0xFFFFFFFFFFFFFFFF)
    return np.random.Generator(np.random.Philox(key=k))


@dataclass
class TrainSchedule:
    initial_lr: float = 0.001
    drop_epoch: int = 5
    dropped_lr: float = 0.0001
    batch_size: int = 64
    epochs: int = 20

    def __post_init__(self):
        if self.initial_lr <= 0 or self.dropped_lr <= 0:
            raise ConfigError("learning rates must be positive")
        if self.drop_epoch < 0:
            raise ConfigError("drop_epoch must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")


def lr_schedule(epoch: int, schedule: TrainSchedule | None = None) -> float:
    """Step schedule: initial rate before drop_epoch, dropped rate after."""
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    schedule = schedule or TrainSchedule()
    return schedule.initial_lr if epoch < schedule.drop_epoch else schedule.dropped_lr


@dataclass
class RmspropState:
    alpha: float = 0.99
    delta: float = 1e-8
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def init(cls, params: dict[str, Tensor], alpha: float = 0.99,
             delta: float = 1e-8) -> "RmspropState":
        return cls(alpha=alpha, delta=delta,
                   v={name: np.zeros_like(t.data) for name, t in params.items()})


def rmsprop_step(params: dict[str, Tensor], state: RmspropState, lr: float) -> None:
    """One in-place update; aborts (mutating nothing) on non-finite gradients."""
    grads: dict[str, np.ndarray] = {}
    for name, t in params.items():
        g = np.zeros_like(t.data) if t.grad is None else t.grad
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name}")
        grads[name] = g
    for name, t in params.items():
        g = grads[name]
        v = state.v[name]
        v *= state.alpha
        v += (1.0 - state.alpha) * g * g
        t.data -= lr * g / (np.sqrt(v) + state.delta)


@dataclass
class TrainResult:
    trace: list[tuple[int, LossReport]]
    state: RmspropState
    next_epoch: int


TrainItem = tuple[np.ndarray, int, int]  # input, model label, vehicle label


def train(model: Model, items: Sequence[TrainItem], schedule: TrainSchedule,
          seed: int, start_epoch: int = 0, state: RmspropState | None = None,
          on_epoch: Callable[[int, LossReport], None] | None = None) -> TrainResult:
    """Run the epoch loop, returning the per-epoch mean loss trace.

    Deterministic given (seed, start state): the shuffle for epoch e is keyed
    on (seed, e) alone, the last partial batch is kept, and per-batch
    gradients are the mean over the batch.
    """
    if not items:
        raise ConfigError("training set is empty")
    params = model.params()
    if state is None:
        state = RmspropState.init(params)
    n = len(items)
    trace: list[tuple[int, LossReport]] = []
    for epoch in range(start_epoch, schedule.epochs):
        lr = lr_schedule(epoch, schedule)
        order = rng_for(seed, epoch).permutation(n)
        model_sum = 0.0
        vehicle_sum = 0.0
        for lo in range(0, n, schedule.batch_size):
            batch = order[lo:lo + schedule.batch_size]
            for t in params.values():
                t.zero_grad()
            for idx in batch:
                inp, y_model, y_vehicle = items[idx]
                total, report, _ = model.loss(inp, y_model, y_vehicle)
                backward(total)
                model_sum += report.model
                vehicle_sum += report.vehicle
            scale = 1.0 / len(batch)
            for t in params.values():
                if t.grad is not None:
                    t.grad *= scale
            rmsprop_step(params, state, lr)
        report = LossReport.from_branches(model_sum / n, vehicle_sum / n)
        trace.append((epoch, report))
        if on_epoch is not None:
            on_epoch(epoch, report)
    return TrainResult(trace=trace, state=state, next_epoch=schedule.epochs)
