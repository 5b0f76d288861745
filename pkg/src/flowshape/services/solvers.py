from __future__ import annotations
import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, List, Optional, Protocol, Tuple

import torch
from torch import Tensor

from flowshape.services.errors import IntegrationError, RejectedInputError
from flowshape.services.network import KVCache

log = logging.getLogger(__name__)

# (x, t) -> velocity at x
Velocity = Callable[[Tensor, float], Tensor]


class Direction(str, Enum):
    INVERSION = "inversion"    # data (t=0) -> noise (t=1)
    DENOISING = "denoising"    # noise (t=1) -> data (t=0)


class SolverKind(str, Enum):
    EULER = "euler"
    SECOND_ORDER = "second_order"

    @property
    def nfe_per_step(self) -> int:
        return 1 if self is SolverKind.EULER else 2


@dataclass(frozen=True)
class TimeGrid:
    times: Tuple[float, ...]   # t_N = 1 > ... > t_0 = 0, in traversal order for denoising

    def __post_init__(self) -> None:
        ts = self.times
        if len(ts) < 2 or ts[0] != 1.0 or ts[-1] != 0.0:
            raise RejectedInputError("time grid must run from 1 to 0 with at least one step")
        if any(a <= b for a, b in zip(ts, ts[1:])):
            raise RejectedInputError("time grid must be strictly decreasing")

    @classmethod
    def uniform(cls, steps: int) -> "TimeGrid":
        if steps < 1:
            raise RejectedInputError(f"time grid needs at least one step, got {steps}")
        return cls(tuple(1.0 - i / steps for i in range(steps)) + (0.0,))

    @property
    def steps(self) -> int:
        return len(self.times) - 1

    def interval(self, direction: Direction, index: int) -> Tuple[float, float]:
        """(t_from, t_to) of step `index` in traversal order."""
        if direction is Direction.DENOISING:
            return self.times[index], self.times[index + 1]
        ascending = self.times[::-1]
        return ascending[index], ascending[index + 1]


@dataclass
class StepRecord:
    index: int
    t: float
    t_next: float
    before: Tensor
    after: Tensor
    nfe: int
    velocity: Tensor     # first evaluation v(before, t), replayed by the edit pipeline


@dataclass
class TrajectoryRecord:
    direction: Direction
    solver: SolverKind
    condition: Optional[int] = None
    steps: List[StepRecord] = field(default_factory=list)
    kv: Optional[KVCache] = None
    # v(x_1, 1) after an inversion, replayed by the first denoising step; costs one NFE
    terminal_velocity: Optional[Tensor] = None

    @property
    def total_nfe(self) -> int:
        return sum(s.nfe for s in self.steps) + int(self.terminal_velocity is not None)

    @property
    def start(self) -> Tensor:
        return self.steps[0].before

    @property
    def final(self) -> Tensor:
        return self.steps[-1].after

    def latents(self) -> List[Tensor]:
        return [self.start] + [s.after for s in self.steps]

    def is_chained(self) -> bool:
        return all(torch.equal(a.after, b.before) for a, b in zip(self.steps, self.steps[1:]))


class StepObserver(Protocol):
    def begin_step(self, index: int, t: float, t_next: float) -> None: ...

    def end_step(self, record: StepRecord) -> None: ...


class CountingVelocity:
    """Wraps a velocity evaluator and counts its calls (the NFE)."""

    def __init__(self, velocity: Velocity):
        self.velocity = velocity
        self.calls = 0

    def __call__(self, x: Tensor, t: float) -> Tensor:
        self.calls += 1
        return self.velocity(x, t)


def _evaluate(v: Velocity, x: Tensor, t: float, step: Optional[int]) -> Tensor:
    out = v(x, t)
    if not bool(torch.isfinite(out).all()):
        raise IntegrationError(f"non-finite velocity at t={t:.4f}", step)
    return out


def _euler(x: Tensor, t: float, dt: float, v: Velocity, step: Optional[int] = None) -> Tuple[Tensor, Tensor]:
    v1 = _evaluate(v, x, t, step)
    return x + dt * v1, v1


def _second_order(
    x: Tensor, t: float, dt: float, v: Velocity, step: Optional[int] = None
) -> Tuple[Tensor, Tensor]:
    # Taylor step with the time derivative estimated from one half-step evaluation
    v1 = _evaluate(v, x, t, step)
    half = dt / 2
    v2 = _evaluate(v, x + half * v1, t + half, step)
    dv_dt = (v2 - v1) / half
    return x + dt * v1 + 0.5 * dt * dt * dv_dt, v1


_STEPPERS = {SolverKind.EULER: _euler, SolverKind.SECOND_ORDER: _second_order}


def euler_step(x: Tensor, t_i: float, h: float, v: Velocity) -> Tensor:
    """One denoising Euler step from t_i to t_i - h: x - h v(x, t_i)."""
    if h <= 0:
        raise RejectedInputError(f"step size must be positive, got {h}")
    return _euler(x, t_i, -h, v)[0]


def second_order_step(x: Tensor, t_i: float, h: float, v: Velocity) -> Tensor:
    """One denoising step from t_i to t_i - h: x - h v + h^2/2 dv/dt (2 NFE)."""
    if h <= 0:
        raise RejectedInputError(f"step size must be positive, got {h}")
    return _second_order(x, t_i, -h, v)[0]


def integrate(
    x_start: Tensor,
    grid: TimeGrid,
    direction: Direction,
    velocity: Velocity,
    solver: SolverKind = SolverKind.SECOND_ORDER,
    condition: Optional[int] = None,
    observer: Optional[StepObserver] = None,
    kv: Optional[KVCache] = None,
) -> TrajectoryRecord:
    """Walk the whole grid; inversion uses the same stepper with the sign-flipped drift.

    `kv` is attached to the record; the caller's evaluator fills it during the run.
    """
    if not isinstance(grid, TimeGrid):
        raise RejectedInputError("integrate needs a TimeGrid")
    step_fn = _STEPPERS[solver]
    counter = CountingVelocity(velocity)
    record = TrajectoryRecord(direction, solver, condition, kv=kv)
    x = x_start
    for i in range(grid.steps):
        t, t_next = grid.interval(direction, i)
        if observer is not None:
            observer.begin_step(i, t, t_next)
        calls_before = counter.calls
        after, v1 = step_fn(x, t, t_next - t, counter, i)
        if not bool(torch.isfinite(after).all()):
            raise IntegrationError("latent became non-finite", i)
        step = StepRecord(i, t, t_next, x, after, counter.calls - calls_before, v1)
        record.steps.append(step)
        if observer is not None:
            observer.end_step(step)
        x = after
    log.debug(
        "integrate: direction=%s solver=%s steps=%d nfe=%d",
        direction.value, solver.value, grid.steps, record.total_nfe,
    )
    return record
