from __future__ import annotations
import logging
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Iterator, List, Optional

import torch
import torch.nn.functional as F
from torch import Tensor

from flowshape.services.errors import RejectedInputError, TrainingDivergedError, require_same_shape
from flowshape.services.network import AdapterInput

log = logging.getLogger(__name__)

# (x_t, t, cond) -> velocity, all batched on the leading axis
VelocityModel = Callable[[Tensor, Tensor, Tensor], Tensor]

# Training times are drawn from (T_EPS, 1 - T_EPS) so neither endpoint is ever supervised.
T_EPS = 1e-5


@contextmanager
def deterministic_algorithms() -> Iterator[None]:
    """Deterministic torch kernels for the duration of the block; the previous setting is restored."""
    previous = torch.are_deterministic_algorithms_enabled()
    torch.use_deterministic_algorithms(True)
    try:
        yield
    finally:
        torch.use_deterministic_algorithms(previous)


@dataclass
class TrainBatch:
    clean: Tensor            # X_0, data side, (B, H, W, C)
    noise: Tensor            # X_1 ~ N(0, I), same shape
    conditions: Tensor       # (B,) long; null id allowed
    times: Tensor            # (B,) in (0, 1)
    edge_maps: Optional[Tensor] = None     # (B, H, W) adapter input
    adapter_gate: Optional[Tensor] = None  # (B,) 0/1, which samples see the adapter

    def __post_init__(self) -> None:
        n = self.clean.shape[0]
        if n == 0:
            raise RejectedInputError("empty batch")
        lengths = {self.noise.shape[0], self.conditions.shape[0], self.times.shape[0]}
        if lengths != {n}:
            raise RejectedInputError("clean, noise, conditions and times must have equal length")
        require_same_shape(self.clean, self.noise, "clean/noise")
        if bool(((self.times <= 0) | (self.times >= 1)).any()):
            raise RejectedInputError("batch times must lie strictly inside (0, 1)")

    def __len__(self) -> int:
        return self.clean.shape[0]


@dataclass
class TrainingSet:
    latents: Tensor      # (N, H, W, C)
    conditions: Tensor   # (N,)
    edge_maps: Tensor    # (N, H, W)

    def __len__(self) -> int:
        return self.latents.shape[0]


@dataclass
class TrainResult:
    model: torch.nn.Module
    history: List[float]
    final_loss: float     # mean loss over the last epoch; nan when no epochs ran


def interpolate(x0: Tensor, x1: Tensor, t) -> Tensor:
    """Point on the straight path at time t: (1 - t) x0 + t x1.

    `t` is a scalar or a per-sample tensor broadcast over the trailing axes.
    """
    require_same_shape(x0, x1, "interpolate endpoints")
    if isinstance(t, Tensor) and t.ndim == 1 and x0.ndim > 1:
        t = t.reshape(-1, *([1] * (x0.ndim - 1)))
    return (1 - t) * x0 + t * x1


def target_velocity(x0: Tensor, x1: Tensor) -> Tensor:
    require_same_shape(x0, x1, "velocity endpoints")
    return x1 - x0


def cfm_loss(model: VelocityModel, batch: TrainBatch) -> Tensor:
    """Conditional flow-matching loss, mean over every scalar element."""
    if len(batch) == 0:
        raise RejectedInputError("empty batch")
    x_t = interpolate(batch.clean, batch.noise, batch.times)
    predicted = model(x_t, batch.times, batch.conditions)
    require_same_shape(predicted, batch.clean, "model output")
    return F.mse_loss(predicted, target_velocity(batch.clean, batch.noise), reduction="mean")


def sample_batch(
    data: TrainingSet,
    index: Tensor,
    generator: torch.Generator,
    null_id: int,
    cond_dropout: float,
    adapter_prob: float,
) -> TrainBatch:
    clean = data.latents[index]
    n = clean.shape[0]
    noise = torch.randn(clean.shape, generator=generator)
    times = T_EPS + (1 - 2 * T_EPS) * torch.rand(n, generator=generator)
    conditions = data.conditions[index].clone()
    dropped = torch.rand(n, generator=generator) < cond_dropout
    conditions[dropped] = null_id
    gate = (torch.rand(n, generator=generator) < adapter_prob).to(clean.dtype)
    return TrainBatch(clean, noise, conditions, times, data.edge_maps[index], gate)


def train(
    model,
    data: TrainingSet,
    epochs: int,
    lr: float,
    seed: int,
    batch_size: int = 64,
    cond_dropout: float = 0.1,
    adapter_prob: float = 0.5,
) -> TrainResult:
    """Fit `model` (a VelocityNet) to the straight-line velocity of `data`.

    Shuffling, noise, times, condition dropout and adapter gating all come
    from one generator seeded with `seed`; the loss history has one entry
    per batch.
    """
    if len(data) == 0:
        raise RejectedInputError("training set is empty")
    history: List[float] = []
    if epochs <= 0:
        return TrainResult(model, history, float("nan"))

    generator = torch.Generator().manual_seed(seed)
    optimizer = torch.optim.Adam(model.parameters(), lr=lr)
    null_id = model.config.null_id
    strengths = (1.0,) * model.config.adapter_branches

    def velocity(batch: TrainBatch) -> VelocityModel:
        def _call(x: Tensor, t: Tensor, cond: Tensor) -> Tensor:
            adapter = AdapterInput(batch.edge_maps, strengths, gate=batch.adapter_gate)
            return model(x, t, cond, adapter=adapter)

        return _call

    with deterministic_algorithms():
        model.train()
        epoch_losses: List[float] = []
        for epoch in range(epochs):
            order = torch.randperm(len(data), generator=generator)
            epoch_losses = []
            for b, start in enumerate(range(0, len(data), batch_size)):
                batch = sample_batch(
                    data, order[start:start + batch_size], generator, null_id, cond_dropout, adapter_prob
                )
                loss = cfm_loss(velocity(batch), batch)
                if not torch.isfinite(loss):
                    raise TrainingDivergedError(
                        f"loss became {loss.item()} at epoch {epoch} batch {b}; "
                        f"lower the learning rate (lr={lr})"
                    )
                optimizer.zero_grad()
                loss.backward()
                optimizer.step()
                history.append(loss.item())
                epoch_losses.append(loss.item())
            log.info("epoch=%d loss=%.5f batches=%d", epoch, sum(epoch_losses) / len(epoch_losses), len(epoch_losses))
        model.eval()
    return TrainResult(model, history, sum(epoch_losses) / len(epoch_losses))
