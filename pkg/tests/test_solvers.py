from __future__ import annotations

import numpy as np
import pytest
import torch

from flowshape.services.errors import IntegrationError, RejectedInputError
from flowshape.services.solvers import (
    CountingVelocity,
    Direction,
    SolverKind,
    TimeGrid,
    euler_step,
    integrate,
    second_order_step,
)

A, B, C = 0.3, 1.0, 0.5


def _field(x, t):
    # x-independent, quadratic in t: the second-order step is not exact on it
    return torch.full_like(x, A + B * t + C * t * t)


def _global_error(solver: SolverKind, steps: int) -> float:
    x1 = torch.zeros(1, dtype=torch.float64)
    record = integrate(x1, TimeGrid.uniform(steps), Direction.DENOISING, _field, solver)
    exact = -(A + B / 2 + C / 3)
    return abs(record.final.item() - exact)


@pytest.mark.parametrize("solver, order", [(SolverKind.EULER, 1.0), (SolverKind.SECOND_ORDER, 2.0)])
def test_global_error_slope_matches_order(solver, order):
    ns = np.array([4, 8, 16, 32, 64])
    errors = np.array([_global_error(solver, int(n)) for n in ns])
    slope = -np.polyfit(np.log(ns), np.log(errors), 1)[0]
    assert slope == pytest.approx(order, abs=0.3)


def test_worked_single_steps_on_linear_field():
    x = torch.tensor([2.0], dtype=torch.float64)
    v = lambda x, t: torch.full_like(x, 3.0 * t)  # noqa: E731
    assert euler_step(x, 1.0, 1.0, v).item() == pytest.approx(2.0 - 3.0)
    assert second_order_step(x, 1.0, 1.0, v).item() == pytest.approx(2.0 - 1.5)


def test_steps_reject_non_positive_size():
    with pytest.raises(RejectedInputError):
        euler_step(torch.zeros(1), 1.0, 0.0, _field)
    with pytest.raises(RejectedInputError):
        second_order_step(torch.zeros(1), 1.0, -0.1, _field)


def test_equal_nfe_for_second_order_n_and_euler_2n():
    counted = {}
    for solver, steps in ((SolverKind.SECOND_ORDER, 28), (SolverKind.EULER, 56)):
        counter = CountingVelocity(_field)
        record = integrate(torch.zeros(3), TimeGrid.uniform(steps), Direction.DENOISING, counter, solver)
        assert record.total_nfe == counter.calls
        counted[solver] = counter.calls
    assert counted[SolverKind.SECOND_ORDER] == counted[SolverKind.EULER] == 56


def test_inversion_then_denoising_returns_to_start_on_constant_field():
    start = torch.linspace(-1, 1, 6, dtype=torch.float64)
    v = lambda x, t: torch.full_like(x, 0.7)  # noqa: E731
    grid = TimeGrid.uniform(10)
    up = integrate(start, grid, Direction.INVERSION, v)
    down = integrate(up.final, grid, Direction.DENOISING, v)
    assert torch.allclose(up.final, start + 0.7, atol=1e-12)
    assert torch.allclose(down.final, start, atol=1e-12)


def test_records_are_chained_and_keep_first_velocity():
    record = integrate(torch.zeros(2), TimeGrid.uniform(4), Direction.INVERSION, _field, SolverKind.EULER)
    assert record.is_chained()
    assert len(record.latents()) == 5
    assert record.steps[0].t == 0.0
    assert record.steps[0].velocity[0].item() == pytest.approx(A)
    assert [s.nfe for s in record.steps] == [1, 1, 1, 1]


def test_inversion_intervals_mirror_denoising_intervals():
    grid = TimeGrid.uniform(4)
    for s in range(4):
        lo, hi = sorted(grid.interval(Direction.DENOISING, s))
        inv_lo, inv_hi = grid.interval(Direction.INVERSION, 3 - s)
        assert (inv_lo, inv_hi) == (pytest.approx(lo), pytest.approx(hi))


@pytest.mark.parametrize("times", [(1.0,), (0.9, 0.0), (1.0, 0.5, 0.5, 0.0), (1.0, 0.2, 0.4, 0.0)])
def test_time_grid_rejects_malformed_grids(times):
    with pytest.raises(RejectedInputError):
        TimeGrid(times)


def test_uniform_grid_needs_a_step():
    with pytest.raises(RejectedInputError):
        TimeGrid.uniform(0)


def test_non_finite_velocity_reports_the_step():
    def blows_up(x, t):
        return torch.full_like(x, float("inf") if t <= 0.5 else 1.0)

    with pytest.raises(IntegrationError) as info:
        integrate(torch.zeros(1), TimeGrid.uniform(4), Direction.DENOISING, blows_up, SolverKind.EULER)
    assert info.value.step == 2
