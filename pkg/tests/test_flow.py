from __future__ import annotations
import math

import pytest
import torch

from flowshape.commands.train import training_set
from flowshape.services.errors import RejectedInputError, TrainingDivergedError
from flowshape.services.flow import TrainBatch, TrainingSet, cfm_loss, interpolate, target_velocity, train
from flowshape.services.network import build_model


def _pair(shape=(2, 8, 8, 192)):
    g = torch.Generator().manual_seed(3)
    return torch.randn(shape, generator=g), torch.randn(shape, generator=g)


def test_interpolate_hits_both_endpoints_exactly():
    x0, x1 = _pair()
    assert torch.equal(interpolate(x0, x1, 0.0), x0)
    assert torch.equal(interpolate(x0, x1, 1.0), x1)


def test_path_is_consistent_with_target_velocity():
    x0, x1 = _pair()
    for t in (0.1, 0.35, 0.8):
        expected = x0 + t * target_velocity(x0, x1)
        assert torch.allclose(interpolate(x0, x1, t), expected, atol=1e-6)


def test_interpolate_broadcasts_per_sample_times():
    x0, x1 = _pair()
    t = torch.tensor([0.0, 1.0])
    out = interpolate(x0, x1, t)
    assert torch.equal(out[0], x0[0])
    assert torch.equal(out[1], x1[1])


def test_interpolate_rejects_mismatched_endpoints():
    with pytest.raises(RejectedInputError):
        interpolate(torch.zeros(2, 3), torch.zeros(3, 2), 0.5)


def test_cfm_loss_of_zero_model_on_unit_velocity_is_one():
    clean = torch.zeros(4, 8, 8, 192)
    batch = TrainBatch(clean, torch.ones_like(clean), torch.zeros(4, dtype=torch.long), torch.full((4,), 0.5))
    loss = cfm_loss(lambda x, t, c: torch.zeros_like(x), batch)
    assert loss.item() == pytest.approx(1.0)


def test_cfm_loss_of_exact_model_is_zero():
    x0, x1 = _pair()
    batch = TrainBatch(x0, x1, torch.zeros(2, dtype=torch.long), torch.tensor([0.2, 0.7]))
    assert cfm_loss(lambda x, t, c: x1 - x0, batch).item() == 0.0


def test_cfm_loss_is_unchanged_by_duplicating_the_batch():
    x0, x1 = _pair()
    conditions, times = torch.tensor([1, 4]), torch.tensor([0.3, 0.6])
    batch = TrainBatch(x0, x1, conditions, times)
    doubled = TrainBatch(torch.cat([x0, x0]), torch.cat([x1, x1]), conditions.repeat(2), times.repeat(2))
    def model(x, t, c):
        return 0.5 * x

    assert cfm_loss(model, doubled).item() == pytest.approx(cfm_loss(model, batch).item(), rel=1e-6)


@pytest.mark.parametrize("t", [0.0, 1.0])
def test_batch_rejects_endpoint_times(t):
    x0, x1 = _pair()
    with pytest.raises(RejectedInputError):
        TrainBatch(x0, x1, torch.zeros(2, dtype=torch.long), torch.tensor([0.5, t]))


def test_training_is_deterministic(dataset, tiny_config):
    data = training_set(dataset, tiny_config)
    a = train(build_model(tiny_config, 0), data, epochs=1, lr=1e-3, seed=5, batch_size=16)
    b = train(build_model(tiny_config, 0), data, epochs=1, lr=1e-3, seed=5, batch_size=16)
    assert a.history == b.history
    for (name, pa), pb in zip(a.model.state_dict().items(), b.model.state_dict().values()):
        assert torch.equal(pa, pb), name


def test_history_has_one_entry_per_batch(dataset, tiny_config):
    data = training_set(dataset, tiny_config)
    result = train(build_model(tiny_config, 0), data, epochs=2, lr=1e-3, seed=0, batch_size=20)
    assert len(result.history) == 2 * math.ceil(len(data) / 20)
    assert result.final_loss == pytest.approx(sum(result.history[-3:]) / 3)


def test_zero_epochs_leaves_model_untouched(dataset, tiny_config):
    model = build_model(tiny_config, 0)
    before = {k: v.clone() for k, v in model.state_dict().items()}
    result = train(model, training_set(dataset, tiny_config), epochs=0, lr=1e-3, seed=0)
    assert result.history == []
    assert math.isnan(result.final_loss)
    assert all(torch.equal(before[k], v) for k, v in result.model.state_dict().items())


def test_nan_loss_points_at_learning_rate(dataset, tiny_config):
    data = training_set(dataset, tiny_config)
    poisoned = TrainingSet(torch.full_like(data.latents, float("nan")), data.conditions, data.edge_maps)
    with pytest.raises(TrainingDivergedError, match="learning rate"):
        train(build_model(tiny_config, 0), poisoned, epochs=1, lr=1e-3, seed=0)



def test_training_restores_the_deterministic_flag(dataset, tiny_config):
    before = torch.are_deterministic_algorithms_enabled()
    train(build_model(tiny_config, 0), training_set(dataset, tiny_config), epochs=1, lr=1e-3, seed=0)
    assert torch.are_deterministic_algorithms_enabled() == before

    data = training_set(dataset, tiny_config)
    poisoned = TrainingSet(torch.full_like(data.latents, float("nan")), data.conditions, data.edge_maps)
    with pytest.raises(TrainingDivergedError):
        train(build_model(tiny_config, 0), poisoned, epochs=1, lr=1e-3, seed=0)
    assert torch.are_deterministic_algorithms_enabled() == before


@pytest.mark.slow
def test_default_recipe_lowers_the_loss(acceptance):
    history = acceptance.history
    assert acceptance.final_loss < sum(history[:3]) / 3
