from __future__ import annotations
from dataclasses import dataclass
from typing import List

import pytest
import torch

from flowshape.commands.train import training_set
from flowshape.services.config import DataConfig, TrainConfig
from flowshape.services.editing import EditSchedule
from flowshape.services.flow import train
from flowshape.services.network import ModelConfig, VelocityNet, build_model
from flowshape.services.scenes import SceneDataset, make_dataset

# small enough to train in seconds; same token grid as the default model
TINY = ModelConfig(blocks=2, heads=2, head_dim=8, injection_blocks=(1,))


@pytest.fixture(scope="session")
def tiny_config() -> ModelConfig:
    return TINY


@pytest.fixture(scope="session")
def dataset():
    return make_dataset(48, seed=0, pairs=4)


@pytest.fixture(scope="session")
def trained_model(dataset):
    model = build_model(TINY, seed=0)
    return train(model, training_set(dataset, TINY), epochs=2, lr=1e-3, seed=0, batch_size=16).model


@pytest.fixture
def fresh_model():
    return build_model(TINY, seed=1)


@pytest.fixture
def short_schedule() -> EditSchedule:
    return EditSchedule(steps=6, k_front=1, k_tail=1)


@pytest.fixture
def latent() -> torch.Tensor:
    g = torch.Generator().manual_seed(0)
    return torch.rand((TINY.grid_height, TINY.grid_width, TINY.channels), generator=g)


@dataclass
class Acceptance:
    model: VelocityNet
    dataset: SceneDataset
    history: List[float]
    final_loss: float


@pytest.fixture(scope="session")
def acceptance() -> Acceptance:
    """Default-sized model trained with the default recipe on the full synthetic set."""
    recipe = TrainConfig()
    data = make_dataset(DataConfig().count, seed=0, pairs=DataConfig().pairs)
    config = ModelConfig()
    result = train(
        build_model(config, seed=0),
        training_set(data, config),
        epochs=recipe.epochs,
        lr=recipe.lr,
        seed=0,
        batch_size=recipe.batch_size,
        cond_dropout=recipe.cond_dropout,
        adapter_prob=recipe.adapter_prob,
    )
    return Acceptance(result.model, data, result.history, result.final_loss)
