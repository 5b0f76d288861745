from __future__ import annotations
import logging
from dataclasses import replace
from pathlib import Path
from typing import Optional

import click
import torch

from flowshape.commands.common import manifest_header, run_options, write_effective_config
from flowshape.services import storage
from flowshape.services.editing import encode_image
from flowshape.services.flow import TrainingSet, train
from flowshape.services.network import ModelConfig, adapter_input_from_image, build_model
from flowshape.services.scenes import SceneDataset, render

log = logging.getLogger(__name__)


def training_set(dataset: SceneDataset, model_config: ModelConfig) -> TrainingSet:
    """Render every training scene into latents, condition ids and adapter edge maps."""
    latents, conditions, edges = [], [], []
    for spec in dataset.train:
        image = render(spec)
        latents.append(encode_image(image, model_config.patch_size))
        conditions.append(spec.condition_id(dataset.max_objects))
        edges.append(adapter_input_from_image(torch.from_numpy(image), model_config.patch_size))
    return TrainingSet(torch.stack(latents), torch.tensor(conditions, dtype=torch.long), torch.stack(edges))


@click.command(name="train", help="Train the velocity network with conditional flow matching.")
@run_options
@click.option("--resume", type=click.Path(dir_okay=False), default=None, help="Continue from this checkpoint.")
def train_cmd(config, out_given: bool, resume: Optional[str]):
    target = Path(config.run.out) if out_given else Path(config.train.checkpoint).parent
    checkpoint = target / "model.ckpt"
    config = replace(config, train=replace(config.train, checkpoint=str(checkpoint)))
    tc = config.train

    dataset = storage.load_dataset(config.data.dir)
    data = training_set(dataset, config.model)
    model = storage.load_checkpoint(Path(resume)) if resume else build_model(config.model, config.run.seed)

    result = train(
        model,
        data,
        epochs=tc.epochs,
        lr=tc.lr,
        seed=config.run.seed,
        batch_size=tc.batch_size,
        cond_dropout=tc.cond_dropout,
        adapter_prob=tc.adapter_prob,
    )
    accepted = result.final_loss < tc.accept_loss if result.history else True
    if not accepted:
        log.warning("train: final_loss=%.5f above accept_loss=%.5f", result.final_loss, tc.accept_loss)

    storage.save_checkpoint(checkpoint, result.model)
    storage.write_lines(target / "loss_history.txt", [repr(v) for v in result.history])
    write_effective_config(target, config)
    batches = -(-len(data) // tc.batch_size)
    storage.write_manifest(
        target / "manifest.txt",
        {
            **manifest_header(config),
            "epochs": tc.epochs,
            "batches_per_epoch": batches,
            "history_length": len(result.history),
            "final_loss": repr(result.final_loss),
            "accept_loss": tc.accept_loss,
            "accepted": accepted,
            "resumed_from": resume or "none",
            "checkpoint": checkpoint,
            "checkpoint_sha256": storage.file_digest(checkpoint),
        },
    )
    click.echo(f"✅ checkpoint {checkpoint} (final loss {result.final_loss:.5f}, accepted={accepted})")


def setup(cli: click.Group) -> None:
    cli.add_command(train_cmd)
