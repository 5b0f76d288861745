from __future__ import annotations
from dataclasses import replace
from pathlib import Path

import click

from flowshape.commands.common import manifest_header, run_options, write_effective_config
from flowshape.services import storage
from flowshape.services.scenes import make_dataset


@click.command(name="gen", help="Generate the synthetic scene dataset and held-out edit pairs.")
@run_options
def gen(config, out_given: bool):
    target = Path(config.run.out) if out_given else Path(config.data.dir)
    config = replace(config, data=replace(config.data, dir=str(target)))
    d = config.data
    dataset = make_dataset(d.count, config.run.seed, pairs=d.pairs, max_objects=d.max_objects, canvas=d.canvas)
    storage.save_dataset(target, dataset)
    write_effective_config(target, config)
    storage.write_manifest(
        target / "run_manifest.txt",
        {**manifest_header(config), "train_scenes": len(dataset.train), "held_out_pairs": len(dataset.pairs)},
    )
    click.echo(f"✅ {len(dataset.train)} scenes + {len(dataset.pairs)} edit pairs written to {target}")


def setup(cli: click.Group) -> None:
    cli.add_command(gen)
