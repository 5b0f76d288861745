from __future__ import annotations
import logging
from dataclasses import replace
from pathlib import Path
from typing import Dict, List, Optional

import click

from flowshape.commands.common import manifest_header, run_options, write_effective_config
from flowshape.services import storage
from flowshape.services.config import RunConfig, section_fields
from flowshape.services.editing import EditResult, round_trip, run_edit
from flowshape.services.errors import ConfigurationError
from flowshape.services.metrics import psnr
from flowshape.services.network import VelocityNet
from flowshape.services.scenes import EditPair, SceneDataset, render
from flowshape.services.solvers import SolverKind

log = logging.getLogger(__name__)

ROUND_TRIP_DB = 30.0


def write_edit(out: Path, result: EditResult, config: RunConfig, extra: Dict[str, object], trajectories: bool) -> None:
    """Edited image, every Stage-2 divergence map, fused map, masks, trajectories and the manifest."""
    out = Path(out)
    files: List[str] = []

    def _map(name: str, values) -> None:
        storage.save_pgm(out / f"{name}.pgm", values)
        storage.save_map_raw(out / f"{name}.raw", values)
        files.extend([f"{name}.pgm", f"{name}.raw"])

    storage.save_ppm(out / "edited.ppm", result.image)
    files.append("edited.ppm")
    for d in result.divergences:
        peak = float(d.values.max())
        storage.save_pgm(out / "maps" / f"divergence_{d.step:02d}.pgm", d.values / peak if peak > 0 else d.values)
        storage.save_map_raw(out / "maps" / f"divergence_{d.step:02d}.raw", d.values)
        files.extend([f"maps/divergence_{d.step:02d}.pgm", f"maps/divergence_{d.step:02d}.raw"])
    if result.fused is not None:
        _map("fused", result.fused.values)
    _map("mask_soft", result.mask.soft)
    _map("mask", result.mask.binary)
    if trajectories:
        storage.save_trajectory(out / "inversion.traj", result.inversion)
        storage.save_trajectory(out / "denoising.traj", result.denoising)
        files.extend(["inversion.traj", "denoising.traj"])

    fields: Dict[str, object] = {**manifest_header(config), **extra, **result.manifest}
    fields.update({f"schedule.{k}": v for k, v in section_fields(config.schedule).items()})
    fields["outputs"] = ",".join(files)
    storage.write_manifest(out / "manifest.txt", fields)


def edit_pair(
    model: VelocityNet,
    pair: EditPair,
    dataset: SceneDataset,
    config: RunConfig,
    out: Path,
    trajectories: bool,
    extra: Optional[Dict[str, object]] = None,
) -> EditResult:
    source = render(pair.source)
    c_src = pair.source.condition_id(dataset.max_objects)
    c_tgt = pair.target.condition_id(dataset.max_objects)
    result = run_edit(source, c_src, c_tgt, config.schedule, model, seed=config.run.seed)
    storage.save_ppm(out / "source.ppm", source)
    storage.save_ppm(out / "target.ppm", render(pair.target))
    storage.save_pgm(out / "change_mask.pgm", pair.change_mask())
    write_edit(out, result, config, {**(extra or {}), "pair_id": pair.pair_id}, trajectories)
    return result


def edit_all_pairs(
    model: VelocityNet,
    dataset: SceneDataset,
    config: RunConfig,
    out: Path,
    trajectories: bool,
    extra: Optional[Dict[str, object]] = None,
) -> int:
    for pair in dataset.pairs:
        edit_pair(model, pair, dataset, config, Path(out) / "pairs" / pair.pair_id, trajectories, extra)
    log.info("edit_all_pairs: pairs=%d out=%s", len(dataset.pairs), out)
    return len(dataset.pairs)


@click.command(name="edit", help="Shape-aware edit of one image, one held-out pair, or every held-out pair.")
@run_options
@click.option("--source", type=click.Path(dir_okay=False), default=None, help="Source PPM image.")
@click.option("--c-src", type=int, default=None, help="Source condition id.")
@click.option("--c-tgt", type=int, default=None, help="Target condition id.")
@click.option("--pair", "pair_id", default=None, help="Held-out pair id from the dataset.")
@click.option("--all-pairs", is_flag=True, help="Edit every held-out pair into <out>/pairs/<id>.")
@click.option("--trajectories/--no-trajectories", default=None, help="Export both trajectory records.")
def edit(config, out_given: bool, source, c_src, c_tgt, pair_id, all_pairs, trajectories: Optional[bool]):
    modes = sum([source is not None, pair_id is not None, all_pairs])
    if modes != 1:
        raise ConfigurationError("give exactly one of --source, --pair, --all-pairs")
    # load before anything is written so a missing checkpoint leaves no partial outputs
    checkpoint = Path(config.train.checkpoint)
    model = storage.load_checkpoint(checkpoint)
    extra = {"model_sha256": storage.file_digest(checkpoint)}
    out = Path(config.run.out)

    if source is not None:
        if c_src is None or c_tgt is None:
            raise ConfigurationError("--source needs --c-src and --c-tgt")
        image = storage.load_ppm(Path(source))
        result = run_edit(image, c_src, c_tgt, config.schedule, model, seed=config.run.seed)
        storage.save_ppm(out / "source.ppm", image)
        write_edit(out, result, config, {**extra, "source": source}, True if trajectories is None else trajectories)
        click.echo(f"✅ edited image and {len(result.divergences)} divergence maps in {out}")
    else:
        dataset = storage.load_dataset(config.data.dir)
        if pair_id is not None:
            keep = True if trajectories is None else trajectories
            edit_pair(model, dataset.pair(pair_id), dataset, config, out, keep, extra)
            click.echo(f"✅ pair {pair_id} edited into {out}")
        else:
            count = edit_all_pairs(model, dataset, config, out, bool(trajectories), extra)
            click.echo(f"✅ {count} pairs edited into {out / 'pairs'}")
    write_effective_config(out, config)


@click.command(name="invert", help="Round-trip reconstruction check: second-order at N vs Euler at 2N (equal NFE).")
@run_options
@click.option("--limit", type=int, default=None, help="Only the first LIMIT held-out sources.")
def invert_cmd(config, out_given: bool, limit: Optional[int]):
    model = storage.load_checkpoint(Path(config.train.checkpoint))
    dataset = storage.load_dataset(config.data.dir)
    pairs = dataset.pairs[:limit] if limit else dataset.pairs
    base = replace(config.schedule, adapter_enabled=False)
    solvers = {
        "second_order": replace(base, solver=SolverKind.SECOND_ORDER),
        "euler_2n": replace(base, solver=SolverKind.EULER, steps=2 * base.steps),
    }
    out = Path(config.run.out)
    lines = []
    passed = {name: 0 for name in solvers}
    for pair in pairs:
        image = render(pair.source)
        cond = pair.source.condition_id(dataset.max_objects)
        row = [f"pair={pair.pair_id}"]
        for name, schedule in solvers.items():
            rebuilt, inversion, denoising = round_trip(model, image, cond, schedule)
            value = psnr(rebuilt, image)
            passed[name] += value >= ROUND_TRIP_DB
            row.append(f"{name}.psnr={value:.4f} {name}.nfe={inversion.total_nfe + denoising.total_nfe}")
        lines.append(" ".join(row))
    for name in solvers:
        lines.append(f"{name}.fraction_above_{ROUND_TRIP_DB:g}db={passed[name] / max(1, len(pairs)):.4f}")
    storage.write_lines(out / "round_trip.txt", lines)
    write_effective_config(out, config)
    click.echo("\n".join(lines[-len(solvers):]))


def setup(cli: click.Group) -> None:
    cli.add_command(edit)
    cli.add_command(invert_cmd)
