from __future__ import annotations
import json
import logging
from pathlib import Path
from typing import List

import click

from flowshape.commands.common import run_options, write_effective_config
from flowshape.commands.edit import edit_all_pairs
from flowshape.services import storage
from flowshape.services.config import RunConfig, apply_overrides
from flowshape.services.errors import ConfigurationError, RejectedInputError, StorageError
from flowshape.services.metrics import (
    EvalReport,
    PairScore,
    background_psnr,
    format_db,
    localization,
    mask_iou,
    psnr,
    subject_box,
)

log = logging.getLogger(__name__)


def _pair_dirs(results: Path) -> List[Path]:
    """Every edited pair under `results`: its own dir for a single `--pair` run, else `pairs/<id>`."""
    dirs = sorted(p for p in (results / "pairs").glob("*") if (p / "edited.ppm").exists())
    if (results / "edited.ppm").exists() and (results / "change_mask.pgm").exists():
        dirs.insert(0, results)
    return dirs


def score_pair(pair_dir: Path, patch: int) -> PairScore:
    manifest = storage.read_manifest(pair_dir / "manifest.txt")
    source = storage.load_ppm(pair_dir / "source.ppm")
    edited = storage.load_ppm(pair_dir / "edited.ppm")
    change = storage.load_pgm(pair_dir / "change_mask.pgm") > 0.5
    mask = storage.load_map_raw(pair_dir / "mask.raw")

    try:
        bg = background_psnr(edited, source, subject_box(change, patch))
    except RejectedInputError:
        bg = None
    inside = outside = None
    if (pair_dir / "fused.raw").exists():
        try:
            inside, outside = localization(storage.load_map_raw(pair_dir / "fused.raw"), change, patch)
        except RejectedInputError:
            pass
    return PairScore(
        pair_id=manifest.get("pair_id", pair_dir.name),
        psnr=psnr(edited, source),
        background_psnr=bg,
        iou=mask_iou(mask, change, patch),
        inside_divergence=inside,
        outside_divergence=outside,
    )


def evaluate_results(results: Path, patch: int) -> EvalReport:
    dirs = _pair_dirs(Path(results))
    if not dirs:
        raise StorageError(f"{results}: no edited pairs to evaluate")
    report = EvalReport(pairs=[score_pair(d, patch) for d in dirs])
    first = storage.read_manifest(dirs[0] / "manifest.txt")
    report.model_id = first.get("model_sha256", "unknown")
    report.schedule = {k.split(".", 1)[1]: v for k, v in first.items() if k.startswith("schedule.")}
    return report


def write_report(out: Path, report: EvalReport) -> None:
    storage.write_lines(out / "report.txt", report.to_lines())
    storage.write_lines(out / "report.json", [json.dumps(report.to_json_dict(), indent=2, sort_keys=True)])


def _summary(report: EvalReport) -> str:
    return " ".join(f"{k}={format_db(v)}" for k, v in report.aggregates().items())


@click.command(name="eval", help="Score an edit results directory: PSNR, background PSNR, mask IoU.")
@run_options
@click.argument("results", type=click.Path(file_okay=False))
def eval_cmd(config: RunConfig, out_given: bool, results: str):
    report = evaluate_results(Path(results), config.model.patch_size)
    out = Path(config.run.out) if out_given else Path(results)
    write_report(out, report)
    click.echo(f"✅ {len(report.pairs)} pairs: {_summary(report)}")


def parse_sweep(param: str) -> tuple:
    """`section.key=v1;v2;...` -> (dotted key, [raw values])."""
    if "=" not in param:
        raise ConfigurationError(f"sweep parameter {param!r} is not section.key=v1;v2")
    key, raw = param.split("=", 1)
    values = [v.strip() for v in raw.split(";") if v.strip()]
    if not values:
        raise ConfigurationError(f"sweep parameter {key} has no values")
    return key.strip(), values


@click.command(name="sweep", help="One edit + eval run over every held-out pair per value of a schedule field.")
@run_options
@click.option("--param", required=True, metavar="SECTION.KEY=V1;V2", help='e.g. "schedule.k_front=0;1;2;3;4".')
def sweep(config: RunConfig, out_given: bool, param: str):
    key, values = parse_sweep(param)
    if not key.startswith("schedule."):
        raise ConfigurationError(f"only schedule fields can be swept, got {key}")
    model = storage.load_checkpoint(Path(config.train.checkpoint))
    extra = {"model_sha256": storage.file_digest(Path(config.train.checkpoint))}
    dataset = storage.load_dataset(config.data.dir)
    out = Path(config.run.out)

    summary = [f"param={key}"]
    for raw in values:
        run = apply_overrides(config, [f"{key}={raw}"])
        run_dir = out / f"{key.split('.', 1)[1]}={raw.replace(',', '_')}"
        edit_all_pairs(model, dataset, run, run_dir, trajectories=False, extra=extra)
        report = evaluate_results(run_dir, config.model.patch_size)
        write_report(run_dir, report)
        write_effective_config(run_dir, run)
        summary.append(f"value={raw} {_summary(report)}")
        log.info("sweep: %s=%s %s", key, raw, _summary(report))
    storage.write_lines(out / "sweep.txt", summary)
    write_effective_config(out, config)
    click.echo("\n".join(summary))


def setup(cli: click.Group) -> None:
    cli.add_command(eval_cmd)
    cli.add_command(sweep)
