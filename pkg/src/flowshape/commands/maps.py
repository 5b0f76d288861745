from __future__ import annotations
from pathlib import Path
from typing import Optional

import click
import numpy as np

from flowshape.services import storage


def render_map(raw: Path, out: Path, upscale: int = 8, normalize: bool = False) -> np.ndarray:
    """Raw map file -> upscaled 8-bit PGM. Divergence maps are unbounded; `normalize` rescales by the peak."""
    values = storage.load_map_raw(raw)
    if normalize:
        peak = float(values.max()) if values.size else 0.0
        values = values / peak if peak > 0 else np.zeros_like(values)
    storage.save_pgm(out, values, upscale=upscale)
    return values


@click.command(name="maps", help="Convert raw map files (.raw) into upscaled PGM images.")
@click.argument("raws", nargs=-1, required=True, type=click.Path(dir_okay=False))
@click.option("--out", "out_dir", type=click.Path(file_okay=False), default=None, help="Defaults next to each input.")
@click.option("--upscale", type=click.IntRange(min=1), default=8, show_default=True, help="Pixels per token.")
@click.option("--normalize", is_flag=True, help="Divide by the map's peak first.")
def maps(raws, out_dir: Optional[str], upscale: int, normalize: bool):
    for raw in raws:
        raw = Path(raw)
        target = (Path(out_dir) if out_dir else raw.parent) / f"{raw.stem}_x{upscale}.pgm"
        render_map(raw, target, upscale, normalize)
        click.echo(f"✅ {target}")


def setup(cli: click.Group) -> None:
    cli.add_command(maps)
