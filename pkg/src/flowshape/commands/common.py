from __future__ import annotations
import functools
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

import click

from flowshape.services import storage
from flowshape.services.config import RunConfig, apply_overrides, config_hash, dump_config, load_config


def run_options(f):
    """--config / --seed / --out / --set, shared by every command."""

    @click.option("--config", "config_path", type=click.Path(dir_okay=False), help="Config file (INI sections).")
    @click.option("--seed", type=int, default=None, help="Overrides run.seed.")
    @click.option("--out", "out_dir", type=click.Path(file_okay=False), default=None, help="Output directory.")
    @click.option("--set", "overrides", multiple=True, metavar="SECTION.KEY=VALUE", help="Per-field override.")
    @functools.wraps(f)
    def wrapper(*args, config_path, seed, out_dir, overrides, **kwargs):
        config = resolve_config(config_path, seed, out_dir, overrides)
        return f(*args, config=config, out_given=out_dir is not None, **kwargs)

    return wrapper


def resolve_config(
    config_path: Optional[str], seed: Optional[int], out_dir: Optional[str], overrides: Sequence[str]
) -> RunConfig:
    """defaults < config file < --seed/--out < --set. Without --config the shipped default.cfg is read."""
    config = load_config(config_path if config_path is not None else storage.DEFAULT_CONFIG_FILE)
    run = config.run
    if seed is not None:
        run = replace(run, seed=seed)
    if out_dir is not None:
        run = replace(run, out=out_dir)
    config = replace(config, run=run)
    return apply_overrides(config, overrides)


def write_effective_config(out: Path, config: RunConfig) -> None:
    storage.write_lines(Path(out) / "config.cfg", dump_config(config).splitlines())


def manifest_header(config: RunConfig) -> dict:
    return {"seed": config.run.seed, "config_hash": config_hash(config)}
