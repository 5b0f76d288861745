from __future__ import annotations

import pytest

from flowshape.commands.common import resolve_config
from flowshape.services import storage
from flowshape.services.config import (
    RunConfig,
    apply_overrides,
    config_hash,
    dump_config,
    load_config,
    parse_config,
)
from flowshape.services.editing import MaskOverride
from flowshape.services.errors import ConfigurationError, StorageError
from flowshape.services.solvers import SolverKind


def test_shipped_default_file_matches_the_defaults():
    assert load_config(storage.DEFAULT_CONFIG_FILE) == RunConfig()


def test_dump_parses_back():
    config = apply_overrides(RunConfig(), ["schedule.solver=euler", "schedule.injection_blocks=5", "run.seed=9"])
    assert parse_config(dump_config(config)) == config


def test_overrides_coerce_types():
    config = apply_overrides(
        RunConfig(),
        [
            "schedule.k_front=3",
            "schedule.adapter_strengths=1.0,2.0",
            "schedule.mask_override=zeros",
            "schedule.adapter_enabled=off",
        ],
    )
    s = config.schedule
    assert s.k_front == 3
    assert s.adapter_strengths == (1.0, 2.0)
    assert s.mask_override is MaskOverride.ZEROS
    assert s.adapter_enabled is False
    assert s.solver is SolverKind.SECOND_ORDER


def test_file_values_are_overridden_by_set():
    config = parse_config("[schedule]\nk_front = 1  # front\n[run]\nseed = 4\n")
    config = apply_overrides(config, ["schedule.k_front=3"])
    assert (config.schedule.k_front, config.run.seed) == (3, 4)


@pytest.mark.parametrize(
    "text",
    [
        "[nonsense]\nx = 1\n",
        "[schedule]\nwobble = 1\n",
        "[schedule]\nk_front = many\n",
        "[schedule]\nk_front = 20\nk_tail = 20\n",
        "[model]\nvocab_size = 5\n",
        "[model]\npatch_size = 4\n",
        "[schedule]\nadapter_strengths = 1.0\n",
        "not an ini file",
    ],
)
def test_invalid_configs_are_rejected(text):
    with pytest.raises(ConfigurationError):
        parse_config(text)


@pytest.mark.parametrize("item", ["k_front=3", "schedule.k_front", "schedule.nope=1"])
def test_malformed_overrides_are_rejected(item):
    with pytest.raises(ConfigurationError):
        apply_overrides(RunConfig(), [item])


def test_missing_config_file_is_a_storage_error(tmp_path):
    with pytest.raises(StorageError):
        load_config(tmp_path / "absent.cfg")


def test_hash_tracks_every_field():
    base = RunConfig()
    assert config_hash(base) == config_hash(RunConfig())
    assert config_hash(base) != config_hash(apply_overrides(base, ["schedule.tau=0.4"]))


def test_commands_without_config_read_the_shipped_file(tmp_path, monkeypatch):
    shipped = tmp_path / "default.cfg"
    shipped.write_text("[run]\nseed = 7\n", encoding="utf-8")
    monkeypatch.setattr(storage, "DEFAULT_CONFIG_FILE", shipped)
    assert resolve_config(None, None, None, []).run.seed == 7
    assert resolve_config(None, 3, None, ["schedule.k_front=1"]).run.seed == 3
