from __future__ import annotations

import numpy as np
import pytest
import torch

from flowshape.services import storage
from flowshape.services.editing import run_edit
from flowshape.services.errors import StorageError
from flowshape.services.scenes import make_dataset, render
from flowshape.services.solvers import Direction, SolverKind


def test_checkpoint_reload_is_byte_and_behaviour_identical(tmp_path, fresh_model, latent):
    path = tmp_path / "model.ckpt"
    storage.save_checkpoint(path, fresh_model)
    loaded = storage.load_checkpoint(path)
    assert loaded.config == fresh_model.config
    assert storage.checkpoint_bytes(loaded) == path.read_bytes()
    assert torch.equal(loaded(latent[None], 0.3, 1), fresh_model(latent[None], 0.3, 1))


def test_checkpoint_starts_with_magic_and_version(tmp_path, fresh_model):
    path = tmp_path / "model.ckpt"
    storage.save_checkpoint(path, fresh_model)
    blob = path.read_bytes()
    assert blob[:8] == storage.CHECKPOINT_MAGIC
    assert blob[8:12] == (1).to_bytes(4, "little")


def test_bad_checkpoints_are_storage_errors(tmp_path, fresh_model):
    with pytest.raises(StorageError):
        storage.load_checkpoint(tmp_path / "absent.ckpt")
    wrong = tmp_path / "wrong.ckpt"
    wrong.write_bytes(b"NOTAMODEL" * 4)
    with pytest.raises(StorageError):
        storage.load_checkpoint(wrong)
    good = tmp_path / "good.ckpt"
    storage.save_checkpoint(good, fresh_model)
    truncated = tmp_path / "truncated.ckpt"
    truncated.write_bytes(good.read_bytes()[:-100])
    with pytest.raises(StorageError):
        storage.load_checkpoint(truncated)


def test_quantize_rounds_half_up_and_clips():
    assert storage.quantize([0.0, 0.5, 1.0, 1.7, -0.2]).tolist() == [0, 128, 255, 255, 0]


def test_pgm_holds_quantized_values(tmp_path):
    values = np.linspace(0.0, 1.0, 64).reshape(8, 8)
    storage.save_pgm(tmp_path / "m.pgm", values, upscale=4)
    loaded = storage.load_pgm(tmp_path / "m.pgm")
    assert loaded.shape == (32, 32)
    assert np.allclose(loaded[::4, ::4], storage.quantize(values) / 255.0)
    assert (tmp_path / "m.pgm").read_bytes().startswith(b"P5")


def test_ppm_keeps_images_within_one_level(tmp_path):
    image = render(make_dataset(3, seed=1, pairs=1).train[0])
    storage.save_ppm(tmp_path / "x.ppm", image)
    assert (tmp_path / "x.ppm").read_bytes().startswith(b"P6")
    assert np.abs(storage.load_ppm(tmp_path / "x.ppm") - image).max() <= 0.5 / 255 + 1e-6


def test_raw_maps_are_exact(tmp_path):
    values = np.random.default_rng(0).random((8, 8)).astype(np.float32)
    storage.save_map_raw(tmp_path / "m.raw", values)
    assert np.array_equal(storage.load_map_raw(tmp_path / "m.raw"), values)


def test_trajectory_file_records_header_and_latents(tmp_path, trained_model, dataset, short_schedule):
    p = dataset.pairs[0]
    result = run_edit(render(p.source), p.source.condition_id(2), p.target.condition_id(2), short_schedule, trained_model)
    storage.save_trajectory(tmp_path / "inv.traj", result.inversion)
    data = storage.load_trajectory_latents(tmp_path / "inv.traj")
    assert data["direction"] is Direction.INVERSION
    assert data["solver"] is SolverKind.SECOND_ORDER
    assert data["condition"] == p.source.condition_id(2)
    assert [s[3] for s in data["steps"]] == [2] * 6
    assert data["latents"].shape == (6, 3, 8, 8, 192)
    assert np.array_equal(data["latents"][-1, 1], result.inversion.final.numpy())


def test_dataset_directory_is_reproducible(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    storage.save_dataset(a, make_dataset(9, seed=2, pairs=2))
    storage.save_dataset(b, make_dataset(9, seed=2, pairs=2))
    assert storage.directory_digest(a) == storage.directory_digest(b)
    assert len(list((a / "images").glob("*.ppm"))) == 9
    assert (a / "pairs" / "pair-001" / "change_mask.pgm").exists()
    assert storage.load_dataset(a) == make_dataset(9, seed=2, pairs=2)


def test_manifest_keeps_order_and_values(tmp_path):
    storage.write_manifest(tmp_path / "m.txt", {"seed": 3, "b": "x=y", "a": 1.5})
    assert storage.read_manifest(tmp_path / "m.txt") == {"seed": "3", "b": "x=y", "a": "1.5"}
    assert storage.read_lines(tmp_path / "m.txt")[0] == "seed=3"
