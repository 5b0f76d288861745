"""Every on-disk format the CLI reads or writes.

Binary files share one header discipline: an 8-byte magic, a little-endian
uint32 version, a shape header, then little-endian float32 payload.

Checkpoint (`FSCKPT`): config ints (grid_height, grid_width, patch_size,
image_channels, blocks, heads, head_dim, vocab_size, adapter_branches,
mlp_ratio, n_injection, *injection_blocks), tensor count, then per tensor
its ndim and dims; the payload follows in `state_dict()` order
(patch_in, pos, time_mlp, cond_embed, blocks 0..n-1, adapters, norm_out, head).

Trajectory (`FSTRAJ`): direction, solver, condition (-1 when none), step
count, latent shape, then per step in traversal order: index, t, t_next,
nfe (header) and before/after/velocity latents (payload).

Map (`FSMAP`): ndim, dims, payload.
"""
from __future__ import annotations
import hashlib
import io
import struct
from pathlib import Path
from typing import Dict, Iterable, List, Tuple

import numpy as np
import torch
from PIL import Image

from flowshape.services.errors import StorageError
from flowshape.services.network import ModelConfig, VelocityNet
from flowshape.services.scenes import SceneDataset, render
from flowshape.services.solvers import Direction, SolverKind, TrajectoryRecord

# src/data ships the documented default config
DATA_DIR = Path(__file__).resolve().parents[2] / "data"
DEFAULT_CONFIG_FILE = DATA_DIR / "default.cfg"

CHECKPOINT_MAGIC = b"FSCKPT\0\0"
TRAJECTORY_MAGIC = b"FSTRAJ\0\0"
MAP_MAGIC = b"FSMAP\0\0\0"
FORMAT_VERSION = 1

_DIRECTIONS = (Direction.INVERSION, Direction.DENOISING)
_SOLVERS = (SolverKind.EULER, SolverKind.SECOND_ORDER)


def _u32(*values: int) -> bytes:
    return struct.pack(f"<{len(values)}I", *values)


def _floats(t) -> bytes:
    return np.ascontiguousarray(np.asarray(t, dtype="<f4")).tobytes()


class _Reader:
    def __init__(self, blob: bytes, path: Path):
        self.blob = blob
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise StorageError(f"{self.path}: truncated file")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self, n: int = 1) -> Tuple[int, ...]:
        return struct.unpack(f"<{n}I", self.take(4 * n))

    def f64(self) -> float:
        return struct.unpack("<d", self.take(8))[0]

    def floats(self, shape: Tuple[int, ...]) -> np.ndarray:
        count = int(np.prod(shape)) if shape else 1
        return np.frombuffer(self.take(4 * count), dtype="<f4").reshape(shape).astype(np.float32)


def _open(path: Path, magic: bytes) -> _Reader:
    path = Path(path)
    if not path.exists():
        raise StorageError(f"{path}: file not found")
    reader = _Reader(path.read_bytes(), path)
    if reader.take(len(magic)) != magic:
        kind = magic.rstrip(b"\0").decode()
        raise StorageError(f"{path}: not a {kind} file")
    (version,) = reader.u32()
    if version != FORMAT_VERSION:
        raise StorageError(f"{path}: unsupported version {version}")
    return reader


def _write(path: Path, blob: bytes) -> None:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(blob)
    except OSError as e:
        raise StorageError(f"{path}: {e}") from e


# ---------- checkpoints ----------

def _config_ints(cfg: ModelConfig) -> List[int]:
    return [
        cfg.grid_height, cfg.grid_width, cfg.patch_size, cfg.image_channels, cfg.blocks,
        cfg.heads, cfg.head_dim, cfg.vocab_size, cfg.adapter_branches, cfg.mlp_ratio,
        len(cfg.injection_blocks), *cfg.injection_blocks,
    ]


def checkpoint_bytes(model: VelocityNet) -> bytes:
    state = model.state_dict()
    out = io.BytesIO()
    out.write(CHECKPOINT_MAGIC)
    out.write(_u32(FORMAT_VERSION))
    out.write(_u32(*_config_ints(model.config)))
    out.write(_u32(len(state)))
    for tensor in state.values():
        out.write(_u32(tensor.ndim, *tensor.shape))
    for tensor in state.values():
        out.write(_floats(tensor.detach().cpu().numpy()))
    return out.getvalue()


def save_checkpoint(path: Path, model: VelocityNet) -> None:
    _write(path, checkpoint_bytes(model))


def load_checkpoint(path: Path) -> VelocityNet:
    r = _open(path, CHECKPOINT_MAGIC)
    gh, gw, patch, ch, blocks, heads, hd, vocab, branches, mlp, n_inj = r.u32(11)
    injection = r.u32(n_inj) if n_inj else ()
    config = ModelConfig(gh, gw, patch, ch, blocks, heads, hd, vocab, tuple(injection), branches, mlp)
    model = VelocityNet(config)
    state = model.state_dict()
    (count,) = r.u32()
    if count != len(state):
        raise StorageError(f"{path}: {count} tensors, model expects {len(state)}")
    shapes = []
    for name, tensor in state.items():
        (ndim,) = r.u32()
        shape = r.u32(ndim) if ndim else ()
        if tuple(shape) != tuple(tensor.shape):
            raise StorageError(f"{path}: tensor {name} has shape {shape}, expected {tuple(tensor.shape)}")
        shapes.append(shape)
    loaded = {name: torch.from_numpy(r.floats(shape)) for name, shape in zip(state, shapes)}
    model.load_state_dict(loaded)
    model.eval()
    return model


# ---------- trajectories ----------

def save_trajectory(path: Path, record: TrajectoryRecord) -> None:
    shape = tuple(record.start.shape)
    out = io.BytesIO()
    out.write(TRAJECTORY_MAGIC)
    out.write(_u32(FORMAT_VERSION))
    condition = -1 if record.condition is None else record.condition
    out.write(_u32(_DIRECTIONS.index(record.direction), _SOLVERS.index(record.solver)))
    out.write(struct.pack("<i", condition))
    out.write(_u32(len(record.steps), len(shape), *shape))
    for s in record.steps:
        out.write(_u32(s.index) + struct.pack("<dd", s.t, s.t_next) + _u32(s.nfe))
    for s in record.steps:
        for t in (s.before, s.after, s.velocity):
            out.write(_floats(t.detach().cpu().numpy()))
    _write(path, out.getvalue())


def load_trajectory_latents(path: Path) -> Dict[str, object]:
    """Header fields plus the (steps, 3, *shape) latent payload."""
    r = _open(path, TRAJECTORY_MAGIC)
    direction, solver = r.u32(2)
    (condition,) = struct.unpack("<i", r.take(4))
    steps, ndim = r.u32(2)
    shape = r.u32(ndim)
    header = []
    for _ in range(steps):
        (index,) = r.u32()
        t = r.f64()
        t_next = r.f64()
        (nfe,) = r.u32()
        header.append((index, t, t_next, nfe))
    payload = r.floats((steps, 3, *shape))
    return {
        "direction": _DIRECTIONS[direction],
        "solver": _SOLVERS[solver],
        "condition": None if condition < 0 else condition,
        "steps": header,
        "latents": payload,
    }


# ---------- maps and images ----------

def save_map_raw(path: Path, values) -> None:
    arr = np.asarray(values, dtype=np.float32)
    _write(path, MAP_MAGIC + _u32(FORMAT_VERSION) + _u32(arr.ndim, *arr.shape) + _floats(arr))


def load_map_raw(path: Path) -> np.ndarray:
    r = _open(path, MAP_MAGIC)
    (ndim,) = r.u32()
    return r.floats(r.u32(ndim))


def quantize(values) -> np.ndarray:
    """[0, 1] -> uint8, rounding half up."""
    arr = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)
    return np.floor(arr * 255.0 + 0.5).astype(np.uint8)


def save_pgm(path: Path, values, upscale: int = 1) -> None:
    arr = quantize(values)
    if upscale > 1:
        arr = arr.repeat(upscale, axis=0).repeat(upscale, axis=1)
    _save_image(path, Image.fromarray(arr))


def save_ppm(path: Path, image) -> None:
    """Channel-first (3, H, W) float image in [0, 1] -> binary 8-bit PPM."""
    arr = quantize(np.moveaxis(np.asarray(image), 0, -1))
    _save_image(path, Image.fromarray(arr))


def _save_image(path: Path, image: Image.Image) -> None:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        image.save(path, format="PPM")
    except OSError as e:
        raise StorageError(f"{path}: {e}") from e


def load_ppm(path: Path) -> np.ndarray:
    arr = _load_image(path, "RGB")
    return np.moveaxis(arr, -1, 0).astype(np.float32) / 255.0


def load_pgm(path: Path) -> np.ndarray:
    return _load_image(path, "L").astype(np.float32) / 255.0


def _load_image(path: Path, mode: str) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise StorageError(f"{path}: file not found")
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert(mode))
    except OSError as e:
        raise StorageError(f"{path}: {e}") from e


# ---------- manifests ----------

def write_manifest(path: Path, fields: Dict[str, object]) -> None:
    """Plain-text `key=value` lines, in insertion order."""
    lines = [f"{k}={v}" for k, v in fields.items()]
    write_lines(path, lines)


def read_manifest(path: Path) -> Dict[str, str]:
    out: Dict[str, str] = {}
    for line in read_lines(path):
        if "=" in line and not line.startswith("#"):
            k, v = line.split("=", 1)
            out[k.strip()] = v.strip()
    return out


def write_lines(path: Path, lines: Iterable[str]) -> None:
    _write(path, ("\n".join(lines) + "\n").encode("utf-8"))


def read_lines(path: Path) -> List[str]:
    path = Path(path)
    if not path.exists():
        raise StorageError(f"{path}: file not found")
    return path.read_text(encoding="utf-8").splitlines()


def file_digest(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def directory_digest(root: Path) -> str:
    """SHA-256 over relative paths and contents of every file under `root`."""
    root = Path(root)
    h = hashlib.sha256()
    for p in sorted(q for q in root.rglob("*") if q.is_file()):
        h.update(str(p.relative_to(root)).encode())
        h.update(p.read_bytes())
    return h.hexdigest()


# ---------- datasets ----------

def save_dataset(root: Path, dataset: SceneDataset) -> None:
    """manifest.txt plus rendered images and each held-out pair's ground truth."""
    root = Path(root)
    write_lines(root / "manifest.txt", dataset.manifest_lines())
    for i, spec in enumerate(dataset.train):
        save_ppm(root / "images" / f"train-{i:05d}.ppm", render(spec))
    for pair in dataset.pairs:
        pair_dir = root / "pairs" / pair.pair_id
        save_ppm(pair_dir / "source.ppm", render(pair.source))
        save_ppm(pair_dir / "target.ppm", render(pair.target))
        save_pgm(pair_dir / "change_mask.pgm", pair.change_mask())


def load_dataset(root: Path) -> SceneDataset:
    return SceneDataset.from_manifest(read_lines(Path(root) / "manifest.txt"))
