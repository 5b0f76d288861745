from __future__ import annotations
import itertools
from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Dict, List, Optional, Tuple

import numpy as np

from flowshape.services.errors import RejectedInputError

SHAPE_KINDS = ("circle", "square", "triangle")

BACKGROUND_FLAT = 0
BACKGROUND_GRADIENT = 1
BACKGROUND_STRIPES = 2
BACKGROUND_SPECKLE = 3
BACKGROUNDS = (BACKGROUND_FLAT, BACKGROUND_GRADIENT, BACKGROUND_STRIPES, BACKGROUND_SPECKLE)

# Object geometry (pixels). Scale is the half-extent: radius, half side, half height.
MIN_SCALE, MAX_SCALE = 8, 14


@dataclass(frozen=True)
class SceneObject:
    kind: str            # circle | square | triangle
    cx: float
    cy: float
    scale: float
    intensity: float     # object fill in the intensity channel

    def bounds(self) -> Tuple[float, float, float, float]:
        return self.cx - self.scale, self.cy - self.scale, self.cx + self.scale, self.cy + self.scale

    def to_token(self) -> str:
        return f"{self.kind}:{self.cx:g}:{self.cy:g}:{self.scale:g}:{self.intensity:g}"

    @classmethod
    def from_token(cls, token: str) -> "SceneObject":
        kind, cx, cy, scale, intensity = token.split(":")
        return cls(kind, float(cx), float(cy), float(scale), float(intensity))


@dataclass(frozen=True)
class SceneSpec:
    objects: Tuple[SceneObject, ...] = ()
    canvas: int = 64
    background: int = BACKGROUND_FLAT
    level: float = 0.2       # background intensity
    seed: int = 0            # speckle texture seed

    def __post_init__(self) -> None:
        if self.background not in BACKGROUNDS:
            raise RejectedInputError(f"unknown background pattern {self.background}")
        for obj in self.objects:
            if obj.kind not in SHAPE_KINDS:
                raise RejectedInputError(f"unknown shape kind {obj.kind!r}")
            x0, y0, x1, y1 = obj.bounds()
            if obj.scale <= 0 or x0 < 0 or y0 < 0 or x1 > self.canvas or y1 > self.canvas:
                raise RejectedInputError(f"object {obj.to_token()} does not lie inside the {self.canvas}px canvas")

    @property
    def inventory(self) -> Tuple[str, ...]:
        return tuple(sorted(o.kind for o in self.objects))

    def condition_id(self, max_objects: int) -> int:
        return condition_id(self.inventory, max_objects)

    def to_fields(self) -> Dict[str, str]:
        return {
            "seed": str(self.seed),
            "canvas": str(self.canvas),
            "background": str(self.background),
            "level": f"{self.level:g}",
            "objects": ";".join(o.to_token() for o in self.objects) or "-",
        }

    @classmethod
    def from_fields(cls, fields: Dict[str, str]) -> "SceneSpec":
        raw = fields.get("objects", "-")
        objects = () if raw == "-" else tuple(SceneObject.from_token(t) for t in raw.split(";"))
        return cls(
            objects=objects,
            canvas=int(fields["canvas"]),
            background=int(fields["background"]),
            level=float(fields["level"]),
            seed=int(fields["seed"]),
        )


@dataclass(frozen=True)
class EditPair:
    pair_id: str
    source: SceneSpec
    target: SceneSpec
    changed: int           # index of the object whose kind changes

    def change_mask(self) -> np.ndarray:
        """Union of the changed object's source and target silhouettes."""
        canvas = self.source.canvas
        return silhouette(self.source.objects[self.changed], canvas) | silhouette(
            self.target.objects[self.changed], canvas
        )


@dataclass
class SceneDataset:
    train: List[SceneSpec] = field(default_factory=list)
    pairs: List[EditPair] = field(default_factory=list)
    max_objects: int = 2
    seed: int = 0

    def manifest_lines(self) -> List[str]:
        """One spec per line: `id=<name> role=<train|source|target> cond=<id> key=value ...`."""
        lines = [f"# flowshape dataset seed={self.seed} max_objects={self.max_objects}"]
        for i, spec in enumerate(self.train):
            lines.append(_line(f"train-{i:05d}", "train", spec, self.max_objects))
        for pair in self.pairs:
            lines.append(_line(pair.pair_id, "source", pair.source, self.max_objects, pair.changed))
            lines.append(_line(pair.pair_id, "target", pair.target, self.max_objects, pair.changed))
        return lines

    @classmethod
    def from_manifest(cls, lines: List[str]) -> "SceneDataset":
        data = cls()
        sources: Dict[str, Tuple[SceneSpec, int]] = {}
        for line in lines:
            line = line.strip()
            if line.startswith("#"):
                header = dict(kv.split("=", 1) for kv in line[1:].split() if "=" in kv)
                data.seed = int(header.get("seed", 0))
                data.max_objects = int(header.get("max_objects", 2))
                continue
            if not line:
                continue
            fields = dict(kv.split("=", 1) for kv in line.split())
            spec = SceneSpec.from_fields(fields)
            if fields["role"] == "train":
                data.train.append(spec)
            elif fields["role"] == "source":
                sources[fields["id"]] = (spec, int(fields.get("changed", 0)))
            else:
                source, changed = sources.pop(fields["id"])
                data.pairs.append(EditPair(fields["id"], source, spec, changed))
        return data

    def pair(self, pair_id: str) -> EditPair:
        for p in self.pairs:
            if p.pair_id == pair_id:
                return p
        raise RejectedInputError(f"no held-out pair named {pair_id!r}")


def _line(name: str, role: str, spec: SceneSpec, max_objects: int, changed: Optional[int] = None) -> str:
    fields = {"id": name, "role": role, "cond": str(spec.condition_id(max_objects))}
    if changed is not None:
        fields["changed"] = str(changed)
    fields.update(spec.to_fields())
    return " ".join(f"{k}={v}" for k, v in fields.items())


@lru_cache(maxsize=None)
def inventory_vocabulary(max_objects: int) -> Tuple[Tuple[str, ...], ...]:
    """Every sorted multiset of 1..max_objects shape kinds; the index is the condition id."""
    vocab: List[Tuple[str, ...]] = []
    for n in range(1, max_objects + 1):
        vocab.extend(itertools.combinations_with_replacement(SHAPE_KINDS, n))
    return tuple(vocab)


def condition_id(inventory: Tuple[str, ...], max_objects: int) -> int:
    try:
        return inventory_vocabulary(max_objects).index(tuple(sorted(inventory)))
    except ValueError:
        raise RejectedInputError(f"inventory {inventory} outside the {max_objects}-object vocabulary") from None


def silhouette(obj: SceneObject, canvas: int) -> np.ndarray:
    """Hard (non anti-aliased) coverage of pixel centres."""
    ys, xs = np.mgrid[0:canvas, 0:canvas].astype(np.float64) + 0.5
    dx, dy = xs - obj.cx, ys - obj.cy
    s = obj.scale
    if obj.kind == "circle":
        return dx * dx + dy * dy <= s * s
    if obj.kind == "square":
        return (np.abs(dx) <= s) & (np.abs(dy) <= s)
    # upright isosceles triangle: apex at the top edge, base on the bottom edge
    depth = dy + s
    return (depth >= 0) & (depth <= 2 * s) & (np.abs(dx) <= depth / 2)


def _background(spec: SceneSpec, seed: int) -> np.ndarray:
    n = spec.canvas
    xs = np.arange(n, dtype=np.float64)[None, :].repeat(n, axis=0)
    if spec.background == BACKGROUND_GRADIENT:
        return spec.level * (0.5 + xs / n)
    if spec.background == BACKGROUND_STRIPES:
        return spec.level + 0.08 * ((xs // 8) % 2)
    if spec.background == BACKGROUND_SPECKLE:
        rng = np.random.default_rng(seed)
        return np.clip(spec.level + 0.05 * rng.standard_normal((n, n)), 0.0, 1.0)
    return np.full((n, n), spec.level)


def render(spec: SceneSpec, seed: Optional[int] = None) -> np.ndarray:
    """(3, canvas, canvas) float32 image: intensity, x ramp, y ramp, all in [0, 1]."""
    seed = spec.seed if seed is None else seed
    intensity = _background(spec, seed)
    for obj in spec.objects:
        intensity = np.where(silhouette(obj, spec.canvas), obj.intensity, intensity)
    ramp = np.linspace(0.0, 1.0, spec.canvas)
    x_ramp = np.broadcast_to(ramp[None, :], intensity.shape)
    y_ramp = np.broadcast_to(ramp[:, None], intensity.shape)
    return np.stack([intensity, x_ramp, y_ramp]).astype(np.float32)


def _random_object(rng: np.random.Generator, kind: str, canvas: int) -> SceneObject:
    scale = int(rng.integers(MIN_SCALE, MAX_SCALE + 1))
    cx = int(rng.integers(scale, canvas - scale + 1))
    cy = int(rng.integers(scale, canvas - scale + 1))
    intensity = round(float(rng.uniform(0.6, 1.0)), 2)
    return SceneObject(kind, cx, cy, scale, intensity)


def _overlaps(a: SceneObject, others: List[SceneObject]) -> bool:
    ax0, ay0, ax1, ay1 = a.bounds()
    for b in others:
        bx0, by0, bx1, by1 = b.bounds()
        if ax0 < bx1 and bx0 < ax1 and ay0 < by1 and by0 < ay1:
            return True
    return False


def random_scene(rng: np.random.Generator, first_kind: str, n_objects: int, canvas: int) -> SceneSpec:
    kinds = [first_kind] + [SHAPE_KINDS[int(rng.integers(len(SHAPE_KINDS)))] for _ in range(n_objects - 1)]
    objects: List[SceneObject] = []
    for kind in kinds:
        for _ in range(100):
            obj = _random_object(rng, kind, canvas)
            if not _overlaps(obj, objects):
                objects.append(obj)
                break
    return SceneSpec(
        objects=tuple(objects),
        canvas=canvas,
        background=int(rng.integers(len(BACKGROUNDS))),
        level=round(float(rng.uniform(0.05, 0.3)), 2),
        seed=int(rng.integers(2**31 - 1)),
    )


def make_dataset(count: int, seed: int, pairs: int = 50, max_objects: int = 2, canvas: int = 64) -> SceneDataset:
    """Training scenes plus held-out edit pairs that change one object's shape in place.

    Shape kinds cycle over the training set and the object count cycles over
    1..max_objects, so every kind and inventory size is covered evenly.
    """
    if count <= 0:
        raise RejectedInputError(f"dataset count must be positive, got {count}")
    if max_objects < 1:
        raise RejectedInputError("max_objects must be at least 1")
    train_rng = np.random.default_rng([seed, 0])
    train: List[SceneSpec] = []
    for i in range(count):
        kind = SHAPE_KINDS[i % len(SHAPE_KINDS)]
        n_objects = 1 + (i // len(SHAPE_KINDS)) % max_objects
        train.append(random_scene(train_rng, kind, n_objects, canvas))

    seen = set(train)
    pair_rng = np.random.default_rng([seed, 1])
    held_out: List[EditPair] = []
    while len(held_out) < pairs:
        k = len(held_out)
        source_kind = SHAPE_KINDS[k % len(SHAPE_KINDS)]
        source = random_scene(pair_rng, source_kind, 1 + (k // len(SHAPE_KINDS)) % max_objects, canvas)
        target_kind = SHAPE_KINDS[(k + 1 + (k // len(SHAPE_KINDS)) % 2) % len(SHAPE_KINDS)]
        changed_obj = replace(source.objects[0], kind=target_kind)
        target = replace(source, objects=(changed_obj,) + source.objects[1:])
        if source in seen or target in seen:
            continue
        held_out.append(EditPair(f"pair-{k:03d}", source, target, 0))
    return SceneDataset(train, held_out, max_objects, seed)
