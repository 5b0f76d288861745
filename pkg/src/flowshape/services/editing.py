from __future__ import annotations
import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, NamedTuple, Optional, Tuple

import numpy as np
import torch
from torch import Tensor

from flowshape.services import tdm
from flowshape.services.errors import ConfigurationError, IntegrationError, RejectedInputError
from flowshape.services.network import (
    CAPTURE,
    INJECT_FULL,
    KV,
    PASSTHROUGH,
    AdapterInput,
    AttentionHook,
    KVCache,
    VelocityNet,
    adapter_input_from_image,
    apply_guidance,
    blend_kv,
)
from flowshape.services.solvers import (
    Direction,
    SolverKind,
    StepRecord,
    TimeGrid,
    TrajectoryRecord,
    integrate,
)

log = logging.getLogger(__name__)

__all__ = [
    "EditSchedule", "EditResult", "Stage", "MaskOverride", "Branch", "EvalSlot", "capture_slots",
    "stage_for_step", "blend_kv",
    "encode_image", "decode_latent", "invert", "reconstruct", "round_trip", "sample", "run_edit",
]


class Stage(int, Enum):
    STABILIZE = 1    # full source injection, M_S = 0
    GUIDED = 2       # TDM-guided blending
    RELEASE = 3      # target features only, M_S = 1


class MaskOverride(str, Enum):
    NONE = "none"
    ZEROS = "zeros"
    ONES = "ones"


@dataclass(frozen=True)
class EditSchedule:
    steps: int = 28
    k_front: int = 2
    k_tail: int = 4
    tau: float = tdm.DEFAULT_TAU
    sigma: float = tdm.DEFAULT_SIGMA
    guidance: float = 2.0
    injection_blocks: Optional[Tuple[int, ...]] = None   # None: the model's injection blocks
    adapter_interval: Tuple[float, float] = (0.1, 0.7)
    adapter_strengths: Tuple[float, ...] = (2.5, 3.5)
    adapter_enabled: bool = True
    solver: SolverKind = SolverKind.SECOND_ORDER
    mask_override: MaskOverride = MaskOverride.NONE

    def __post_init__(self) -> None:
        if self.steps < 1:
            raise ConfigurationError(f"steps must be positive, got {self.steps}")
        if self.k_front < 0 or self.k_tail < 0 or self.k_front + self.k_tail > self.steps:
            raise ConfigurationError(
                f"k_front={self.k_front} + k_tail={self.k_tail} must not exceed steps={self.steps}"
            )
        lo, hi = self.adapter_interval
        if not 0 <= lo < hi <= 1:
            raise ConfigurationError(f"adapter interval {self.adapter_interval} must satisfy 0 <= lo < hi <= 1")
        if self.guidance < 0:
            raise ConfigurationError(f"guidance scale must be >= 0, got {self.guidance}")
        if not 0 < self.tau < 1:
            raise ConfigurationError(f"tau must lie in (0, 1), got {self.tau}")
        if self.sigma < 0:
            raise ConfigurationError(f"sigma must be >= 0, got {self.sigma}")

    def stage_bounds(self) -> Tuple[int, int]:
        """First Stage-2 step and first Stage-3 step."""
        return self.k_front, self.steps - self.k_tail

    def adapter_active(self, step: int) -> bool:
        lo, hi = self.adapter_interval
        return self.adapter_enabled and lo <= step / self.steps <= hi

    def blocks_for(self, model: VelocityNet) -> Tuple[int, ...]:
        blocks = self.injection_blocks if self.injection_blocks is not None else model.config.injection_blocks
        if any(b < 0 or b >= model.config.blocks for b in blocks):
            raise ConfigurationError(f"injection blocks {blocks} outside the model's {model.config.blocks} blocks")
        return tuple(blocks)


def stage_for_step(step: int, schedule: EditSchedule) -> Stage:
    if not 0 <= step < schedule.steps:
        raise RejectedInputError(f"step {step} outside [0, {schedule.steps})")
    front, tail = schedule.stage_bounds()
    if step < front:
        return Stage.STABILIZE
    if step < tail:
        return Stage.GUIDED
    return Stage.RELEASE


@dataclass
class EditResult:
    latent: Tensor                       # (H, W, C)
    image: np.ndarray                    # (3, H_px, W_px) in [0, 1]
    divergences: List[tdm.DivergenceMap]
    fused: Optional[tdm.FusedMap]
    mask: tdm.EditMask
    inversion: TrajectoryRecord
    denoising: TrajectoryRecord
    manifest: Dict[str, str] = field(default_factory=dict)


def encode_image(image, patch: int) -> Tensor:
    """Channel-first pixels (C, H, W) -> patch tokens (H/p, W/p, p*p*C). Identity up to layout."""
    img = torch.as_tensor(np.asarray(image), dtype=torch.float32)
    c, h, w = img.shape
    if h % patch or w % patch:
        raise RejectedInputError(f"image {h}x{w} is not a multiple of the {patch}px patch")
    tokens = img.reshape(c, h // patch, patch, w // patch, patch).permute(1, 3, 2, 4, 0)
    return tokens.reshape(h // patch, w // patch, patch * patch * c).contiguous()


def decode_latent(latent: Tensor, patch: int, channels: int = 3) -> np.ndarray:
    gh, gw, _ = latent.shape
    img = latent.reshape(gh, gw, patch, patch, channels).permute(4, 0, 2, 1, 3)
    return img.reshape(channels, gh * patch, gw * patch).clamp(0.0, 1.0).detach().numpy()


class Branch(str, Enum):
    COND = "cond"
    UNCOND = "uncond"


class EvalSlot(NamedTuple):
    """Where on the time grid one evaluation happens, counted in denoising order.

    `point` k is t_k = 1 - k/N, or the midpoint of [t_{k+1}, t_k] when `midpoint`.
    Inversion and denoising evaluations at the same slot share the same t.
    """

    point: int
    midpoint: bool
    branch: Branch


def capture_slots(schedule: EditSchedule) -> List[EvalSlot]:
    """Every slot a denoising run over `schedule` can read from the inversion cache."""
    points = [(k, False) for k in range(schedule.steps)]
    if schedule.solver is SolverKind.SECOND_ORDER:
        points += [(k, True) for k in range(schedule.steps)]
    branches = (Branch.COND,) if schedule.guidance == 1.0 else (Branch.COND, Branch.UNCOND)
    return [EvalSlot(k, mid, b) for k, mid in points for b in branches]


class _GuidedVelocity:
    """Guided velocity of one trajectory, with per-step hooks, injected K/V and adapter.

    Subclasses place each evaluation on the grid (`_point`) and decide what it
    injects and captures. Both guidance branches run with the same hooks.
    """

    def __init__(self, model: VelocityNet, cond: int, guidance: float):
        self.model = model
        self.cond = cond
        self.guidance = guidance
        self.hooks: Dict[int, AttentionHook] = {}
        self.adapter: Optional[AdapterInput] = None
        self.evals_in_step = 0

    def end_step(self, record: StepRecord) -> None:
        pass

    @torch.no_grad()
    def __call__(self, x: Tensor, t: float) -> Tensor:
        point, midpoint = self._point()
        v = self._branch(x, t, self.cond, EvalSlot(point, midpoint, Branch.COND))
        if self.guidance != 1.0:
            v_uncond = self._branch(x, t, self.model.config.null_id, EvalSlot(point, midpoint, Branch.UNCOND))
            v = apply_guidance(v, v_uncond, self.guidance)
        self.evals_in_step += 1
        self._after_eval(v[0], t)
        return v[0]

    def _branch(self, x: Tensor, t: float, cond: int, slot: EvalSlot) -> Tensor:
        injects = any(h.injects for h in self.hooks.values())
        external = self._external(slot) if injects else {}
        v, captured = self.model.evaluate(x[None], t, cond, self.hooks, external, self.adapter)
        if captured:
            self._captured(slot, captured)
        return v

    def _point(self) -> Tuple[int, bool]:
        return 0, False

    def _external(self, slot: EvalSlot) -> Dict[int, KV]:
        return {}

    def _captured(self, slot: EvalSlot, kv: Dict[int, KV]) -> None:
        pass

    def _after_eval(self, v: Tensor, t: float) -> None:
        pass


class _PlainVelocity(_GuidedVelocity):
    def __init__(self, model: VelocityNet, cond: int, schedule: EditSchedule, edge_map: Optional[Tensor]):
        super().__init__(model, cond, schedule.guidance)
        self.schedule = schedule
        self.edge_map = edge_map

    def begin_step(self, index: int, t: float, t_next: float) -> None:
        self.evals_in_step = 0
        if self.edge_map is not None and self.schedule.adapter_active(index):
            self.adapter = AdapterInput(self.edge_map, self.schedule.adapter_strengths)
        else:
            self.adapter = None


class _InversionVelocity(_GuidedVelocity):
    """Inversion step i runs from t = i/N: its first evaluation sits on grid point N-i,
    its half-step evaluation on the midpoint of interval N-1-i."""

    def __init__(self, model: VelocityNet, cond: int, schedule: EditSchedule, blocks: Tuple[int, ...]):
        super().__init__(model, cond, schedule.guidance)
        self.steps = schedule.steps
        self.cache = KVCache()
        self.hooks = {b: CAPTURE for b in blocks}
        self.step = 0

    def begin_step(self, index: int, t: float, t_next: float) -> None:
        self.step = index
        self.evals_in_step = 0

    def _point(self) -> Tuple[int, bool]:
        if self.evals_in_step == 0:
            return self.steps - self.step, False
        return self.steps - 1 - self.step, True

    def _captured(self, slot: EvalSlot, kv: Dict[int, KV]) -> None:
        for b, entry in kv.items():
            self.cache.record(slot, b, entry)

    def terminal(self, x: Tensor) -> Tensor:
        """One extra evaluation at the noise end, grid point 0 (t = 1)."""
        self.begin_step(self.steps, 1.0, 1.0)
        return self(x, 1.0)


class _DenoisingVelocity(_GuidedVelocity):
    """Denoising trajectory steered by the three-stage schedule.

    Every evaluation injects the K/V the inversion captured at the same t and
    guidance branch. The source velocity replayed for step s is the inversion's
    first evaluation at t_s.
    """

    def __init__(
        self,
        model: VelocityNet,
        cond: int,
        schedule: EditSchedule,
        inversion: TrajectoryRecord,
        edge_map: Optional[Tensor],
        full_injection: bool = False,
    ):
        super().__init__(model, cond, schedule.guidance)
        if inversion.kv is None:
            raise ConfigurationError("denoising with injection needs an inversion run that captured K/V")
        self.schedule = schedule
        self.inversion = inversion
        self.edge_map = edge_map
        self.full_injection = full_injection
        self.blocks = schedule.blocks_for(model)
        grid = (model.config.grid_height, model.config.grid_width)
        self.zeros = torch.zeros(grid)
        self.ones = torch.ones(grid)
        self.window: List[tdm.NormalizedMap] = []
        self.divergences: List[tdm.DivergenceMap] = []
        self.fused: Optional[tdm.FusedMap] = None
        self.mask = tdm.EditMask(self.zeros, self.zeros, schedule.tau, schedule.sigma)
        self.step = 0
        self.stage = Stage.STABILIZE

    def source_velocity(self, step: int) -> Tensor:
        if step == 0:
            if self.inversion.terminal_velocity is None:
                raise ConfigurationError("inversion has no velocity at t = 1 to replay")
            return self.inversion.terminal_velocity
        return self.inversion.steps[self.schedule.steps - step].velocity

    def _set_hooks(self) -> None:
        override = self.schedule.mask_override
        if self.full_injection:
            hook = INJECT_FULL
        elif override is MaskOverride.ZEROS:
            hook = AttentionHook.blended(self.zeros)
        elif override is MaskOverride.ONES:
            hook = AttentionHook.blended(self.ones)
        elif self.stage is Stage.STABILIZE:
            hook = INJECT_FULL
        elif self.stage is Stage.GUIDED:
            hook = AttentionHook.blended(self.mask.binary)
        else:
            hook = PASSTHROUGH
        self.hooks = {b: hook for b in self.blocks} if hook is not PASSTHROUGH else {}

    def begin_step(self, index: int, t: float, t_next: float) -> None:
        self.step = index
        self.evals_in_step = 0
        self.stage = stage_for_step(index, self.schedule)
        if self.edge_map is not None and self.schedule.adapter_active(index):
            self.adapter = AdapterInput(self.edge_map, self.schedule.adapter_strengths)
        else:
            self.adapter = None
        self._set_hooks()

    def _point(self) -> Tuple[int, bool]:
        return self.step, self.evals_in_step == 1

    def _external(self, slot: EvalSlot) -> Dict[int, KV]:
        return self.inversion.kv.slice(slot)

    def _after_eval(self, v: Tensor, t: float) -> None:
        if self.evals_in_step != 1 or self.stage is not Stage.GUIDED or self.full_injection:
            return
        d = tdm.compute_divergence(v, self.source_velocity(self.step), step=self.step)
        self.divergences.append(d)
        self.window.append(tdm.minmax_normalize(d))
        self.fused, self.mask = tdm.edit_mask(self.window, self.schedule.tau, self.schedule.sigma)
        self._set_hooks()


def _edge_map(image, model: VelocityNet, schedule: EditSchedule) -> Optional[Tensor]:
    if not schedule.adapter_enabled:
        return None
    return adapter_input_from_image(torch.as_tensor(np.asarray(image)), model.config.patch_size)


def invert(
    model: VelocityNet, latent: Tensor, cond: int, schedule: EditSchedule, capture: bool = True
) -> TrajectoryRecord:
    """Data -> noise under `cond`.

    With `capture`, K/V at the injection blocks are recorded for every evaluation
    of both guidance branches, keyed by `EvalSlot`, and one more evaluation at
    x_1, t = 1 gives the first denoising step its K/V and source velocity.
    """
    blocks = schedule.blocks_for(model) if capture else ()
    velocity = _InversionVelocity(model, cond, schedule, blocks)
    record = integrate(
        latent,
        TimeGrid.uniform(schedule.steps),
        Direction.INVERSION,
        velocity,
        schedule.solver,
        condition=cond,
        observer=velocity,
        kv=velocity.cache if capture else None,
    )
    if capture:
        record.terminal_velocity = velocity.terminal(record.final)
        if not velocity.cache.is_complete(capture_slots(schedule), blocks):
            raise IntegrationError("KV capture incomplete after inversion")
    return record


def sample(
    model: VelocityNet, noise: Tensor, cond: int, schedule: EditSchedule, edge_map: Optional[Tensor] = None
) -> TrajectoryRecord:
    """Plain conditional sampling: no injection anywhere."""
    velocity = _PlainVelocity(model, cond, schedule, edge_map)
    return integrate(
        noise, TimeGrid.uniform(schedule.steps), Direction.DENOISING, velocity, schedule.solver,
        condition=cond, observer=velocity,
    )


def _denoise(
    model: VelocityNet,
    inversion: TrajectoryRecord,
    cond: int,
    schedule: EditSchedule,
    edge_map: Optional[Tensor],
    full_injection: bool,
) -> Tuple[TrajectoryRecord, _DenoisingVelocity]:
    velocity = _DenoisingVelocity(model, cond, schedule, inversion, edge_map, full_injection)
    record = integrate(
        inversion.final,
        TimeGrid.uniform(schedule.steps),
        Direction.DENOISING,
        velocity,
        schedule.solver,
        condition=cond,
        observer=velocity,
    )
    return record, velocity


def reconstruct(
    model: VelocityNet, image, cond: int, schedule: EditSchedule, inversion: Optional[TrajectoryRecord] = None
) -> Tuple[np.ndarray, TrajectoryRecord, TrajectoryRecord]:
    """Global reconstruction path: invert, then denoise with full source injection on every step."""
    patch = model.config.patch_size
    if inversion is None:
        inversion = invert(model, encode_image(image, patch), cond, schedule)
    record, _ = _denoise(model, inversion, cond, schedule, _edge_map(image, model, schedule), True)
    return decode_latent(record.final, patch, model.config.image_channels), inversion, record


def _check_compatible(model: VelocityNet, image) -> None:
    cfg = model.config
    shape = tuple(np.asarray(image).shape)
    expected = (cfg.image_channels, cfg.grid_height * cfg.patch_size, cfg.grid_width * cfg.patch_size)
    if shape != expected:
        raise RejectedInputError(f"source image {shape} does not match the model's {expected}")


def run_edit(
    source_image,
    c_src: int,
    c_tgt: int,
    schedule: EditSchedule,
    model: VelocityNet,
    seed: int = 0,
) -> EditResult:
    """Invert the source under c_src, then denoise under c_tgt with the three-stage schedule."""
    _check_compatible(model, source_image)
    for c in (c_src, c_tgt):
        if not 0 <= c < model.config.vocab_size:
            raise RejectedInputError(f"condition id {c} outside [0, {model.config.vocab_size})")
    patch = model.config.patch_size
    latent = encode_image(source_image, patch)
    inversion = invert(model, latent, c_src, schedule)
    edge = _edge_map(source_image, model, schedule)
    denoising, velocity = _denoise(model, inversion, c_tgt, schedule, edge, False)

    front, tail = schedule.stage_bounds()
    manifest = {
        "seed": str(seed),
        "c_src": str(c_src),
        "c_tgt": str(c_tgt),
        "steps": str(schedule.steps),
        "solver": schedule.solver.value,
        "stage1_steps": f"0-{front - 1}" if front else "none",
        "stage2_steps": f"{front}-{tail - 1}" if tail > front else "none",
        "stage3_steps": f"{tail}-{schedule.steps - 1}" if tail < schedule.steps else "none",
        "injection_blocks": ",".join(str(b) for b in schedule.blocks_for(model)),
        "source_velocity": "replayed_from_inversion",
        "kv_pairing": "same_t_and_branch",
        "nfe_inversion": str(inversion.total_nfe),
        "nfe_denoising": str(denoising.total_nfe),
        "nfe_total": str(inversion.total_nfe + denoising.total_nfe),
        "mask_override": schedule.mask_override.value,
    }
    log.info(
        "edit: c_src=%d c_tgt=%d stage2_maps=%d mask_tokens=%d nfe=%s",
        c_src, c_tgt, len(velocity.divergences), int(velocity.mask.binary.sum().item()), manifest["nfe_total"],
    )
    return EditResult(
        latent=denoising.final,
        image=decode_latent(denoising.final, patch, model.config.image_channels),
        divergences=velocity.divergences,
        fused=velocity.fused,
        mask=velocity.mask,
        inversion=inversion,
        denoising=denoising,
        manifest=manifest,
    )


def round_trip(
    model: VelocityNet, image, cond: int, schedule: EditSchedule
) -> Tuple[np.ndarray, TrajectoryRecord, TrajectoryRecord]:
    """Invert then denoise under the same condition with every hook passing through."""
    _check_compatible(model, image)
    patch = model.config.patch_size
    inversion = invert(model, encode_image(image, patch), cond, schedule, capture=False)
    denoising = sample(model, inversion.final, cond, schedule)
    return decode_latent(denoising.final, patch, model.config.image_channels), inversion, denoising
