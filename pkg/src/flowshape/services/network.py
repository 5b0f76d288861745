from __future__ import annotations
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, Hashable, Iterable, Mapping, Optional, Sequence, Tuple, Union

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch import Tensor

from flowshape.services.errors import ConfigurationError, RejectedInputError, require_same_shape

# one block's (key, value), each (tokens, heads, head_dim)
KV = Tuple[Tensor, Tensor]


@dataclass(frozen=True)
class ModelConfig:
    grid_height: int = 8
    grid_width: int = 8
    patch_size: int = 8
    image_channels: int = 3
    blocks: int = 6
    heads: int = 4
    head_dim: int = 32
    vocab_size: int = 9
    injection_blocks: Tuple[int, ...] = (4, 5)
    adapter_branches: int = 2
    mlp_ratio: int = 4

    def __post_init__(self) -> None:
        if min(self.grid_height, self.grid_width, self.patch_size, self.blocks, self.heads, self.head_dim) <= 0:
            raise ConfigurationError("model sizes must be positive")
        if any(b < 0 or b >= self.blocks for b in self.injection_blocks):
            raise ConfigurationError(
                f"injection blocks {self.injection_blocks} outside [0, {self.blocks})"
            )

    @property
    def channels(self) -> int:
        return self.patch_size * self.patch_size * self.image_channels

    @property
    def width(self) -> int:
        return self.heads * self.head_dim

    @property
    def tokens(self) -> int:
        return self.grid_height * self.grid_width

    @property
    def null_id(self) -> int:
        return self.vocab_size


class HookMode(str, Enum):
    PASSTHROUGH = "passthrough"
    CAPTURE = "capture"
    INJECT_FULL = "inject_full"
    INJECT_BLENDED = "inject_blended"


@dataclass(frozen=True)
class AttentionHook:
    mode: HookMode = HookMode.PASSTHROUGH
    mask: Optional[Tensor] = None   # (H, W) in [0, 1], INJECT_BLENDED only

    @classmethod
    def blended(cls, mask: Tensor) -> "AttentionHook":
        return cls(HookMode.INJECT_BLENDED, mask)

    @property
    def injects(self) -> bool:
        return self.mode in (HookMode.INJECT_FULL, HookMode.INJECT_BLENDED)


PASSTHROUGH = AttentionHook()
CAPTURE = AttentionHook(HookMode.CAPTURE)
INJECT_FULL = AttentionHook(HookMode.INJECT_FULL)


@dataclass
class KVCache:
    """Keys/values recorded per (slot, block). Entries are write-once.

    A slot names one evaluation of a run: a plain step index, or any hashable
    key a caller uses to pair evaluations of two runs.
    """

    entries: Dict[Tuple[Hashable, int], KV] = field(default_factory=dict)

    def record(self, slot: Hashable, block: int, kv: KV) -> None:
        if (slot, block) in self.entries:
            raise ConfigurationError(f"KV for slot {slot} block {block} already recorded")
        self.entries[(slot, block)] = kv

    def slice(self, slot: Hashable) -> Dict[int, KV]:
        return {b: kv for (s, b), kv in self.entries.items() if s == slot}

    def is_complete(self, slots: Union[int, Iterable[Hashable]], blocks: Sequence[int]) -> bool:
        """Every (slot, block) present; an int means the steps range(slots)."""
        if isinstance(slots, int):
            slots = range(slots)
        return all((s, b) in self.entries for s in slots for b in blocks)


@dataclass
class AdapterInput:
    edge_map: Tensor                 # (H, W) or (B, H, W), values in [0, 1]
    strengths: Sequence[float]       # one beta per adapter branch
    gate: Optional[Tensor] = None    # (B,), per-sample on/off used in training


def attention_with_kv(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """Scaled dot-product attention of the current queries over supplied keys/values.

    q is (B, T, heads, d); k and v are (B, S, heads, d) or unbatched (S, heads, d).
    """
    if k.ndim == 3:
        k = k.unsqueeze(0).expand(q.shape[0], *k.shape)
    if v.ndim == 3:
        v = v.unsqueeze(0).expand(q.shape[0], *v.shape)
    if k.shape[-2] != q.shape[-2] or v.shape[-2] != q.shape[-2]:
        raise RejectedInputError(f"head count mismatch: q={q.shape[-2]} k={k.shape[-2]} v={v.shape[-2]}")
    if k.shape[-1] != q.shape[-1] or k.shape[1] != v.shape[1]:
        raise RejectedInputError("key/value shapes incompatible with queries")
    scores = torch.einsum("bthd,bshd->bhts", q, k) / math.sqrt(q.shape[-1])
    weights = scores.softmax(dim=-1)
    return torch.einsum("bhts,bshd->bthd", weights, v)


def blend_kv(mask: Tensor, k_tgt: Tensor, v_tgt: Tensor, k_inv: Tensor, v_inv: Tensor) -> KV:
    """Per-token convex blend: M * target + (1 - M) * inversion.

    `mask` is (H, W) or flat (tokens,); the tensors carry tokens on axis -3.
    """
    require_same_shape(k_tgt, k_inv, "blend keys")
    require_same_shape(v_tgt, v_inv, "blend values")
    m = mask.reshape(-1)
    if m.shape[0] != k_tgt.shape[-3]:
        raise RejectedInputError(f"mask has {m.shape[0]} tokens, features have {k_tgt.shape[-3]}")
    m = m.to(k_tgt.dtype).reshape(-1, 1, 1)
    return m * k_tgt + (1 - m) * k_inv, m * v_tgt + (1 - m) * v_inv


def timestep_embedding(t: Tensor, dim: int) -> Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / half)
    args = (t.float() * 1000.0)[:, None] * freqs[None]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


class SelfAttention(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.heads = config.heads
        self.head_dim = config.head_dim
        self.qkv = nn.Linear(config.width, 3 * config.width)
        self.proj = nn.Linear(config.width, config.width)

    def forward(self, x: Tensor, hook: AttentionHook, external: Optional[KV]) -> Tuple[Tensor, KV]:
        b, n, _ = x.shape
        q, k, v = self.qkv(x).reshape(b, n, 3, self.heads, self.head_dim).unbind(dim=2)
        q, k, v = q.contiguous(), k.contiguous(), v.contiguous()
        if hook.mode == HookMode.INJECT_FULL:
            k_use, v_use = external
        elif hook.mode == HookMode.INJECT_BLENDED:
            k_inv, v_inv = external
            k_use, v_use = blend_kv(
                hook.mask,
                k,
                v,
                k_inv.unsqueeze(0).expand_as(k).contiguous(),
                v_inv.unsqueeze(0).expand_as(v).contiguous(),
            )
        else:
            k_use, v_use = k, v
        out = attention_with_kv(q, k_use, v_use)
        return self.proj(out.reshape(b, n, -1)), (k, v)


class Block(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.norm1 = nn.LayerNorm(config.width)
        self.attn = SelfAttention(config)
        self.norm2 = nn.LayerNorm(config.width)
        self.mlp = nn.Sequential(
            nn.Linear(config.width, config.mlp_ratio * config.width),
            nn.GELU(),
            nn.Linear(config.mlp_ratio * config.width, config.width),
        )

    def forward(self, x: Tensor, hook: AttentionHook, external: Optional[KV]) -> Tuple[Tensor, KV]:
        h, kv = self.attn(self.norm1(x), hook, external)
        x = x + h
        return x + self.mlp(self.norm2(x)), kv


class VelocityNet(nn.Module):
    """Transformer over patch tokens predicting the rectified-flow velocity.

    Blocks accept per-block attention hooks (capture / inject / blend) and an
    optional structure adapter adding `beta * A_b(edge_map)` to each block output.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        w = config.width
        self.patch_in = nn.Linear(config.channels, w)
        self.pos = nn.Parameter(torch.randn(config.tokens, w) * 0.02)
        self.time_mlp = nn.Sequential(nn.Linear(w, w), nn.SiLU(), nn.Linear(w, w))
        self.cond_embed = nn.Embedding(config.vocab_size + 1, w)
        self.blocks = nn.ModuleList(Block(config) for _ in range(config.blocks))
        # adapters[branch][block]: edge strength per token -> residual of model width
        self.adapters = nn.ModuleList(
            nn.ModuleList(nn.Linear(1, w, bias=False) for _ in range(config.blocks))
            for _ in range(config.adapter_branches)
        )
        for branch in self.adapters:
            for layer in branch:
                nn.init.zeros_(layer.weight)
        self.norm_out = nn.LayerNorm(w)
        self.head = nn.Linear(w, config.channels)

    def forward(
        self,
        x: Tensor,
        t: Union[float, Tensor],
        cond: Union[int, Tensor],
        hooks: Optional[Mapping[int, AttentionHook]] = None,
        external_kv: Optional[Mapping[int, KV]] = None,
        adapter: Optional[AdapterInput] = None,
    ) -> Tensor:
        velocity, _ = self.evaluate(x, t, cond, hooks, external_kv, adapter)
        return velocity

    def evaluate(
        self,
        x: Tensor,
        t: Union[float, Tensor],
        cond: Union[int, Tensor],
        hooks: Optional[Mapping[int, AttentionHook]] = None,
        external_kv: Optional[Mapping[int, KV]] = None,
        adapter: Optional[AdapterInput] = None,
    ) -> Tuple[Tensor, Dict[int, KV]]:
        """Velocity for a batch (B, H, W, C) plus the K/V of every CAPTURE block."""
        cfg = self.config
        if x.ndim != 4 or tuple(x.shape[1:]) != (cfg.grid_height, cfg.grid_width, cfg.channels):
            raise RejectedInputError(
                f"expected (B, {cfg.grid_height}, {cfg.grid_width}, {cfg.channels}), got {tuple(x.shape)}"
            )
        b = x.shape[0]
        t = torch.as_tensor(t, dtype=torch.float32).reshape(-1).expand(b)
        cond = torch.as_tensor(cond, dtype=torch.long).reshape(-1).expand(b)
        hooks = hooks or {}
        external_kv = external_kv or {}
        self._check_hooks(hooks, external_kv, b)

        h = self.patch_in(x.reshape(b, cfg.tokens, cfg.channels)) + self.pos
        h = h + (self.time_mlp(timestep_embedding(t, cfg.width)) + self.cond_embed(cond))[:, None, :]
        residual_in = self._adapter_tokens(adapter, b)

        captured: Dict[int, KV] = {}
        for i, block in enumerate(self.blocks):
            hook = hooks.get(i, PASSTHROUGH)
            h, (k, v) = block(h, hook, external_kv.get(i))
            if residual_in is not None:
                h = h + self._adapter_residual(i, residual_in, adapter)
            if hook.mode == HookMode.CAPTURE:
                captured[i] = (k[0].detach().clone(), v[0].detach().clone())
        out = self.head(self.norm_out(h))
        return out.reshape(b, cfg.grid_height, cfg.grid_width, cfg.channels), captured

    def _check_hooks(self, hooks: Mapping[int, AttentionHook], external_kv: Mapping[int, KV], batch: int) -> None:
        cfg = self.config
        for i, hook in hooks.items():
            if hook.injects and i not in external_kv:
                raise ConfigurationError(f"block {i} injects but no external KV was supplied")
            if hook.mode == HookMode.INJECT_BLENDED:
                if hook.mask is None or tuple(hook.mask.shape) != (cfg.grid_height, cfg.grid_width):
                    shape = None if hook.mask is None else tuple(hook.mask.shape)
                    raise RejectedInputError(f"blend mask shape {shape} does not match the token grid")
            if hook.mode == HookMode.CAPTURE and batch != 1:
                raise RejectedInputError("capture runs on a single latent")

    def _adapter_tokens(self, adapter: Optional[AdapterInput], batch: int) -> Optional[Tensor]:
        if adapter is None:
            return None
        if len(adapter.strengths) != self.config.adapter_branches:
            raise ConfigurationError(
                f"{len(adapter.strengths)} adapter strengths for {self.config.adapter_branches} branches"
            )
        edge = adapter.edge_map
        if edge.ndim == 2:
            edge = edge.unsqueeze(0).expand(batch, *edge.shape)
        if tuple(edge.shape[1:]) != (self.config.grid_height, self.config.grid_width):
            raise RejectedInputError(f"adapter map shape {tuple(edge.shape)} does not match the token grid")
        edge = edge.reshape(batch, self.config.tokens, 1).float()
        if adapter.gate is not None:
            edge = edge * adapter.gate.reshape(batch, 1, 1)
        return edge

    def _adapter_residual(self, block: int, edge: Tensor, adapter: AdapterInput) -> Tensor:
        total = None
        for branch, beta in zip(self.adapters, adapter.strengths):
            term = beta * branch[block](edge)
            total = term if total is None else total + term
        return total


def build_model(config: ModelConfig, seed: int) -> VelocityNet:
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        model = VelocityNet(config)
    model.eval()
    return model


def apply_guidance(v_cond: Tensor, v_uncond: Tensor, g: float) -> Tensor:
    """Classifier-free guidance: v_uncond + g * (v_cond - v_uncond)."""
    require_same_shape(v_cond, v_uncond, "guidance velocities")
    return v_uncond + g * (v_cond - v_uncond)


def adapter_input_from_image(image: Tensor, patch_size: int = 8) -> Tensor:
    """Per-token edge strength: central-difference gradient magnitude, patch mean, scaled to [0, 1].

    `image` is (H, W) or channel-first (C, H, W); only the first channel is used.
    """
    img = torch.as_tensor(image, dtype=torch.float32)
    if img.ndim == 3:
        img = img[0]
    gy, gx = torch.gradient(img)
    magnitude = torch.sqrt(gx * gx + gy * gy)
    pooled = F.avg_pool2d(magnitude[None, None], kernel_size=patch_size)[0, 0]
    peak = pooled.max()
    if peak <= 0:
        return torch.zeros_like(pooled)
    return (pooled / peak).clamp(0.0, 1.0)
