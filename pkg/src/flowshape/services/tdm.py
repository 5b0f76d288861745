"""Trajectory Divergence Map: where do source- and target-conditioned velocities disagree?

Maps are (H, W) tensors on the token grid. The chain per denoising step is
divergence -> min-max normalisation; across the editing window the
normalised maps are softmax-fused per token, smoothed and thresholded.
"""
from __future__ import annotations
import math
from dataclasses import dataclass
from typing import Sequence, Tuple

import torch
import torch.nn.functional as F
from torch import Tensor

from flowshape.services.errors import RejectedInputError, require_same_shape

DEFAULT_SIGMA = 1.0
DEFAULT_TAU = 0.35


@dataclass(frozen=True)
class DivergenceMap:
    step: int
    values: Tensor    # (H, W), >= 0


@dataclass(frozen=True)
class NormalizedMap:
    step: int
    values: Tensor    # (H, W) in [0, 1]


@dataclass(frozen=True)
class FusedMap:
    values: Tensor              # (H, W) in [0, 1]
    window: tuple               # steps fused
    weights: Tensor             # (len(window), H, W), sums to 1 over axis 0


@dataclass(frozen=True)
class EditMask:
    soft: Tensor      # (H, W) in [0, 1]
    binary: Tensor    # (H, W) in {0, 1}, float
    tau: float
    sigma: float


def compute_divergence(v_tgt: Tensor, v_src: Tensor, step: int = 0) -> DivergenceMap:
    """Token-wise L2 norm over channels of v_tgt - v_src; inputs are (H, W, C) or (1, H, W, C)."""
    require_same_shape(v_tgt, v_src, "divergence velocities")
    diff = v_tgt - v_src
    if diff.ndim == 4:
        if diff.shape[0] != 1:
            raise RejectedInputError("divergence is computed for a single latent")
        diff = diff[0]
    return DivergenceMap(step, torch.linalg.vector_norm(diff, dim=-1))


def minmax_normalize(d: DivergenceMap) -> NormalizedMap:
    values = d.values
    lo, hi = values.min(), values.max()
    if hi <= lo:
        # no contrast means no edit signal
        return NormalizedMap(d.step, torch.zeros_like(values))
    return NormalizedMap(d.step, ((values - lo) / (hi - lo)).clamp(0.0, 1.0))


def softmax_fuse(maps: Sequence[NormalizedMap]) -> FusedMap:
    if not maps:
        raise RejectedInputError("softmax fusion needs a non-empty window")
    shape = maps[0].values.shape
    if any(m.values.shape != shape for m in maps):
        raise RejectedInputError("all maps in the window must share the token grid")
    stack = torch.stack([m.values for m in maps])
    weights = torch.softmax(stack, dim=0)
    fused = (weights * stack).sum(dim=0).clamp(0.0, 1.0)
    return FusedMap(fused, tuple(m.step for m in maps), weights)


def gaussian_kernel(sigma: float, radius: int) -> Tensor:
    offsets = torch.arange(-radius, radius + 1, dtype=torch.float64)
    kernel = torch.exp(-0.5 * (offsets / sigma) ** 2)
    return kernel / kernel.sum()


def gaussian_smooth(m: FusedMap, sigma: float = DEFAULT_SIGMA) -> Tensor:
    """Separable Gaussian blur, radius ceil(3 sigma), reflect padding, clamped to [0, 1].

    The radius is capped per axis at size - 1 (the most reflect padding allows)
    and the truncated kernel renormalised.
    """
    if sigma < 0:
        raise RejectedInputError(f"sigma must be non-negative, got {sigma}")
    values = m.values if isinstance(m, FusedMap) else m
    if sigma == 0:
        return values.clone()
    out = values.to(torch.float64)[None, None]
    for axis, size in ((2, values.shape[0]), (3, values.shape[1])):
        radius = min(math.ceil(3 * sigma), size - 1)
        if radius <= 0:
            continue
        kernel = gaussian_kernel(sigma, radius)
        if axis == 2:
            out = F.pad(out, (0, 0, radius, radius), mode="reflect")
            out = F.conv2d(out, kernel.reshape(1, 1, -1, 1))
        else:
            out = F.pad(out, (radius, radius, 0, 0), mode="reflect")
            out = F.conv2d(out, kernel.reshape(1, 1, 1, -1))
    return out[0, 0].to(values.dtype).clamp(0.0, 1.0)


def binarize(soft: Tensor, tau: float = DEFAULT_TAU, sigma: float = DEFAULT_SIGMA) -> EditMask:
    if not 0 < tau < 1:
        raise RejectedInputError(f"threshold must lie in (0, 1), got {tau}")
    return EditMask(soft, (soft > tau).to(soft.dtype), tau, sigma)


def edit_mask(window: Sequence[NormalizedMap], tau: float, sigma: float) -> Tuple[FusedMap, EditMask]:
    """Fuse the window, smooth and threshold in one call."""
    fused = softmax_fuse(window)
    return fused, binarize(gaussian_smooth(fused, sigma), tau, sigma)
