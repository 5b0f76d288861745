from __future__ import annotations
import math
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from flowshape.services.errors import RejectedInputError

PEAK = 1.0
INF_TOKEN = "inf"

# (x0, y0, x1, y1) in pixels, half-open
Box = Tuple[int, int, int, int]


def _as_array(image) -> np.ndarray:
    return np.asarray(image, dtype=np.float64)


def _psnr_from_mse(mse: float) -> float:
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(PEAK * PEAK / mse)


def psnr(a, b) -> float:
    """Peak signal-to-noise ratio in dB for images in [0, 1]; identical images give +inf."""
    a, b = _as_array(a), _as_array(b)
    if a.shape != b.shape:
        raise RejectedInputError(f"psnr shape mismatch: {a.shape} vs {b.shape}")
    return _psnr_from_mse(float(np.mean((a - b) ** 2)))


def background_psnr(a, b, box: Box) -> float:
    """PSNR over pixels outside `box`. Images are (H, W) or channel-first (C, H, W)."""
    a, b = _as_array(a), _as_array(b)
    if a.shape != b.shape:
        raise RejectedInputError(f"psnr shape mismatch: {a.shape} vs {b.shape}")
    height, width = a.shape[-2:]
    x0, y0, x1, y1 = box
    if not (0 <= x0 <= x1 <= width and 0 <= y0 <= y1 <= height):
        raise RejectedInputError(f"subject box {box} outside the {width}x{height} canvas")
    keep = np.ones((height, width), dtype=bool)
    keep[y0:y1, x0:x1] = False
    if not keep.any():
        raise RejectedInputError("subject box covers the whole canvas; no background left")
    diff = (a - b) ** 2
    return _psnr_from_mse(float(diff[..., keep].mean()))


def subject_box(change_mask: np.ndarray, patch: int = 8) -> Box:
    """Bounding box of the ground-truth change region grown by one patch, clipped to the canvas."""
    ys, xs = np.nonzero(change_mask)
    height, width = change_mask.shape
    if len(xs) == 0:
        return 0, 0, 0, 0
    return (
        max(0, int(xs.min()) - patch),
        max(0, int(ys.min()) - patch),
        min(width, int(xs.max()) + 1 + patch),
        min(height, int(ys.max()) + 1 + patch),
    )


def upsample_tokens(mask, patch: int) -> np.ndarray:
    m = np.asarray(mask) > 0.5
    return m.repeat(patch, axis=0).repeat(patch, axis=1)


def mask_iou(pred, gt, patch: int = 8) -> float:
    """IoU of a token mask (replicated to pixels) against a pixel mask; both empty -> 1."""
    p = upsample_tokens(pred, patch) if np.asarray(pred).shape != np.asarray(gt).shape else np.asarray(pred) > 0.5
    g = np.asarray(gt) > 0.5
    if p.shape != g.shape:
        raise RejectedInputError(f"mask shapes differ after upsampling: {p.shape} vs {g.shape}")
    union = np.logical_or(p, g).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(p, g).sum() / union)


def token_mask(pixel_mask: np.ndarray, patch: int = 8) -> np.ndarray:
    """A token is inside when any of its pixels is."""
    h, w = pixel_mask.shape
    blocks = pixel_mask.reshape(h // patch, patch, w // patch, patch)
    return blocks.any(axis=(1, 3))


def localization(fused, gt_pixels: np.ndarray, patch: int = 8) -> Tuple[float, float]:
    """Mean fused divergence inside and outside the ground-truth change region (token grid)."""
    fused = np.asarray(fused, dtype=np.float64)
    inside = token_mask(np.asarray(gt_pixels, dtype=bool), patch)
    if inside.all() or not inside.any():
        raise RejectedInputError("change region must cover some but not all tokens")
    return float(fused[inside].mean()), float(fused[~inside].mean())


@dataclass
class PairScore:
    pair_id: str
    psnr: float
    background_psnr: Optional[float]
    iou: float
    inside_divergence: Optional[float] = None
    outside_divergence: Optional[float] = None
    # reserved, need pretrained networks
    lpips: None = None
    clip_similarity: None = None
    aesthetic: None = None

    @property
    def localized(self) -> Optional[bool]:
        if self.inside_divergence is None or self.outside_divergence is None:
            return None
        return self.inside_divergence > self.outside_divergence


def _mean(values: Sequence[Optional[float]]) -> Optional[float]:
    kept = [v for v in values if v is not None]
    if not kept:
        return None
    return float(sum(kept) / len(kept))


@dataclass
class EvalReport:
    pairs: List[PairScore] = field(default_factory=list)
    schedule: Dict[str, str] = field(default_factory=dict)
    model_id: str = ""

    def aggregates(self) -> Dict[str, Optional[float]]:
        localized = [p.localized for p in self.pairs if p.localized is not None]
        return {
            "psnr": _mean([p.psnr for p in self.pairs]),
            "background_psnr": _mean([p.background_psnr for p in self.pairs]),
            "iou": _mean([p.iou for p in self.pairs]),
            "localized_fraction": _mean([float(v) for v in localized]),
        }

    def to_json_dict(self) -> Dict:
        rows = []
        for p in self.pairs:
            row = asdict(p)
            row["localized"] = p.localized
            rows.append({k: _serializable(v) for k, v in row.items()})
        return {
            "model_id": self.model_id,
            "schedule": self.schedule,
            "pairs": rows,
            "aggregates": {k: _serializable(v) for k, v in self.aggregates().items()},
        }

    def to_lines(self) -> List[str]:
        lines = [f"model_id={self.model_id}"]
        lines += [f"schedule.{k}={v}" for k, v in sorted(self.schedule.items())]
        for p in self.pairs:
            lines.append(
                f"pair={p.pair_id} psnr={format_db(p.psnr)} background_psnr={format_db(p.background_psnr)} "
                f"iou={p.iou:.4f} localized={p.localized}"
            )
        for k, v in self.aggregates().items():
            lines.append(f"mean.{k}={format_db(v)}")
        return lines


def format_db(value: Optional[float]) -> str:
    if value is None:
        return "none"
    if math.isinf(value):
        return INF_TOKEN
    return f"{value:.4f}"


def _serializable(value):
    if isinstance(value, float) and math.isinf(value):
        return INF_TOKEN
    return value
