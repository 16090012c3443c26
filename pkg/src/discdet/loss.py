"""Detection task loss: per-box 0-1 classification plus smooth-L1 localization.

The loss between two labelings decomposes over proposals. Per box it is

    delta = [c1 != c2] + ratio * [c1 == c2 != background] * smooth_l1(u(g1) - u(g2))

where u(g) = (cx, cy, ln w, ln h) places both geometries in a shared unit
reference frame, so the localization term depends on the two geometries only.
Localization is counted only for matched foreground classes; a class mismatch
already pays the full classification unit and background carries no geometry.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import BoxGeometry, BoxLabeling, ContractViolation


@dataclass(frozen=True)
class LossConfig:
    """loss_ratio is the weight of localization relative to classification."""

    loss_ratio: float = 3.0

    def __post_init__(self):
        if not (self.loss_ratio >= 0.0 and np.isfinite(self.loss_ratio)):
            raise ContractViolation(f"loss_ratio must be finite and >= 0, got {self.loss_ratio}")


def smooth_l1(d) -> float:
    """Sum of per-component Huber terms: 0.5 x^2 for |x| <= 1, |x| - 0.5 beyond."""
    d = np.asarray(d, dtype=np.float64)
    if not np.all(np.isfinite(d)):
        raise ContractViolation("non-finite smooth_l1 input")
    a = np.abs(d)
    return float(np.sum(np.where(a <= 1.0, 0.5 * d * d, a - 0.5)))


def smooth_l1_grad(d) -> np.ndarray:
    """Elementwise derivative: x inside the quadratic zone, sign(x) outside."""
    d = np.asarray(d, dtype=np.float64)
    return np.where(np.abs(d) <= 1.0, d, np.sign(d))


def box_encode(proposal: BoxGeometry, target: BoxGeometry) -> np.ndarray:
    """Regression offsets of target relative to proposal: (dx/w, dy/h, ln ratios)."""
    return np.array([
        (target.cx - proposal.cx) / proposal.w,
        (target.cy - proposal.cy) / proposal.h,
        np.log(target.w / proposal.w),
        np.log(target.h / proposal.h),
    ])


def box_decode(proposal: BoxGeometry, offsets) -> BoxGeometry:
    """Inverse of box_encode."""
    t = np.asarray(offsets, dtype=np.float64)
    if t.shape != (4,):
        raise ContractViolation(f"offsets must be a 4-vector, got shape {t.shape}")
    return BoxGeometry(
        proposal.cx + t[0] * proposal.w,
        proposal.cy + t[1] * proposal.h,
        proposal.w * float(np.exp(t[2])),
        proposal.h * float(np.exp(t[3])),
    )


def encode_boxes(ref: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Array form of box_encode; ref and target broadcast over leading axes."""
    out = np.empty(np.broadcast_shapes(ref.shape, target.shape))
    out[..., 0] = (target[..., 0] - ref[..., 0]) / ref[..., 2]
    out[..., 1] = (target[..., 1] - ref[..., 1]) / ref[..., 3]
    out[..., 2] = np.log(target[..., 2] / ref[..., 2])
    out[..., 3] = np.log(target[..., 3] / ref[..., 3])
    return out


def decode_boxes(ref: np.ndarray, offsets: np.ndarray) -> np.ndarray:
    """Array form of box_decode; ref broadcasts against offsets."""
    out = np.empty(np.broadcast_shapes(ref.shape, offsets.shape))
    out[..., 0] = ref[..., 0] + offsets[..., 0] * ref[..., 2]
    out[..., 1] = ref[..., 1] + offsets[..., 1] * ref[..., 3]
    out[..., 2] = ref[..., 2] * np.exp(offsets[..., 2])
    out[..., 3] = ref[..., 3] * np.exp(offsets[..., 3])
    return out


def frame_coords(boxes: np.ndarray) -> np.ndarray:
    """Unit-reference-frame coordinates (cx, cy, ln w, ln h) of (..., 4) boxes."""
    out = np.array(boxes, dtype=np.float64)
    out[..., 2] = np.log(out[..., 2])
    out[..., 3] = np.log(out[..., 3])
    return out


def delta_box(y1, y2, cfg: LossConfig) -> float:
    """Task loss between two (class, BoxGeometry) pairs. Symmetric, zero on equality."""
    c1, g1 = y1
    c2, g2 = y2
    if int(c1) != int(c2):
        return 1.0
    if int(c1) == 0:
        return 0.0
    d = np.array([g1.cx - g2.cx, g1.cy - g2.cy,
                  np.log(g1.w) - np.log(g2.w), np.log(g1.h) - np.log(g2.h)])
    return cfg.loss_ratio * smooth_l1(d)


def _smooth_l1_sum(d: np.ndarray) -> np.ndarray:
    a = np.abs(d)
    return np.sum(np.where(a <= 1.0, 0.5 * d * d, a - 0.5), axis=-1)


def labeling_deltas(y1: BoxLabeling, y2: BoxLabeling, cfg: LossConfig) -> np.ndarray:
    """Per-proposal delta_box values between two labelings, as a (B,) array."""
    if len(y1) != len(y2):
        raise ContractViolation(f"labeling lengths differ: {len(y1)} vs {len(y2)}")
    cls = (y1.classes != y2.classes).astype(np.float64)
    loc_mask = (y1.classes == y2.classes) & (y1.classes > 0)
    out = cls
    if np.any(loc_mask):
        d = frame_coords(y1.boxes[loc_mask]) - frame_coords(y2.boxes[loc_mask])
        out = out.copy()
        out[loc_mask] += cfg.loss_ratio * _smooth_l1_sum(d)
    return out


def delta_total(y1: BoxLabeling, y2: BoxLabeling, cfg: LossConfig) -> float:
    """Mean per-box task loss between two labelings of the same image."""
    return float(np.mean(labeling_deltas(y1, y2, cfg)))
