"""Diversity coefficients between the two output distributions.

Three estimators, all averaging the per-box task loss:

* div_pred_cond: exact expectation over the factorized prediction side, Monte
  Carlo over K conditional samples
* div_cond_cond: unbiased U-statistic over the K(K-1) ordered sample pairs
* div_pred_pred: closed form over all class pairs of the factorized side

The dissimilarity coefficient combines them as
cross - gamma * self_cond - (1 - gamma) * self_pred.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import BoxLabeling, ClassDistribution, ContractViolation
from .loss import LossConfig, decode_boxes, frame_coords, labeling_deltas, _smooth_l1_sum


@dataclass(frozen=True)
class DiscConfig:
    gamma: float = 0.5
    loss: LossConfig = LossConfig()

    def __post_init__(self):
        if not (0.0 <= self.gamma <= 1.0):
            raise ContractViolation(f"gamma must lie in [0, 1], got {self.gamma}")


@dataclass(frozen=True)
class DiversityReport:
    """The three diversity terms and their combination for one image."""

    cross: float
    self_cond: float
    self_pred: float
    disc: float


def _check_samples(B: int, samples: Sequence[BoxLabeling], minimum: int):
    if len(samples) < minimum:
        raise ContractViolation(f"need at least {minimum} samples, got {len(samples)}")
    for s in samples:
        if len(s) != B:
            raise ContractViolation(f"sample length {len(s)} != B={B}")


def _pred_frames(P: ClassDistribution) -> np.ndarray:
    """(B, C+1, 4) unit-frame coordinates of every class hypothesis box."""
    dec = decode_boxes(P.ref_boxes[:, None, :], P.offsets)
    return frame_coords(dec)


def div_pred_cond(P: ClassDistribution, samples: Sequence[BoxLabeling],
                  cfg: DiscConfig) -> float:
    """Expected task loss between the prediction side and the sampled side.

    Exact over the per-proposal class distribution, averaged over the samples:
    (1 / BK) sum_{i,k,c} probs[i,c] * delta((c, box_ic), sample_k^(i)).
    """
    B, C = P.num_proposals, P.num_classes
    _check_samples(B, samples, 1)
    frames = _pred_frames(P)
    class_ids = np.arange(C + 1)[None, :]
    acc = 0.0
    for s in samples:
        delta = (class_ids != s.classes[:, None]).astype(np.float64)
        fg = np.flatnonzero(s.classes > 0)
        if fg.size and cfg.loss.loss_ratio > 0.0:
            cls = s.classes[fg]
            d = frames[fg, cls] - frame_coords(s.boxes[fg])
            delta[fg, cls] += cfg.loss.loss_ratio * _smooth_l1_sum(d)
        acc += float(np.sum(P.probs * delta))
    return acc / (B * len(samples))


def div_cond_cond(samples: Sequence[BoxLabeling], cfg: DiscConfig) -> float:
    """U-statistic estimate of the conditional side's self diversity.

    Averages the per-box loss over all K(K-1) ordered sample pairs; the loss
    is symmetric so each unordered pair is counted twice and once computed.
    """
    K = len(samples)
    if K < 2:
        raise ContractViolation(f"self diversity needs K >= 2 samples, got {K}")
    B = len(samples[0])
    _check_samples(B, samples, 2)
    acc = 0.0
    for k in range(K):
        for kk in range(k + 1, K):
            acc += 2.0 * float(np.sum(labeling_deltas(samples[k], samples[kk], cfg.loss)))
    return acc / (K * (K - 1) * B)


def div_pred_pred(P: ClassDistribution, cfg: DiscConfig) -> float:
    """Closed-form self diversity of the factorized prediction side.

    Per proposal this is sum_{c,c'} p_c p_c' delta((c, box_c), (c', box_c')).
    Equal classes share one hypothesis box, so the localization term vanishes
    and the value reduces to 1 - sum_c p_c^2 regardless of the loss ratio.
    """
    B, C = P.num_proposals, P.num_classes
    delta = 1.0 - np.eye(C + 1)
    acc = float(np.einsum("bc,cd,bd->", P.probs, delta, P.probs))
    return acc / B


def disc(P: ClassDistribution, samples: Sequence[BoxLabeling], cfg: DiscConfig) -> DiversityReport:
    """All three diversity terms plus their dissimilarity-coefficient combination."""
    cross = div_pred_cond(P, samples, cfg)
    self_cond = div_cond_cond(samples, cfg)
    self_pred = div_pred_pred(P, cfg)
    value = cross - cfg.gamma * self_cond - (1.0 - cfg.gamma) * self_pred
    return DiversityReport(cross, self_cond, self_pred, value)
