"""Detection metrics: IoU, greedy NMS, average precision, and CorLoc.

Average precision uses every-point interpolation (the precision envelope
integrated over recall) and is computed in exact rational arithmetic, so the
result is a deterministic function of the match outcomes rather than of the
summation order.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .core import BoxGeometry, ContractViolation

CORLOC_IOU = 0.5


@dataclass(frozen=True)
class Detection:
    """One scored box hypothesis for one image and one foreground class."""

    image_id: int
    class_id: int
    geometry: BoxGeometry
    score: float

    def __post_init__(self):
        if self.class_id < 1:
            raise ContractViolation(f"detections are foreground only, got class {self.class_id}")
        if not np.isfinite(self.score):
            raise ContractViolation("non-finite detection score")


def iou(a: BoxGeometry, b: BoxGeometry) -> float:
    """Intersection over union of two boxes; zero when disjoint."""
    ax1, ay1, ax2, ay2 = a.corners()
    bx1, by1, bx2, by2 = b.corners()
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    return inter / (a.w * a.h + b.w * b.h - inter)


def nms_indices(boxes: Sequence[BoxGeometry], scores: Sequence[float],
                iou_thresh: float) -> List[int]:
    """Greedy non-maximum suppression; returns kept indices in keep order.

    Keeps the highest-scoring box, removes every remaining one with IoU
    strictly above the threshold against it, and repeats. Score ties keep the
    box that came first in the input.
    """
    order = sorted(range(len(boxes)), key=lambda i: (-scores[i], i))
    keep: List[int] = []
    removed = [False] * len(boxes)
    for i in order:
        if removed[i]:
            continue
        keep.append(i)
        for j in order:
            if not removed[j] and j != i and iou(boxes[i], boxes[j]) > iou_thresh:
                removed[j] = True
        removed[i] = True
    return keep


def nms(dets: Sequence[Detection], iou_thresh: float) -> List[Detection]:
    """Greedy non-maximum suppression over one class of detections."""
    if len({d.class_id for d in dets}) > 1:
        raise ContractViolation("nms expects detections of a single class")
    kept = nms_indices([d.geometry for d in dets], [d.score for d in dets], iou_thresh)
    return [dets[i] for i in kept]


def _match_flags(dets: Sequence[Detection], gts: Sequence[Tuple[int, BoxGeometry]],
                 iou_thresh: float) -> List[bool]:
    """Greedy matching protocol shared by AP and its oracle: walk detections in
    descending score, claim the unmatched ground truth with the highest IoU at
    or above the threshold."""
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    by_image: Dict[int, List[int]] = {}
    for gi, (img, _) in enumerate(gts):
        by_image.setdefault(img, []).append(gi)
    taken = [False] * len(gts)
    flags = [False] * len(dets)
    for rank, i in enumerate(order):
        d = dets[i]
        best_iou, best_gi = 0.0, -1
        for gi in by_image.get(d.image_id, ()):
            if taken[gi]:
                continue
            v = iou(d.geometry, gts[gi][1])
            if v >= iou_thresh and v > best_iou:
                best_iou, best_gi = v, gi
        if best_gi >= 0:
            taken[best_gi] = True
            flags[rank] = True
    return flags


def average_precision(dets: Sequence[Detection], gts: Sequence[Tuple[int, BoxGeometry]],
                      iou_thresh: float = 0.5) -> Optional[float]:
    """Every-point-interpolated AP for one class.

    dets are this class's detections across all images; gts are (image_id,
    geometry) pairs. Returns None when the class has no ground truth (the
    class is then excluded from any mean). Exact rational arithmetic keeps
    equal inputs byte-equal outputs.
    """
    if len({d.class_id for d in dets}) > 1:
        raise ContractViolation("average_precision expects detections of a single class")
    G = len(gts)
    if G == 0:
        return None
    if not dets:
        return 0.0
    flags = _match_flags(dets, gts, iou_thresh)
    n = len(flags)
    tp = 0
    precisions: List[Fraction] = []
    tp_ranks: List[int] = []
    for rank, hit in enumerate(flags):
        if hit:
            tp += 1
            tp_ranks.append(rank)
        precisions.append(Fraction(tp, rank + 1))
    total = Fraction(0)
    for rank in tp_ranks:
        # every-point interpolation: best precision at this or any later rank
        total += max(precisions[rank:])
    return float(total / G)


def corloc(dets: Sequence[Detection], gts: Sequence[Tuple[int, int, BoxGeometry]]
           ) -> Tuple[Dict[int, float], float]:
    """Correct-localization rate.

    gts are (image_id, class_id, geometry) triples. For every (class, image
    containing that class) pair the image's highest-scoring detection of the
    class must reach IoU >= 0.5 against some ground truth of the class in the
    image. Returns per-class rates and their mean over classes with ground
    truth.
    """
    gt_by_pair: Dict[Tuple[int, int], List[BoxGeometry]] = {}
    for img, cls, g in gts:
        gt_by_pair.setdefault((cls, img), []).append(g)
    top: Dict[Tuple[int, int], Detection] = {}
    for d in dets:
        key = (d.class_id, d.image_id)
        cur = top.get(key)
        if cur is None or d.score > cur.score:
            top[key] = d
    hits: Dict[int, List[bool]] = {}
    for (cls, img), boxes in gt_by_pair.items():
        d = top.get((cls, img))
        ok = d is not None and any(iou(d.geometry, g) >= CORLOC_IOU for g in boxes)
        hits.setdefault(cls, []).append(ok)
    rates = {cls: float(np.mean(v)) for cls, v in sorted(hits.items())}
    mean = float(np.mean(list(rates.values()))) if rates else 0.0
    return rates, mean
