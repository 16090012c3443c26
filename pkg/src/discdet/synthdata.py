"""Synthetic detection scenes with controllable difficulty.

Each image holds a few ground-truth boxes with classes, B proposals (jittered
copies of every ground-truth box plus uniformly placed negatives, in shuffled
order), and per proposal a feature vector built from a fixed orthonormal
frame: one direction per foreground class, one class-agnostic object
direction, and one or more background mass directions. A proposal blends
foreground against clutter by its overlap with the ground truth: the response
(a logistic in IoU centered at the 0.5 detection threshold) scales the class
direction by class_gain and the shared object direction by object_gain, and
the remainder scales a drawn background variant with a random magnitude of
mean background_gain. Negatives are resampled until they overlap no ground
truth above 0.3, so a linear probe separates the classes well and failures of
the weak learner are attributable to the objective rather than to the
features.

The mass balance object_gain < background_gain gives the benchmark the two
properties that make image-level supervision workable at this scale while
keeping an untrained checkpoint honest. Placement: every box concentrates its
feature mass on few directions, so under a randomly initialized scorer
clutter boxes hold the strongest class opinions, and covering a required
class on one forfeits a large own-row score; annotated classes therefore land
on object boxes, whose opinions are weaker, from the first round on. Honest
zero: those same opinions mean every box commits its probability mass to one
random scoring row, so per class column almost all boxes score below the
indifference level and the top of the column is decided between the clutter
lottery and the object lottery, both class-blind. An untrained checkpoint
localizes essentially nothing beyond the one lucky class those lotteries pick.
Localization emerges only once the rounds align class rows with class
directions, ride the shared object direction as a localization prior, and
teach the background row to claim the clutter mass, which a linear row can do
because the clutter variants carry positive mass on average.

Most scenes draw all their objects from a single class. An annotation that
names one class trains that class row without any assignment ambiguity;
scenes that mix classes keep the assignment problem in the benchmark but at
a rate that does not drown the unambiguous signal.

Geometry lives in normalized image coordinates: the default scene is the unit
square and objects span 0.15 to 0.40 of it. At that scale the task loss
compares boxes in the same units the regression offsets use, so the default
loss ratio weighs localization against classification the way it is meant to.

All geometry is snapped to a 2**-26 grid at generation time. Values stay
below 2**7 scene units, so the center-size to corner-form conversions used at
the file boundary are exact in float64 and saved datasets reload bit-equal.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .core import (BoxGeometry, ContractViolation, ImageAnnotation, ImageSample,
                   Proposal)
from .evalmetrics import iou

_GRID = 2.0 ** 26
# overlap response: logistic in IoU, centered at the CorLoc/AP threshold
_OVERLAP_GAIN = 10.0
_OVERLAP_MID = 0.5
# a proposal only counts as a negative below this IoU against every object
_NEGATIVE_IOU = 0.3
_NEGATIVE_TRIES = 64


class DatasetFormatError(ValueError):
    """A dataset file does not parse against the documented schema."""


@dataclass(frozen=True)
class SceneConfig:
    num_classes: int = 3
    num_proposals: int = 20
    feature_dim: int = 16
    objects_per_image: Tuple[int, int] = (1, 3)
    scene_extent: float = 1.0
    jitter_scale: float = 0.12
    feature_noise: float = 0.1
    class_gain: float = 1.5
    object_gain: float = 1.5
    background_gain: float = 3.75
    background_types: int = 1
    single_class_rate: float = 0.7
    object_size_range: Tuple[float, float] = (0.15, 0.40)
    jitters_per_object: int = 1
    prototype_seed: int = 0
    dataset_seed: int = 0

    def __post_init__(self):
        lo, hi = self.objects_per_image
        if not (1 <= lo <= hi):
            raise ContractViolation(f"bad objects_per_image {self.objects_per_image}")
        if self.num_classes < 1 or self.feature_dim < 1 or self.num_proposals < 1:
            raise ContractViolation("dimensions must be positive")
        if hi * self.jitters_per_object > self.num_proposals:
            raise ContractViolation(
                f"{hi} objects x {self.jitters_per_object} jitters exceed B={self.num_proposals}")
        slo, shi = self.object_size_range
        if not (0.0 < slo <= shi < self.scene_extent):
            raise ContractViolation(f"bad object_size_range {self.object_size_range}")
        if not (0.0 <= self.jitter_scale < 1.0):
            raise ContractViolation(f"bad jitter_scale {self.jitter_scale}")
        if self.feature_noise < 0.0:
            raise ContractViolation(f"bad feature_noise {self.feature_noise}")
        if self.background_gain < 0.0:
            raise ContractViolation(f"bad background_gain {self.background_gain}")
        if self.class_gain < 0.0:
            raise ContractViolation(f"bad class_gain {self.class_gain}")
        if self.object_gain < 0.0:
            raise ContractViolation(f"bad object_gain {self.object_gain}")
        if not (0.0 <= self.single_class_rate <= 1.0):
            raise ContractViolation(f"bad single_class_rate {self.single_class_rate}")
        if self.background_types < 1:
            raise ContractViolation(f"bad background_types {self.background_types}")
        needed = self.num_classes + self.background_types + 1
        if self.feature_dim < needed:
            raise ContractViolation(
                f"feature_dim {self.feature_dim} cannot hold {self.num_classes} "
                f"class directions, {self.background_types} background directions, "
                f"and the shared object direction")


def _quantize(x: float) -> float:
    return round(x * _GRID) / _GRID


def _quantized_box(cx, cy, w, h) -> BoxGeometry:
    return BoxGeometry(_quantize(cx), _quantize(cy), _quantize(w), _quantize(h))


def class_prototypes(cfg: SceneConfig) -> np.ndarray:
    """Fixed orthonormal directions, one per row: the background mass variants,
    then the num_classes foreground class directions, then the class-agnostic
    object direction shared by every foreground box."""
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence((cfg.prototype_seed, 1))))
    rows = cfg.background_types + cfg.num_classes + 1
    raw = rng.normal(size=(cfg.feature_dim, rows))
    q, r = np.linalg.qr(raw)
    # fix the signs so the frame does not depend on the QR implementation
    return (q * np.sign(np.diag(r))).T


def _random_box(rng, cfg: SceneConfig) -> BoxGeometry:
    slo, shi = cfg.object_size_range
    w = rng.uniform(slo, shi)
    h = rng.uniform(slo, shi)
    cx = rng.uniform(w / 2.0, cfg.scene_extent - w / 2.0)
    cy = rng.uniform(h / 2.0, cfg.scene_extent - h / 2.0)
    return _quantized_box(cx, cy, w, h)


def _negative_box(rng, cfg: SceneConfig, gt_boxes) -> BoxGeometry:
    best, best_v = None, np.inf
    for _ in range(_NEGATIVE_TRIES):
        b = _random_box(rng, cfg)
        v = max((iou(b, g) for g in gt_boxes), default=0.0)
        if v < _NEGATIVE_IOU:
            return b
        if v < best_v:
            best, best_v = b, v
    return best


def _overlap_response(v: float) -> float:
    if v <= 0.0:
        return 0.0
    return 1.0 / (1.0 + math.exp(-_OVERLAP_GAIN * (v - _OVERLAP_MID)))


def _jittered(rng, g: BoxGeometry, scale: float) -> BoxGeometry:
    cx = g.cx + rng.normal() * scale * g.w
    cy = g.cy + rng.normal() * scale * g.h
    w = g.w * math.exp(rng.normal() * scale)
    h = g.h * math.exp(rng.normal() * scale)
    return _quantized_box(cx, cy, w, h)


def generate_image(cfg: SceneConfig, image_id: int, protos: np.ndarray) -> ImageSample:
    """One deterministic image; the RNG is keyed by (dataset seed, image id)."""
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence((cfg.dataset_seed, 2, image_id))))
    lo, hi = cfg.objects_per_image
    n_obj = int(rng.integers(lo, hi + 1))
    if rng.random() < cfg.single_class_rate:
        c = int(rng.integers(1, cfg.num_classes + 1))
        gt = [(c, _random_box(rng, cfg)) for _ in range(n_obj)]
    else:
        gt = [(int(rng.integers(1, cfg.num_classes + 1)), _random_box(rng, cfg)) for _ in range(n_obj)]

    gt_boxes = [g for _, g in gt]
    boxes: List[BoxGeometry] = []
    for _, g in gt:
        boxes.extend(_jittered(rng, g, cfg.jitter_scale) for _ in range(cfg.jitters_per_object))
    while len(boxes) < cfg.num_proposals:
        boxes.append(_negative_box(rng, cfg, gt_boxes))
    order = rng.permutation(len(boxes))
    boxes = [boxes[i] for i in order]

    by_class: dict = {}
    for c, g in gt:
        by_class.setdefault(c, []).append(g)
    proposals = []
    for i, b in enumerate(boxes):
        f = rng.normal(size=cfg.feature_dim) * cfg.feature_noise
        best = 0.0
        for c, gs in by_class.items():
            overlap = _overlap_response(max(iou(b, g) for g in gs))
            best = max(best, overlap)
            if overlap > 0.0:
                f = f + overlap * cfg.class_gain * protos[cfg.background_types + c - 1]
        kind = int(rng.integers(cfg.background_types))
        mag = rng.uniform(0.7, 1.3)
        f = f + best * cfg.object_gain * protos[-1]
        f = f + (1.0 - best) * cfg.background_gain * mag * protos[kind]
        proposals.append(Proposal(i, b, f))

    present = tuple(1 if (j + 1) in by_class else 0 for j in range(cfg.num_classes))
    return ImageSample(image_id, tuple(proposals), ImageAnnotation(present), tuple(gt))


def generate_dataset(cfg: SceneConfig, n_images: int) -> List[ImageSample]:
    """n deterministic images; per-image seeding keeps generation order-free."""
    if n_images < 0:
        raise ContractViolation(f"negative dataset size {n_images}")
    protos = class_prototypes(cfg)
    return [generate_image(cfg, i, protos) for i in range(n_images)]


def to_weak(dataset: Sequence[ImageSample]) -> List[ImageSample]:
    """Strip ground truth, leaving only image-level labels for training."""
    return [ImageSample(s.image_id, s.proposals, s.annotation, None) for s in dataset]


def _box_to_corners(g: BoxGeometry) -> List[float]:
    x1, y1, x2, y2 = g.corners()
    return [x1, y1, x2, y2]


def save_dataset(dataset: Sequence[ImageSample], path) -> None:
    """One JSON record per line; geometry in corner form, floats at full precision."""
    with open(path, "w", encoding="utf-8") as f:
        for s in dataset:
            rec = {
                "id": s.image_id,
                "annotation": list(s.annotation.present),
                "proposals": [{"box": _box_to_corners(p.geometry),
                               "features": [float(v) for v in p.features]}
                              for p in s.proposals],
            }
            if s.ground_truth is not None:
                rec["ground_truth"] = [{"class": c, "box": _box_to_corners(g)}
                                       for c, g in s.ground_truth]
            f.write(json.dumps(rec) + "\n")


def _parse_box(b, where: str) -> BoxGeometry:
    if not (isinstance(b, list) and len(b) == 4):
        raise DatasetFormatError(f"{where}: box must be a 4-element corner list")
    try:
        return BoxGeometry.from_corners(*b)
    except (TypeError, ContractViolation) as e:
        raise DatasetFormatError(f"{where}: {e}") from e


def load_dataset(path) -> List[ImageSample]:
    """Parse a dataset file; malformed input names the offending line."""
    out: List[ImageSample] = []
    feature_dim = None
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            where = f"{path}: line {lineno}"
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise DatasetFormatError(f"{where}: invalid JSON ({e.msg})") from e
            try:
                ann = ImageAnnotation(tuple(rec["annotation"]))
                proposals = tuple(
                    Proposal(i, _parse_box(p["box"], where), np.asarray(p["features"], dtype=np.float64))
                    for i, p in enumerate(rec["proposals"]))
                gt = None
                if "ground_truth" in rec:
                    gt = tuple((int(g["class"]), _parse_box(g["box"], where))
                               for g in rec["ground_truth"])
                sample = ImageSample(int(rec["id"]), proposals, ann, gt)
            except DatasetFormatError:
                raise
            except (KeyError, TypeError, ValueError) as e:
                raise DatasetFormatError(f"{where}: {e}") from e
            if feature_dim is None:
                feature_dim = sample.proposals[0].features.shape[0]
            elif sample.proposals[0].features.shape[0] != feature_dim:
                raise DatasetFormatError(
                    f"{where}: feature dim {sample.proposals[0].features.shape[0]} != {feature_dim}")
            out.append(sample)
    return out
