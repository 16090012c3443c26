"""Shared value types for the weakly supervised detection testbed.

Conventions used throughout the package:

* boxes are axis-aligned in center-size form (cx, cy, w, h), scene units;
  corner form (x1, y1, x2, y2) appears only at file boundaries
* class 0 is background; foreground classes are 1..C
* an image holds B proposals; a labeling assigns one class and one regressed
  geometry to every proposal

All types are immutable value objects. Arrays are copied on construction and
marked read-only, so instances can be shared freely across threads.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Iterator, Optional, Sequence, Tuple

import numpy as np

ENUMERATION_CAP = 1_000_000


class ContractViolation(ValueError):
    """An operation was called outside its documented contract."""


class InfeasibleConstraint(ContractViolation):
    """The annotation requires more distinct classes than there are proposals."""


class EnumerationCapExceeded(ContractViolation):
    """The labeling space (C+1)**B exceeds the enumeration cap."""


def _frozen(a, dtype=np.float64) -> np.ndarray:
    arr = np.array(a, dtype=dtype)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class BoxGeometry:
    """Axis-aligned box, center-size form. Width and height must be positive."""

    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        for name in ("cx", "cy", "w", "h"):
            v = float(getattr(self, name))
            if not np.isfinite(v):
                raise ContractViolation(f"non-finite box field {name}={v}")
            object.__setattr__(self, name, v)
        if not (self.w > 0.0 and self.h > 0.0):
            raise ContractViolation(f"non-positive box size w={self.w} h={self.h}")

    def as_array(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.w, self.h])

    @staticmethod
    def from_array(a) -> "BoxGeometry":
        return BoxGeometry(float(a[0]), float(a[1]), float(a[2]), float(a[3]))

    def corners(self) -> Tuple[float, float, float, float]:
        hw, hh = self.w / 2.0, self.h / 2.0
        return (self.cx - hw, self.cy - hh, self.cx + hw, self.cy + hh)

    @staticmethod
    def from_corners(x1, y1, x2, y2) -> "BoxGeometry":
        w = float(x2) - float(x1)
        h = float(y2) - float(y1)
        return BoxGeometry(float(x1) + w / 2.0, float(y1) + h / 2.0, w, h)


@dataclass(frozen=True)
class Proposal:
    """A candidate region: geometry plus a fixed feature vector."""

    index: int
    geometry: BoxGeometry
    features: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "features", _frozen(self.features))
        if self.features.ndim != 1:
            raise ContractViolation("proposal features must be a 1-d vector")
        if not np.all(np.isfinite(self.features)):
            raise ContractViolation("non-finite proposal features")

    def __eq__(self, other):
        if not isinstance(other, Proposal):
            return NotImplemented
        return (self.index == other.index and self.geometry == other.geometry
                and np.array_equal(self.features, other.features))


@dataclass(frozen=True)
class ImageAnnotation:
    """Image-level weak label: present[k] is 1 iff class k+1 occurs in the image."""

    present: Tuple[int, ...]

    def __post_init__(self):
        bits = tuple(int(b) for b in self.present)
        if any(b not in (0, 1) for b in bits):
            raise ContractViolation("annotation bits must be 0 or 1")
        object.__setattr__(self, "present", bits)

    @property
    def num_classes(self) -> int:
        return len(self.present)

    def required_classes(self) -> Tuple[int, ...]:
        """Foreground class ids (1-based) that must appear in a compatible labeling."""
        return tuple(j + 1 for j, b in enumerate(self.present) if b)


@dataclass(frozen=True)
class BoxLabeling:
    """One structured output: a class and a regressed geometry per proposal.

    classes is a length-B integer vector in {0..C}; boxes is (B, 4) center-size.
    Background rows keep a geometry for uniformity but it never enters any loss.
    """

    classes: np.ndarray
    boxes: np.ndarray

    def __post_init__(self):
        cls = _frozen(self.classes, dtype=np.int64)
        box = _frozen(self.boxes)
        if cls.ndim != 1 or box.shape != (cls.shape[0], 4):
            raise ContractViolation(f"labeling shapes {cls.shape} {box.shape} disagree")
        if cls.shape[0] > 0 and cls.min() < 0:
            raise ContractViolation("negative class id in labeling")
        if not np.all(box[:, 2] > 0) or not np.all(box[:, 3] > 0):
            raise ContractViolation("non-positive box size in labeling")
        object.__setattr__(self, "classes", cls)
        object.__setattr__(self, "boxes", box)

    def __len__(self):
        return self.classes.shape[0]

    def __eq__(self, other):
        if not isinstance(other, BoxLabeling):
            return NotImplemented
        return (np.array_equal(self.classes, other.classes)
                and np.array_equal(self.boxes, other.boxes))

    def geometry(self, i: int) -> BoxGeometry:
        return BoxGeometry.from_array(self.boxes[i])


@dataclass(frozen=True)
class ImageSample:
    """An image: proposals with features, a weak annotation, optional ground truth.

    Training code must consume only (proposals, features, annotation); ground
    truth exists for evaluation and is stripped by synthdata.to_weak.
    """

    image_id: int
    proposals: Tuple[Proposal, ...]
    annotation: ImageAnnotation
    ground_truth: Optional[Tuple[Tuple[int, BoxGeometry], ...]] = None

    def __post_init__(self):
        props = tuple(self.proposals)
        object.__setattr__(self, "proposals", props)
        if not props:
            raise ContractViolation("image has no proposals")
        dims = {p.features.shape[0] for p in props}
        if len(dims) != 1:
            raise ContractViolation(f"inconsistent feature dims {sorted(dims)}")
        if self.ground_truth is not None:
            gt = tuple((int(c), g) for c, g in self.ground_truth)
            object.__setattr__(self, "ground_truth", gt)
            C = self.annotation.num_classes
            gt_classes = {c for c, _ in gt}
            if any(c < 1 or c > C for c in gt_classes):
                raise ContractViolation("ground-truth class outside 1..C")
            present = set(self.annotation.required_classes())
            if gt_classes != present:
                raise ContractViolation(
                    f"annotation {sorted(present)} disagrees with ground truth {sorted(gt_classes)}")

    @property
    def num_proposals(self) -> int:
        return len(self.proposals)

    def feature_matrix(self) -> np.ndarray:
        """(B, D) feature matrix, rows in proposal order."""
        return np.stack([p.features for p in self.proposals])

    def proposal_boxes(self) -> np.ndarray:
        """(B, 4) center-size geometry of the proposals."""
        return np.stack([p.geometry.as_array() for p in self.proposals])

    def __eq__(self, other):
        if not isinstance(other, ImageSample):
            return NotImplemented
        return (self.image_id == other.image_id
                and self.proposals == other.proposals
                and self.annotation == other.annotation
                and self.ground_truth == other.ground_truth)


def _unit_boxes(B: int) -> np.ndarray:
    """Default reference frame when no proposal geometry is attached."""
    ref = np.zeros((B, 4))
    ref[:, 2:] = 1.0
    return ref


@dataclass(frozen=True)
class ClassDistribution:
    """Fully factorized per-proposal distribution with per-class offsets.

    probs is (B, C+1) with rows on the simplex; offsets is (B, C+1, 4) holding
    the regression offsets of each class hypothesis relative to ref_boxes
    (unit boxes when no reference is attached).
    """

    probs: np.ndarray
    offsets: np.ndarray
    ref_boxes: Optional[np.ndarray] = None

    def __post_init__(self):
        p = _frozen(self.probs)
        t = _frozen(self.offsets)
        if p.ndim != 2 or t.shape != (*p.shape, 4):
            raise ContractViolation(f"distribution shapes {p.shape} {t.shape} disagree")
        if not np.all(np.isfinite(p)) or not np.all(np.isfinite(t)):
            raise ContractViolation("non-finite distribution entries")
        if p.min() < -1e-12 or p.max() > 1.0 + 1e-12:
            raise ContractViolation("probabilities outside [0, 1]")
        if np.abs(p.sum(axis=1) - 1.0).max() > 1e-9:
            raise ContractViolation("probability rows must sum to 1")
        ref = _unit_boxes(p.shape[0]) if self.ref_boxes is None else np.array(self.ref_boxes, dtype=np.float64)
        if ref.shape != (p.shape[0], 4):
            raise ContractViolation(f"ref_boxes shape {ref.shape} disagrees with B={p.shape[0]}")
        ref.setflags(write=False)
        object.__setattr__(self, "probs", p)
        object.__setattr__(self, "offsets", t)
        object.__setattr__(self, "ref_boxes", ref)

    @property
    def num_proposals(self) -> int:
        return self.probs.shape[0]

    @property
    def num_classes(self) -> int:
        return self.probs.shape[1] - 1

    def __eq__(self, other):
        if not isinstance(other, ClassDistribution):
            return NotImplemented
        return (np.array_equal(self.probs, other.probs)
                and np.array_equal(self.offsets, other.offsets)
                and np.array_equal(self.ref_boxes, other.ref_boxes))


@dataclass(frozen=True)
class ScoreMatrix:
    """Unnormalized per-proposal class scores with per-class offsets.

    scores is (B, C+1), finite; offsets and ref_boxes as in ClassDistribution.
    """

    scores: np.ndarray
    offsets: np.ndarray
    ref_boxes: Optional[np.ndarray] = None

    def __post_init__(self):
        s = _frozen(self.scores)
        t = _frozen(self.offsets)
        if s.ndim != 2 or t.shape != (*s.shape, 4):
            raise ContractViolation(f"score shapes {s.shape} {t.shape} disagree")
        if not np.all(np.isfinite(s)) or not np.all(np.isfinite(t)):
            raise ContractViolation("non-finite score matrix entries")
        ref = _unit_boxes(s.shape[0]) if self.ref_boxes is None else np.array(self.ref_boxes, dtype=np.float64)
        if ref.shape != (s.shape[0], 4):
            raise ContractViolation(f"ref_boxes shape {ref.shape} disagrees with B={s.shape[0]}")
        ref.setflags(write=False)
        object.__setattr__(self, "scores", s)
        object.__setattr__(self, "offsets", t)
        object.__setattr__(self, "ref_boxes", ref)

    @property
    def num_proposals(self) -> int:
        return self.scores.shape[0]

    @property
    def num_classes(self) -> int:
        return self.scores.shape[1] - 1

    def __eq__(self, other):
        if not isinstance(other, ScoreMatrix):
            return NotImplemented
        return (np.array_equal(self.scores, other.scores)
                and np.array_equal(self.offsets, other.offsets)
                and np.array_equal(self.ref_boxes, other.ref_boxes))

    @staticmethod
    def from_scores(scores, ref_boxes=None) -> "ScoreMatrix":
        """Convenience constructor with all-zero offsets."""
        s = np.asarray(scores, dtype=np.float64)
        return ScoreMatrix(s, np.zeros((*s.shape, 4)), ref_boxes)


def is_compatible(labeling: BoxLabeling, annotation: ImageAnnotation) -> bool:
    """True iff every annotated class appears at least once in the labeling.

    Extra foreground classes (annotated absent) are allowed; only coverage of
    the present classes is constrained.
    """
    C = annotation.num_classes
    if len(labeling) and int(labeling.classes.max()) > C:
        raise ContractViolation(
            f"labeling class {int(labeling.classes.max())} exceeds C={C}")
    have = set(int(c) for c in labeling.classes)
    return all(j in have for j in annotation.required_classes())


def enumerate_labelings(B: int, C: int, cap: int = ENUMERATION_CAP) -> Iterator[Tuple[int, ...]]:
    """Yield all (C+1)**B class vectors in lexicographic order.

    Refuses with EnumerationCapExceeded when the space is larger than cap;
    intended for oracles and brute-force checks on small instances.
    """
    if B < 0 or C < 0:
        raise ContractViolation(f"bad dimensions B={B} C={C}")
    total = (C + 1) ** B
    if total > cap:
        raise EnumerationCapExceeded(f"(C+1)**B = {total} exceeds cap {cap}")
    return itertools.product(range(C + 1), repeat=B)
