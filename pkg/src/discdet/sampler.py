"""Exact MAP inference for the conditional distribution over labelings.

The joint score of a labeling is the sum of its per-proposal class scores,
minus an infinite penalty when some annotated class is absent. The maximizer
therefore has a representative-row form: every proposal takes its row argmax,
except that each annotated class is assigned to one distinct proposal chosen
by a minimum-regret matching (regret of placing class j on proposal i is
rowmax_i - scores[i, j]). Matching over all annotated classes, not just the
ones missing from the row argmax, is what makes the reduction exact: the
optimum may relocate a class the row argmax already covers.

The matching is solved exhaustively for up to three annotated classes and by
the Hungarian algorithm beyond that. Ties are broken toward the
lexicographically smallest class vector on the exhaustive path, matching the
enumeration order of the brute-force oracle.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import product

import numpy as np
from scipy.optimize import linear_sum_assignment

from .core import (BoxLabeling, ContractViolation, EnumerationCapExceeded,
                   ENUMERATION_CAP, ImageAnnotation, InfeasibleConstraint,
                   ScoreMatrix)
from .loss import LossConfig, decode_boxes, frame_coords, _smooth_l1_sum


@dataclass(frozen=True)
class JointScore:
    """Extended-real score: value is meaningful only when feasible is True.

    Infeasibility stands for minus infinity; it is a tag, never a float that
    could enter arithmetic.
    """

    feasible: bool
    value: float = 0.0

    def as_float(self) -> float:
        return self.value if self.feasible else float("-inf")


def _classes_of(y) -> np.ndarray:
    if isinstance(y, BoxLabeling):
        return y.classes
    return np.asarray(y, dtype=np.int64)


def joint_score(G: ScoreMatrix, y, a: ImageAnnotation) -> JointScore:
    """Score of labeling y under G: sum of selected entries, -inf if incompatible.

    y may be a BoxLabeling or a plain class vector; geometry never affects the
    score.
    """
    classes = _classes_of(y)
    B, C = G.num_proposals, G.num_classes
    if classes.shape != (B,):
        raise ContractViolation(f"labeling length {classes.shape} != B={B}")
    if a.num_classes != C:
        raise ContractViolation(f"annotation length {a.num_classes} != C={C}")
    if classes.min(initial=0) < 0 or classes.max(initial=0) > C:
        raise ContractViolation("labeling class outside 0..C")
    have = set(int(c) for c in classes)
    if any(j not in have for j in a.required_classes()):
        return JointScore(feasible=False)
    return JointScore(True, float(G.scores[np.arange(B), classes].sum()))


def _decode_at(G: ScoreMatrix, classes: np.ndarray) -> BoxLabeling:
    # regressed geometry comes from the offsets at each chosen class
    B = G.num_proposals
    boxes = decode_boxes(G.ref_boxes, G.offsets[np.arange(B), classes])
    return BoxLabeling(classes, boxes)


def _check_instance(G: ScoreMatrix, a: ImageAnnotation):
    if a.num_classes != G.num_classes:
        raise ContractViolation(
            f"annotation length {a.num_classes} != C={G.num_classes}")
    required = a.required_classes()
    if len(required) > G.num_proposals:
        raise InfeasibleConstraint(
            f"{len(required)} required classes exceed B={G.num_proposals} proposals")
    return required


def constrained_argmax(G: ScoreMatrix, a: ImageAnnotation) -> BoxLabeling:
    """Exact maximizer of the joint score among compatible labelings."""
    required = _check_instance(G, a)
    scores = G.scores
    B = G.num_proposals
    base = np.argmax(scores, axis=1)  # ties resolve to the lowest class index
    if set(required) <= set(int(c) for c in base):
        return _decode_at(G, base)

    rowmax = scores[np.arange(B), base]
    m = len(required)
    # regret[j, i]: score lost by forcing required class j onto proposal i
    regret = rowmax[None, :] - scores[:, list(required)].T

    if m <= 3:
        assign = _exhaustive_assignment(regret, base, np.array(required))
    else:
        rows, cols = linear_sum_assignment(regret)
        assign = np.empty(m, dtype=np.int64)
        assign[rows] = cols

    classes = base.copy()
    for j, i in zip(required, assign):
        classes[i] = j
    return _decode_at(G, classes)


def _exhaustive_assignment(regret: np.ndarray, base: np.ndarray, required: np.ndarray) -> np.ndarray:
    """Minimum-cost injective assignment of m <= 3 classes to proposals.

    Exact ties in total regret are broken toward the lexicographically smallest
    resulting class vector, the same order the brute-force enumeration visits.
    """
    m, B = regret.shape
    if m == 1:
        cost = regret[0]
        cand = np.flatnonzero(cost == cost.min())
        tuples = cand[:, None]
    elif m == 2:
        cost = regret[0][:, None] + regret[1][None, :]
        ii, jj = np.meshgrid(np.arange(B), np.arange(B), indexing="ij")
        cost = np.where(ii == jj, np.inf, cost)
        best = cost.min()
        cand = np.argwhere(cost == best)
        tuples = cand
    else:
        cost = (regret[0][:, None, None] + regret[1][None, :, None]
                + regret[2][None, None, :])
        ii, jj, kk = np.meshgrid(*[np.arange(B)] * 3, indexing="ij")
        cost = np.where((ii == jj) | (ii == kk) | (jj == kk), np.inf, cost)
        best = cost.min()
        cand = np.argwhere(cost == best)
        tuples = cand
    if tuples.shape[0] == 1:
        return tuples[0]
    picks = []
    for t in tuples:
        classes = base.copy()
        classes[t] = required
        picks.append((tuple(classes), tuple(t)))
    return np.array(min(picks)[1], dtype=np.int64)


def brute_force_argmax(G: ScoreMatrix, a: ImageAnnotation, cap: int = ENUMERATION_CAP) -> BoxLabeling:
    """Reference maximizer by full enumeration of the labeling space.

    Visits class vectors in lexicographic order and keeps the first maximum,
    so exact score ties resolve to the lexicographically smallest labeling.
    Intended for small instances; refuses beyond the enumeration cap.
    """
    required = _check_instance(G, a)
    B, C = G.num_proposals, G.num_classes
    total = (C + 1) ** B
    if total > cap:
        raise EnumerationCapExceeded(f"(C+1)**B = {total} exceeds cap {cap}")
    grids = np.meshgrid(*[np.arange(C + 1)] * B, indexing="ij")
    labelings = np.stack([g.reshape(-1) for g in grids], axis=1)  # lexicographic rows
    totals = G.scores[np.arange(B)[None, :], labelings].sum(axis=1)
    for j in required:
        totals = np.where((labelings == j).any(axis=1), totals, -np.inf)
    best = int(np.argmax(totals))
    if not np.isfinite(totals[best]):
        raise InfeasibleConstraint("no compatible labeling exists")
    return _decode_at(G, labelings[best].astype(np.int64))


def loss_augmented_argmax(G: ScoreMatrix, a: ImageAnnotation, ref: BoxLabeling,
                          epsilon: float, cfg: LossConfig) -> BoxLabeling:
    """Maximizer of joint score plus epsilon times the task loss against ref.

    The task loss decomposes per proposal, so augmenting each score entry with
    (epsilon / B) times the per-box loss of choosing that class reduces the
    problem to a plain constrained argmax over the augmented matrix. Geometry
    in the loss comes from decoding the offsets of each candidate class.
    """
    if not np.isfinite(epsilon):
        raise ContractViolation(f"non-finite epsilon {epsilon}")
    B, C = G.num_proposals, G.num_classes
    if len(ref) != B:
        raise ContractViolation(f"reference labeling length {len(ref)} != B={B}")
    # classification part: every class differing from the reference pays 1
    aug = (np.arange(C + 1)[None, :] != ref.classes[:, None]).astype(np.float64)
    # localization part: only the reference's own foreground class can match
    fg = np.flatnonzero(ref.classes > 0)
    if fg.size and cfg.loss_ratio > 0.0:
        cls = ref.classes[fg]
        dec = decode_boxes(G.ref_boxes[fg], G.offsets[fg, cls])
        d = frame_coords(dec) - frame_coords(ref.boxes[fg])
        aug[fg, cls] += cfg.loss_ratio * _smooth_l1_sum(d)
    augmented = ScoreMatrix(G.scores + (epsilon / B) * aug, G.offsets, G.ref_boxes)
    return constrained_argmax(augmented, a)


def prose_heuristic_argmax(G: ScoreMatrix, a: ImageAnnotation) -> BoxLabeling:
    """Greedy variant kept for comparison: row argmax, then each missing
    annotated class claims its single best-scoring proposal.

    Classes are processed in ascending order and may overwrite one another on
    the same proposal, so the result is not always compatible and not always
    the true maximizer.
    """
    _check_instance(G, a)
    base = np.argmax(G.scores, axis=1)
    for j in a.required_classes():
        if j not in set(int(c) for c in base):
            base[int(np.argmax(G.scores[:, j]))] = j
    return _decode_at(G, base)
