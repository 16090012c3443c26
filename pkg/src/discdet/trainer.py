"""Alternating training of the two detection heads.

The conditional head takes direct-loss-minimization steps against labelings
drawn from the frozen prediction distribution; the prediction head then takes
plain gradient steps on its diversity objective against pseudo ground truths
sampled from the conditional head. Between the two phases the conditional
samples are thresholded and deduplicated into those pseudo ground truths.

Both cross terms are expectations over the other head, so both directions
train against draws rather than point estimates. Early in training the
prediction draws are high-entropy and spread the conditional head's reference
over many proposals; they concentrate as the prediction head sharpens.

All randomness flows through counter-style keys
(seed, round, phase, epoch, image index, draw), so reruns and any gradient
evaluation order see identical noise. Phase codes: 0 conditional updates,
1 pseudo ground truth sampling, 2 round metrics, 3 prediction references.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np

from .core import (BoxGeometry, BoxLabeling, ContractViolation, ImageAnnotation,
                   ImageSample)
from .diversity import DiscConfig, div_cond_cond, div_pred_cond, div_pred_pred
from .evalmetrics import Detection, corloc, nms, nms_indices
from .loss import LossConfig, decode_boxes
from .models import (CondParams, NoiseVector, PredParams, cond_forward, cond_score_grad,
                     draw_noise, init_cond_params, init_pred_params, params_finite,
                     params_scaled_add, pred_forward, pred_objective_grad,
                     _rng, _softmax)
from .sampler import constrained_argmax, loss_augmented_argmax

PHASE_COND = 0
PHASE_PSEUDO = 1
PHASE_METRICS = 2
PHASE_REF = 3


class NonFiniteGradient(RuntimeError):
    """A gradient estimate left the finite range; training must stop."""


@dataclass(frozen=True)
class TrainConfig:
    """Knobs for coordinate descent.

    k_samples, epsilon, gamma, loss_ratio, score_threshold and nms_iou follow
    the reference settings; eta is halved every outer round. The two
    *_self_diversity switches drop the corresponding self term from the
    objective, and zero_noise severs the conditional noise input, which
    together express the pointwise ablation variants.
    """

    gamma: float = 0.5
    k_samples: int = 5
    epsilon: float = 1.0
    eta: float = 0.01
    loss_ratio: float = 3.0
    score_threshold: float = 0.2
    nms_iou: float = 0.3
    outer_rounds: int = 6
    inner_epochs: int = 2
    seed: int = 0
    noise_dim: int = 4
    hidden_units: int = 0
    pred_self_diversity: bool = True
    cond_self_diversity: bool = True
    zero_noise: bool = False

    def __post_init__(self):
        if not (0.0 <= self.gamma <= 1.0):
            raise ContractViolation(f"gamma must lie in [0, 1], got {self.gamma}")
        least = 2 if self.cond_self_diversity else 1
        if self.k_samples < least:
            raise ContractViolation(
                f"k_samples must be >= {least} with cond_self_diversity={self.cond_self_diversity}")
        if not np.isfinite(self.epsilon) or self.epsilon == 0.0:
            raise ContractViolation(f"epsilon must be finite and nonzero, got {self.epsilon}")
        if not (np.isfinite(self.eta) and self.eta > 0.0):
            raise ContractViolation(f"eta must be positive, got {self.eta}")
        if self.loss_ratio < 0.0:
            raise ContractViolation(f"loss_ratio must be nonnegative, got {self.loss_ratio}")
        if not (0.0 <= self.score_threshold <= 1.0):
            raise ContractViolation(f"score_threshold must lie in [0, 1], got {self.score_threshold}")
        if not (0.0 < self.nms_iou <= 1.0):
            raise ContractViolation(f"nms_iou must lie in (0, 1], got {self.nms_iou}")
        if self.outer_rounds < 0:
            raise ContractViolation(f"outer_rounds must be nonnegative, got {self.outer_rounds}")
        if self.inner_epochs < 1:
            raise ContractViolation(f"inner_epochs must be positive, got {self.inner_epochs}")
        if self.noise_dim < 1:
            raise ContractViolation(f"noise_dim must be positive, got {self.noise_dim}")
        if self.hidden_units < 0:
            raise ContractViolation(f"hidden_units must be nonnegative, got {self.hidden_units}")

    def disc_config(self) -> DiscConfig:
        return DiscConfig(self.gamma, LossConfig(self.loss_ratio))

    def round_eta(self, round_idx: int) -> float:
        return self.eta * 0.5 ** round_idx


@dataclass(frozen=True)
class RoundMetrics:
    """Per-round record; seconds stays out of the deterministic metrics table."""

    round_idx: int
    eta: float
    cross: float
    self_cond: float
    self_pred: float
    disc: float
    corloc: Optional[float]
    seconds: float


def sample_conditional(theta_c: CondParams, sample: ImageSample, K: int, key_prefix,
                       zero_noise: bool = False):
    """K constrained samples from the conditional head for one image.

    Returns (labelings, noises, score_matrices); draw k extends the key prefix
    with k, so the set is reproducible regardless of evaluation order.
    """
    if K < 1:
        raise ContractViolation(f"need at least one sample, got K={K}")
    if not sample.annotation.required_classes():
        raise ContractViolation("conditional sampling needs at least one present class")
    dim = theta_c.input_dim - sample.feature_matrix().shape[1]
    if dim < 0:
        raise ContractViolation(
            f"conditional head expects {theta_c.input_dim} inputs, "
            f"features alone provide {sample.feature_matrix().shape[1]}")
    labelings: List[BoxLabeling] = []
    noises: List[NoiseVector] = []
    mats = []
    for k in range(K):
        if zero_noise:
            z = NoiseVector(np.zeros(dim))
        else:
            z = draw_noise(tuple(key_prefix) + (k,), dim)
        G = cond_forward(theta_c, sample, z)
        labelings.append(constrained_argmax(G, sample.annotation))
        noises.append(z)
        mats.append(G)
    return labelings, noises, mats


def postprocess_samples(labelings: Sequence[BoxLabeling], scores, annotation: ImageAnnotation,
                        cfg: TrainConfig) -> List[BoxLabeling]:
    """Threshold plus per-class suppression, turning raw samples into pseudo truths.

    A box survives when its row-normalized class probability reaches
    cfg.score_threshold and greedy same-class suppression at cfg.nms_iou keeps
    it. Any required class whose boxes were all dropped gets its best-scoring
    original box back, so the result always satisfies the annotation. Dropped
    boxes are relabeled background; geometry stays as sampled.
    """
    if len(labelings) != len(scores):
        raise ContractViolation(f"{len(labelings)} labelings vs {len(scores)} score matrices")
    out: List[BoxLabeling] = []
    for y, G in zip(labelings, scores):
        B = len(y)
        if G.num_proposals != B:
            raise ContractViolation(f"labeling length {B} != score rows {G.num_proposals}")
        probs = _softmax(G.scores)[np.arange(B), y.classes]
        keep = np.zeros(B, dtype=bool)
        for c in np.unique(y.classes):
            if c == 0:
                continue
            idx = np.flatnonzero((y.classes == c) & (probs >= cfg.score_threshold))
            if idx.size:
                geoms = [BoxGeometry.from_array(y.boxes[i]) for i in idx]
                kept = nms_indices(geoms, [probs[i] for i in idx], cfg.nms_iou)
                keep[idx[kept]] = True
        for c in annotation.required_classes():
            if not keep[y.classes == c].any():
                cand = np.flatnonzero(y.classes == c)
                if cand.size == 0:
                    raise ContractViolation(f"sample carries no box of required class {c}")
                keep[cand[int(np.argmax(probs[cand]))]] = True
        out.append(BoxLabeling(np.where(keep, y.classes, 0), y.boxes))
    return out


def cond_gradient_estimate(theta_c: CondParams, sample: ImageSample,
                           y_p_refs: Sequence[BoxLabeling], cfg: TrainConfig,
                           key_prefix) -> CondParams:
    """Direct-loss gradient estimate of the conditional objective for one image.

    Estimate = (1/(KB)) sum_k [grad S_k at the loss-augmented maximizer against
    the k-th prediction draw, minus grad S_k at the plain maximizer], minus
    gamma times (2/(K(K-1)B)) over ordered pairs k != k' of [grad S_k at the
    maximizer augmented against sample k', minus grad S_k at sample k'].

    The cross term is an expectation over both heads, so it pairs each noise
    draw with its own labeling drawn from the prediction distribution. A single
    reference in y_p_refs is shared by every draw.
    """
    K = cfg.k_samples
    if len(y_p_refs) == 1:
        y_p_refs = list(y_p_refs) * K
    if len(y_p_refs) != K:
        raise ContractViolation(
            f"need 1 or K={K} prediction references, got {len(y_p_refs)}")
    loss_cfg = LossConfig(cfg.loss_ratio)
    labelings, noises, mats = sample_conditional(
        theta_c, sample, K, key_prefix, zero_noise=cfg.zero_noise)
    B = sample.num_proposals

    # cross term against the prediction draws
    acc = [np.zeros_like(a) for a in theta_c.arrays()]
    for k in range(K):
        y_a = loss_augmented_argmax(mats[k], sample.annotation, y_p_refs[k],
                                    cfg.epsilon, loss_cfg)
        g_pos = cond_score_grad(theta_c, sample, noises[k], y_a)
        g_neg = cond_score_grad(theta_c, sample, noises[k], labelings[k])
        for a, p, n in zip(acc, g_pos.arrays(), g_neg.arrays()):
            a += p - n
    scale = 1.0 / (K * B)
    est = [a * scale for a in acc]

    if cfg.cond_self_diversity and cfg.gamma > 0.0:
        acc2 = [np.zeros_like(a) for a in theta_c.arrays()]
        for k in range(K):
            for kp in range(K):
                if kp == k:
                    continue
                y_b = loss_augmented_argmax(
                    mats[k], sample.annotation, labelings[kp], cfg.epsilon, loss_cfg)
                g_pos = cond_score_grad(theta_c, sample, noises[k], y_b)
                g_neg = cond_score_grad(theta_c, sample, noises[k], labelings[kp])
                for a, p, n in zip(acc2, g_pos.arrays(), g_neg.arrays()):
                    a += p - n
        scale2 = cfg.gamma * 2.0 / (K * (K - 1) * B)
        est = [e - scale2 * a for e, a in zip(est, acc2)]
    return CondParams(*est)


def cond_step(theta_c: CondParams, batch: Sequence[ImageSample],
              pred_outputs: Dict[int, Sequence[BoxLabeling]], cfg: TrainConfig,
              key_prefix, eta: Optional[float] = None) -> CondParams:
    """One descent step of the conditional head on a batch.

    pred_outputs maps image index to the fixed prediction-head labelings used
    as pseudo ground truth, one per draw or a singleton shared by all draws.
    Contributions are averaged in image-index order, so batch-internal
    ordering never changes the update.
    """
    if not batch:
        raise ContractViolation("empty batch")
    step = eta if eta is not None else cfg.eta
    total = None
    for sample in sorted(batch, key=lambda s: s.image_id):
        if sample.image_id not in pred_outputs:
            raise ContractViolation(f"no prediction output for image {sample.image_id}")
        g = cond_gradient_estimate(theta_c, sample, pred_outputs[sample.image_id], cfg,
                                   tuple(key_prefix) + (sample.image_id,))
        if not params_finite(g):
            raise NonFiniteGradient(f"image {sample.image_id}: non-finite conditional gradient")
        total = g if total is None else params_scaled_add(total, g, 1.0)
    return params_scaled_add(theta_c, total, -step / len(batch))


def pred_step(theta_p: PredParams, batch: Sequence[ImageSample],
              pseudo_gts: Dict[int, Sequence[BoxLabeling]], cfg: TrainConfig,
              eta: Optional[float] = None):
    """One descent step of the prediction head on a batch.

    pseudo_gts maps image index to that image's post-processed conditional
    samples. Returns (updated parameters, batch-mean objective value before
    the step). Contributions are averaged in image-index order.
    """
    if not batch:
        raise ContractViolation("empty batch")
    step = eta if eta is not None else cfg.eta
    disc_cfg = cfg.disc_config()
    total = None
    value = 0.0
    for sample in sorted(batch, key=lambda s: s.image_id):
        if sample.image_id not in pseudo_gts:
            raise ContractViolation(f"no pseudo ground truth for image {sample.image_id}")
        v, g = pred_objective_grad(theta_p, sample, pseudo_gts[sample.image_id], disc_cfg,
                                   include_self=cfg.pred_self_diversity)
        if not params_finite(g):
            raise NonFiniteGradient(f"image {sample.image_id}: non-finite prediction gradient")
        value += v
        total = g if total is None else params_scaled_add(total, g, 1.0)
    return params_scaled_add(theta_p, total, -step / len(batch)), value / len(batch)


def sample_prediction(theta_p: PredParams, sample: ImageSample, K: int,
                      key_prefix) -> List[BoxLabeling]:
    """K labelings drawn from the factorized prediction distribution.

    Each proposal draws its class from the per-row probabilities and carries
    the geometry decoded for that class; background keeps the proposal box.
    The distribution is annotation-agnostic, so draws need not contain the
    annotated classes. Draw k extends the key prefix with k.
    """
    if K < 1:
        raise ContractViolation(f"need at least one draw, got K={K}")
    P = pred_forward(theta_p, sample)
    B = P.num_proposals
    cum = np.cumsum(P.probs, axis=1)
    out: List[BoxLabeling] = []
    for k in range(K):
        u = _rng(tuple(key_prefix) + (k,)).random(B)
        classes = np.minimum((u[:, None] >= cum).sum(axis=1), P.num_classes)
        boxes = decode_boxes(P.ref_boxes, P.offsets[np.arange(B), classes])
        boxes = np.where((classes > 0)[:, None], boxes, P.ref_boxes)
        out.append(BoxLabeling(classes, boxes))
    return out


def predict_detections(theta_p: PredParams, sample: ImageSample,
                       score_threshold: float = 0.0, nms_iou: float = 0.3) -> List[Detection]:
    """Decode the prediction head into per-class suppressed detections."""
    P = pred_forward(theta_p, sample)
    B, C = P.num_proposals, P.num_classes
    dets: List[Detection] = []
    for c in range(1, C + 1):
        boxes = decode_boxes(P.ref_boxes, P.offsets[:, c])
        cand = [Detection(sample.image_id, c, BoxGeometry.from_array(boxes[i]),
                          float(P.probs[i, c]))
                for i in range(B) if P.probs[i, c] >= score_threshold]
        dets.extend(nms(cand, nms_iou))
    return dets


def _dataset_corloc(theta_p: PredParams, dataset: Sequence[ImageSample],
                    nms_iou: float) -> Optional[float]:
    withgt = [s for s in dataset if s.ground_truth is not None]
    if not withgt:
        return None
    dets: List[Detection] = []
    gts = []
    for s in withgt:
        dets.extend(predict_detections(theta_p, s, 0.0, nms_iou))
        gts.extend((s.image_id, c, g) for c, g in s.ground_truth)
    _, macro = corloc(dets, gts)
    return macro


def round_report(theta_p: PredParams, theta_c: CondParams, dataset: Sequence[ImageSample],
                 cfg: TrainConfig, round_idx: int):
    """Dataset-mean diversity terms plus CorLoc for one parameter snapshot."""
    disc_cfg = cfg.disc_config()
    cross = self_cond = self_pred = 0.0
    for sample in dataset:
        prefix = (cfg.seed, round_idx, PHASE_METRICS, 0, sample.image_id)
        labelings, _, _ = sample_conditional(
            theta_c, sample, cfg.k_samples, prefix, zero_noise=cfg.zero_noise)
        P = pred_forward(theta_p, sample)
        cross += div_pred_cond(P, labelings, disc_cfg)
        if cfg.k_samples >= 2:
            self_cond += div_cond_cond(labelings, disc_cfg)
        self_pred += div_pred_pred(P, disc_cfg)
    n = len(dataset)
    cross, self_cond, self_pred = cross / n, self_cond / n, self_pred / n
    value = cross - cfg.gamma * self_cond - (1.0 - cfg.gamma) * self_pred
    return cross, self_cond, self_pred, value, _dataset_corloc(theta_p, dataset, cfg.nms_iou)


def initial_params(cfg: TrainConfig, feature_dim: int, num_classes: int):
    """The deterministic starting point of coordinate descent."""
    theta_p = init_pred_params(num_classes, feature_dim, (cfg.seed, 0), cfg.hidden_units)
    theta_c = init_cond_params(num_classes, feature_dim, cfg.noise_dim, (cfg.seed, 1),
                               cfg.hidden_units)
    return theta_p, theta_c


def coordinate_descent(dataset: Sequence[ImageSample], cfg: TrainConfig, init=None,
                       start_round: int = 0, on_round=None):
    """Alternating optimization of the two heads over the weak dataset.

    Each round first updates the conditional head against the frozen
    prediction outputs, then regenerates pseudo ground truths and updates the
    prediction head. Passing (theta_p, theta_c) as init with a start_round
    resumes a checkpointed run bit-exactly, because every noise draw is keyed
    by the absolute round index. on_round, when given, receives each
    RoundMetrics together with the current parameters as the round finishes.

    Returns (theta_p, theta_c, metrics list).
    """
    if not dataset:
        raise ContractViolation("empty dataset")
    order = sorted(dataset, key=lambda s: s.image_id)
    ids = [s.image_id for s in order]
    if len(set(ids)) != len(ids):
        raise ContractViolation("duplicate image indices in dataset")
    feature_dim = order[0].feature_matrix().shape[1]
    num_classes = order[0].annotation.num_classes
    if init is None:
        theta_p, theta_c = initial_params(cfg, feature_dim, num_classes)
    else:
        theta_p, theta_c = init

    metrics: List[RoundMetrics] = []
    for r in range(start_round, cfg.outer_rounds):
        t0 = time.perf_counter()
        eta_r = cfg.round_eta(r)

        pred_outputs = {
            s.image_id: sample_prediction(
                theta_p, s, cfg.k_samples, (cfg.seed, r, PHASE_REF, 0, s.image_id))
            for s in order}
        for epoch in range(cfg.inner_epochs):
            prefix = (cfg.seed, r, PHASE_COND, epoch)
            for sample in order:
                theta_c = cond_step(theta_c, [sample], pred_outputs, cfg, prefix, eta_r)

        pseudo: Dict[int, List[BoxLabeling]] = {}
        for sample in order:
            prefix = (cfg.seed, r, PHASE_PSEUDO, 0, sample.image_id)
            labelings, _, mats = sample_conditional(
                theta_c, sample, cfg.k_samples, prefix, zero_noise=cfg.zero_noise)
            pseudo[sample.image_id] = postprocess_samples(
                labelings, mats, sample.annotation, cfg)
        for epoch in range(cfg.inner_epochs):
            for sample in order:
                theta_p, _ = pred_step(theta_p, [sample], pseudo, cfg, eta_r)

        cross, self_cond, self_pred, value, cl = round_report(theta_p, theta_c, order, cfg, r)
        record = RoundMetrics(r, eta_r, cross, self_cond, self_pred, value, cl,
                              time.perf_counter() - t0)
        metrics.append(record)
        if on_round is not None:
            on_round(record, theta_p, theta_c)
    return theta_p, theta_c, metrics
