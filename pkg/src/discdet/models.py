"""Desk-scale detection heads and their hand-written gradients.

Both networks are linear heads over fixed proposal features (the conditional
head additionally sees a per-image noise vector). An optional single hidden
tanh layer sits behind the hidden_units switch; its backpropagation is written
out by hand so every gradient in the package stays finite-difference checkable.

The prediction head produces a per-proposal softmax plus per-class regression
offsets. The conditional head produces raw scores plus offsets; its gradients
are taken of the scalar

    score(y) = sum_i scores[i, y_i] - sum_{i: y_i > 0} smooth_l1(t[i, y_i] - encode(prop_i, y_box_i))

so the classification branch follows the selected classes and the regression
branch is penalized for drifting from the geometry of the labeling it is
evaluated against (zero, with zero gradient, for self-decoded labelings).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace
from typing import Optional, Tuple

import numpy as np

from .core import BoxLabeling, ClassDistribution, ContractViolation, ImageSample, ScoreMatrix
from .diversity import DiscConfig
from .loss import decode_boxes, encode_boxes, frame_coords, smooth_l1_grad, _smooth_l1_sum


def _frozen(a) -> np.ndarray:
    arr = np.array(a, dtype=np.float64)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class _HeadParams:
    """Weights of one head. class_w is (C+1, M), offset_w is (C+1, 4, M) with
    M the head input width (feature dim, or hidden width with a hidden layer)."""

    class_w: np.ndarray
    class_b: np.ndarray
    offset_w: np.ndarray
    offset_b: np.ndarray
    hidden_w: Optional[np.ndarray] = None
    hidden_b: Optional[np.ndarray] = None

    def __post_init__(self):
        cw, cb = _frozen(self.class_w), _frozen(self.class_b)
        ow, ob = _frozen(self.offset_w), _frozen(self.offset_b)
        R, M = cw.shape
        if cb.shape != (R,) or ow.shape != (R, 4, M) or ob.shape != (R, 4):
            raise ContractViolation("head parameter shapes disagree")
        object.__setattr__(self, "class_w", cw)
        object.__setattr__(self, "class_b", cb)
        object.__setattr__(self, "offset_w", ow)
        object.__setattr__(self, "offset_b", ob)
        if (self.hidden_w is None) != (self.hidden_b is None):
            raise ContractViolation("hidden weights and biases must come together")
        if self.hidden_w is not None:
            hw, hb = _frozen(self.hidden_w), _frozen(self.hidden_b)
            if hw.ndim != 2 or hw.shape[0] != M or hb.shape != (M,):
                raise ContractViolation("hidden layer shapes disagree with head width")
            object.__setattr__(self, "hidden_w", hw)
            object.__setattr__(self, "hidden_b", hb)

    @property
    def num_classes(self) -> int:
        return self.class_w.shape[0] - 1

    @property
    def input_dim(self) -> int:
        """Width of the raw input vector the head consumes."""
        if self.hidden_w is not None:
            return self.hidden_w.shape[1]
        return self.class_w.shape[1]

    def arrays(self) -> Tuple[np.ndarray, ...]:
        out = [self.class_w, self.class_b, self.offset_w, self.offset_b]
        if self.hidden_w is not None:
            out += [self.hidden_w, self.hidden_b]
        return tuple(out)

    def __eq__(self, other):
        if other.__class__ is not self.__class__:
            return NotImplemented
        if (self.hidden_w is None) != (other.hidden_w is None):
            return False
        return all(np.array_equal(a, b) for a, b in zip(self.arrays(), other.arrays()))


class PredParams(_HeadParams):
    """Parameters of the prediction network."""


class CondParams(_HeadParams):
    """Parameters of the conditional network (input is features plus noise)."""


@dataclass(frozen=True)
class NoiseVector:
    """Per-image noise draw for the conditional head, entries in [0, 1]."""

    z: np.ndarray

    def __post_init__(self):
        z = _frozen(self.z)
        if z.ndim != 1:
            raise ContractViolation("noise must be a 1-d vector")
        if not np.all(np.isfinite(z)) or z.min(initial=0.0) < 0.0 or z.max(initial=0.0) > 1.0:
            raise ContractViolation("noise entries must lie in [0, 1]")
        object.__setattr__(self, "z", z)

    @property
    def dim(self) -> int:
        return self.z.shape[0]

    def __eq__(self, other):
        if not isinstance(other, NoiseVector):
            return NotImplemented
        return np.array_equal(self.z, other.z)


def _rng(key) -> np.random.Generator:
    if isinstance(key, np.random.SeedSequence):
        ss = key
    else:
        ss = np.random.SeedSequence(key)
    return np.random.Generator(np.random.PCG64(ss))


def draw_noise(key, dim: int) -> NoiseVector:
    """Counter-style noise draw: the key alone determines the vector."""
    return NoiseVector(_rng(key).random(dim))


INIT_SCALE = 0.01


def _init(cls, num_classes: int, in_dim: int, key, hidden_units: int):
    rng = _rng(key)
    R = num_classes + 1
    M = hidden_units if hidden_units > 0 else in_dim
    u = lambda shape: rng.uniform(-INIT_SCALE, INIT_SCALE, size=shape)
    hw = hb = None
    if hidden_units > 0:
        hw = u((hidden_units, in_dim))
        hb = np.zeros(hidden_units)
    return cls(u((R, M)), np.zeros(R), u((R, 4, M)), np.zeros((R, 4)), hw, hb)


def init_pred_params(num_classes: int, feature_dim: int, key, hidden_units: int = 0) -> PredParams:
    return _init(PredParams, num_classes, feature_dim, key, hidden_units)


def init_cond_params(num_classes: int, feature_dim: int, noise_dim: int, key,
                     hidden_units: int = 0) -> CondParams:
    return _init(CondParams, num_classes, feature_dim + noise_dim, key, hidden_units)


def _head_forward(params: _HeadParams, X: np.ndarray):
    """Returns (A, logits, offsets): A is the head input after any hidden layer."""
    if X.shape[1] != params.input_dim:
        raise ContractViolation(f"input width {X.shape[1]} != expected {params.input_dim}")
    A = np.tanh(X @ params.hidden_w.T + params.hidden_b) if params.hidden_w is not None else X
    logits = A @ params.class_w.T + params.class_b
    t = np.einsum("rkm,bm->brk", params.offset_w, A) + params.offset_b[None]
    return A, logits, t


def _head_backward(params: _HeadParams, X: np.ndarray, A: np.ndarray,
                   dlogits: np.ndarray, dt: np.ndarray) -> _HeadParams:
    """Gradients of a scalar w.r.t. all parameters, given its gradients at the
    head outputs. Returns a parameter-shaped container of the same class."""
    d_class_w = dlogits.T @ A
    d_class_b = dlogits.sum(axis=0)
    d_offset_w = np.einsum("brk,bm->rkm", dt, A)
    d_offset_b = dt.sum(axis=0)
    if params.hidden_w is None:
        return params.__class__(d_class_w, d_class_b, d_offset_w, d_offset_b)
    dA = dlogits @ params.class_w + np.einsum("brk,rkm->bm", dt, params.offset_w)
    dpre = dA * (1.0 - A * A)
    return params.__class__(d_class_w, d_class_b, d_offset_w, d_offset_b,
                            dpre.T @ X, dpre.sum(axis=0))


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def pred_forward(theta: PredParams, sample: ImageSample) -> ClassDistribution:
    """Factorized per-proposal distribution with per-class regression offsets."""
    X = sample.feature_matrix()
    _, logits, t = _head_forward(theta, X)
    return ClassDistribution(_softmax(logits), t, sample.proposal_boxes())


def cond_forward(theta: CondParams, sample: ImageSample, z: NoiseVector) -> ScoreMatrix:
    """Raw score matrix for one noise draw; the noise is shared by every proposal."""
    F = sample.feature_matrix()
    X = np.concatenate([F, np.tile(z.z, (F.shape[0], 1))], axis=1)
    _, logits, t = _head_forward(theta, X)
    return ScoreMatrix(logits, t, sample.proposal_boxes())


def pred_labeling(theta: PredParams, sample: ImageSample) -> BoxLabeling:
    """Point prediction: per-proposal argmax class with its decoded geometry."""
    P = pred_forward(theta, sample)
    classes = np.argmax(P.probs, axis=1)
    B = P.num_proposals
    boxes = decode_boxes(P.ref_boxes, P.offsets[np.arange(B), classes])
    return BoxLabeling(classes, boxes)


def _cond_inputs(sample: ImageSample, z: NoiseVector):
    F = sample.feature_matrix()
    return np.concatenate([F, np.tile(z.z, (F.shape[0], 1))], axis=1)


def cond_score_value(theta: CondParams, sample: ImageSample, z: NoiseVector,
                     y: BoxLabeling) -> float:
    """The scalar whose parameter gradient cond_score_grad returns."""
    X = _cond_inputs(sample, z)
    _, logits, t = _head_forward(theta, X)
    B = len(y)
    if B != X.shape[0]:
        raise ContractViolation(f"labeling length {B} != B={X.shape[0]}")
    value = float(logits[np.arange(B), y.classes].sum())
    fg = np.flatnonzero(y.classes > 0)
    if fg.size:
        tau = encode_boxes(sample.proposal_boxes()[fg], y.boxes[fg])
        value -= float(np.sum(_smooth_l1_sum(t[fg, y.classes[fg]] - tau)))
    return value


def cond_score_grad(theta: CondParams, sample: ImageSample, z: NoiseVector,
                    y: BoxLabeling) -> CondParams:
    """Analytic parameter gradient of cond_score_value at labeling y."""
    X = _cond_inputs(sample, z)
    A, logits, t = _head_forward(theta, X)
    B, R = logits.shape
    if len(y) != B:
        raise ContractViolation(f"labeling length {len(y)} != B={B}")
    dlogits = np.zeros((B, R))
    dlogits[np.arange(B), y.classes] = 1.0
    dt = np.zeros((B, R, 4))
    fg = np.flatnonzero(y.classes > 0)
    if fg.size:
        tau = encode_boxes(sample.proposal_boxes()[fg], y.boxes[fg])
        dt[fg, y.classes[fg]] = -smooth_l1_grad(t[fg, y.classes[fg]] - tau)
    return _head_backward(theta, X, A, dlogits, dt)


def pred_objective_value(theta: PredParams, sample: ImageSample, samples,
                         cfg: DiscConfig, include_self: bool = True) -> float:
    """Scalar form of the prediction objective, for finite-difference checks."""
    value, _ = pred_objective_grad(theta, sample, samples, cfg, include_self)
    return value


def pred_objective_grad(theta: PredParams, sample: ImageSample, samples,
                        cfg: DiscConfig, include_self: bool = True):
    """Value and parameter gradient of the prediction objective for one image.

    The objective is the cross diversity against the given conditional samples
    minus (1 - gamma) times the prediction side's own diversity. Accepts one
    or more samples; the cross term averages over them.
    """
    if len(samples) < 1:
        raise ContractViolation("prediction objective needs at least one sample")
    X = sample.feature_matrix()
    A, logits, t = _head_forward(theta, X)
    B, R = logits.shape
    for s in samples:
        if len(s) != B:
            raise ContractViolation(f"sample length {len(s)} != B={B}")
    p = _softmax(logits)
    ref = sample.proposal_boxes()
    frames = frame_coords(decode_boxes(ref[:, None, :], t))
    K = len(samples)
    ratio = cfg.loss.loss_ratio
    class_ids = np.arange(R)[None, :]

    # average per-class delta against the samples, and its geometry gradient
    M_avg = np.zeros((B, R))
    dv = np.zeros((B, R, 4))
    for s in samples:
        M_avg += (class_ids != s.classes[:, None])
        fg = np.flatnonzero(s.classes > 0)
        if fg.size and ratio > 0.0:
            cls = s.classes[fg]
            d = frames[fg, cls] - frame_coords(s.boxes[fg])
            M_avg[fg, cls] += ratio * _smooth_l1_sum(d)
            dv[fg, cls] += ratio * smooth_l1_grad(d)
    M_avg /= K
    dv /= K

    cross = float(np.sum(p * M_avg)) / B
    self_pred = float(np.sum(p * (1.0 - p))) / B
    dp = M_avg / B
    value = cross
    if include_self:
        gamma_c = 1.0 - cfg.gamma
        value -= gamma_c * self_pred
        # d/dp of per-box (1 - sum p^2) is -2p; the objective subtracts the term
        dp += gamma_c * 2.0 * p / B

    # softmax chain rule, then geometry chain through box decoding
    dlogits = p * (dp - np.sum(dp * p, axis=1, keepdims=True))
    dv *= p[..., None] / B
    scale = np.ones((B, 1, 4))
    scale[:, 0, 0] = ref[:, 2]
    scale[:, 0, 1] = ref[:, 3]
    dt = dv * scale
    grads = _head_backward(theta, X, A, dlogits, dt)
    return value, grads


# persistence: a flat versioned binary record plus a plain-text sidecar

CHECKPOINT_MAGIC = b"DISCDET1"
_KINDS = {"pred": 0, "cond": 1}
_KIND_NAMES = {v: k for k, v in _KINDS.items()}


def save_checkpoint(path, params: _HeadParams, kind: str, config_hash: str = "") -> None:
    """Write parameters as magic, header, then row-major little-endian float64.

    A .meta sidecar records the kind, dimensions, and the config hash. Both
    files are deterministic functions of their inputs.
    """
    if kind not in _KINDS:
        raise ContractViolation(f"unknown checkpoint kind {kind!r}")
    R, M = params.class_w.shape
    H = 0 if params.hidden_w is None else params.hidden_w.shape[0]
    D_in = params.input_dim
    header = struct.pack("<BIIII", _KINDS[kind], R, M, H, D_in)
    blob = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in params.arrays())
    path = str(path)
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC + header + blob)
    meta = (f"kind = {kind}\nclasses = {R - 1}\nhead_width = {M}\n"
            f"hidden_units = {H}\ninput_dim = {D_in}\nconfig_hash = {config_hash}\n")
    with open(path + ".meta", "w", encoding="utf-8") as f:
        f.write(meta)


def load_checkpoint(path):
    """Read a checkpoint; returns (params, kind). Dimension and magic mismatches
    raise ContractViolation rather than yielding garbage parameters."""
    path = str(path)
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise ContractViolation(f"{path}: not a checkpoint (bad magic)")
    kind_id, R, M, H, D_in = struct.unpack_from("<BIIII", raw, 8)
    if kind_id not in _KIND_NAMES:
        raise ContractViolation(f"{path}: unknown checkpoint kind byte {kind_id}")
    shapes = [(R, M), (R,), (R, 4, M), (R, 4)]
    if H > 0:
        shapes += [(H, D_in), (H,)]
    need = sum(int(np.prod(s)) for s in shapes)
    body = np.frombuffer(raw, dtype="<f8", offset=8 + struct.calcsize("<BIIII"))
    if body.shape[0] != need:
        raise ContractViolation(f"{path}: payload holds {body.shape[0]} floats, header implies {need}")
    arrays = []
    pos = 0
    for s in shapes:
        n = int(np.prod(s))
        arrays.append(body[pos:pos + n].reshape(s))
        pos += n
    kind = _KIND_NAMES[kind_id]
    cls = PredParams if kind == "pred" else CondParams
    return cls(*arrays), kind


def read_checkpoint_meta(path) -> dict:
    meta = {}
    with open(str(path) + ".meta", "r", encoding="utf-8") as f:
        for line in f:
            if "=" in line:
                k, v = line.split("=", 1)
                meta[k.strip()] = v.strip()
    return meta


# small parameter-space helpers shared by the trainer and the checks

def params_scaled_add(p: _HeadParams, g: _HeadParams, scale: float) -> _HeadParams:
    """p + scale * g, elementwise over every weight array."""
    return p.__class__(*[a + scale * b for a, b in zip(p.arrays(), g.arrays())])


def params_finite(p: _HeadParams) -> bool:
    return all(np.all(np.isfinite(a)) for a in p.arrays())


def flatten_params(p: _HeadParams) -> np.ndarray:
    return np.concatenate([a.reshape(-1) for a in p.arrays()])


def unflatten_params(template: _HeadParams, vec: np.ndarray) -> _HeadParams:
    arrays = []
    pos = 0
    for a in template.arrays():
        n = a.size
        arrays.append(vec[pos:pos + n].reshape(a.shape))
        pos += n
    if pos != vec.size:
        raise ContractViolation(f"vector length {vec.size} != parameter count {pos}")
    return template.__class__(*arrays)
