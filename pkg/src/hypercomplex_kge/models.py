"""QMult, OMult, ConvQ and ConvO scoring functions.

All four models share one pipeline for a batch of ``(h, r)`` pairs::

    h, r  ->  normalize  ->  p = h * r          (Hamilton or octonion product)
                         ->  q = gate(h, r) o p (ConvQ / ConvO only)
    score(h, r, x) = <q, e_x>                    for every entity x

Embedding tables have shape ``(n, C, d)``, so the all-entity scores reduce
to one ``(B, C*d) @ (C*d, N)`` matrix product.  The backward pass is written
out by hand and mirrors :func:`encode` step for step.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import algebra
from . import diffkernels as dk

QMULT = "QMult"
OMULT = "OMult"
CONVQ = "ConvQ"
CONVO = "ConvO"
MODEL_KINDS = (QMULT, OMULT, CONVQ, CONVO)
NORM_MODES = ("batch", "unit", "none")

_COMPONENTS = {QMULT: 4, CONVQ: 4, OMULT: 8, CONVO: 8}
_ALIASES = {k.lower(): k for k in MODEL_KINDS}


class ModelConfigError(ValueError):
    """Invalid model hyperparameters."""


class StructureError(ValueError):
    """The parameters do not support the requested operation."""


def canonical_kind(kind: str) -> str:
    try:
        return _ALIASES[kind.lower()]
    except KeyError:
        raise ModelConfigError(f"unknown model kind {kind!r}; expected one of {MODEL_KINDS}") from None


def n_components(kind: str) -> int:
    return _COMPONENTS[canonical_kind(kind)]


def is_conv(kind: str) -> bool:
    return canonical_kind(kind) in (CONVQ, CONVO)


@dataclass
class ConvConfig:
    n_filters: int = 16
    kernel_size: int = 3
    input_dropout: float = 0.3
    feature_dropout: float = 0.4
    hidden_dropout: float = 0.3

    def __post_init__(self):
        if self.n_filters < 1:
            raise ModelConfigError("n_filters must be >= 1")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ModelConfigError("kernel_size must be a positive odd integer")
        for rate in (self.input_dropout, self.feature_dropout, self.hidden_dropout):
            if not 0.0 <= rate < 1.0:
                raise ModelConfigError(f"dropout rate {rate} outside [0, 1)")


@dataclass
class ModelParams:
    """Learnable tensors plus batch-norm running statistics.

    ``tensors`` holds every trainable array by name.  The ``gamma``/``beta``
    arrays of each :class:`~hypercomplex_kge.diffkernels.BatchNormState` in
    ``bn`` are the very same objects as ``tensors["<bn>.gamma"]`` and
    ``tensors["<bn>.beta"]``, so in-place optimizer updates reach both.
    """

    model_kind: str
    norm_mode: str
    d: int
    tensors: dict[str, np.ndarray]
    bn: dict[str, dk.BatchNormState] = field(default_factory=dict)
    conv: ConvConfig | None = None
    vocabulary_hash: str | None = None
    embed_dropout: float = 0.0
    product_dropout: float = 0.0

    @property
    def n_components(self) -> int:
        return n_components(self.model_kind)

    @property
    def entity_table(self) -> np.ndarray:
        return self.tensors["entity"]

    @property
    def relation_table(self) -> np.ndarray:
        return self.tensors["relation"]

    @property
    def n_entities(self) -> int:
        return self.tensors["entity"].shape[0]

    @property
    def n_relations(self) -> int:
        return self.tensors["relation"].shape[0]

    def conv_shape(self) -> tuple[int, int]:
        """Height and width of the stacked ``[h, r]`` image."""
        return 2 * self.n_components, self.d

    def copy(self) -> ModelParams:
        tensors = {k: v.copy() for k, v in self.tensors.items()}
        bn = {}
        for name, st in self.bn.items():
            bn[name] = dk.BatchNormState(
                gamma=tensors[f"{name}.gamma"],
                beta=tensors[f"{name}.beta"],
                running_mean=st.running_mean.copy(),
                running_var=st.running_var.copy(),
                momentum=st.momentum,
            )
        conv = ConvConfig(**asdict(self.conv)) if self.conv is not None else None
        return ModelParams(
            self.model_kind,
            self.norm_mode,
            self.d,
            tensors,
            bn,
            conv,
            self.vocabulary_hash,
            self.embed_dropout,
            self.product_dropout,
        )

    def n_parameters(self) -> int:
        return int(sum(v.size for v in self.tensors.values()))


def _attach_bn(tensors, name, n_features, momentum, dtype):
    st = dk.BatchNormState.create(n_features, momentum, dtype)
    tensors[f"{name}.gamma"] = st.gamma
    tensors[f"{name}.beta"] = st.beta
    return st


def init_params(
    n_entities: int,
    n_relations: int,
    d: int,
    model_kind: str = QMULT,
    norm_mode: str = "batch",
    conv: ConvConfig | None = None,
    seed: int = 1,
    dtype=np.float64,
    bn_momentum: float = 0.1,
    embed_dropout: float = 0.0,
    product_dropout: float = 0.0,
) -> ModelParams:
    """Fresh parameters: embeddings ~ N(0, 0.1^2), Kaiming-uniform conv weights.

    Deterministic for a given ``seed``.  ``embed_dropout`` acts on the
    normalized head and relation before the product, ``product_dropout`` on
    the (gated) product before the inner product with the tails.
    """
    kind = canonical_kind(model_kind)
    for rate in (embed_dropout, product_dropout):
        if not 0.0 <= rate < 1.0:
            raise ModelConfigError(f"dropout rate {rate} outside [0, 1)")
    if d < 1:
        raise ModelConfigError("embedding dimension d must be >= 1")
    if norm_mode not in NORM_MODES:
        raise ModelConfigError(f"norm_mode must be one of {NORM_MODES}, got {norm_mode!r}")
    c = _COMPONENTS[kind]
    rng = np.random.default_rng(seed)
    tensors = {
        "entity": rng.normal(0.0, 0.1, size=(n_entities, c, d)).astype(dtype),
        "relation": rng.normal(0.0, 0.1, size=(n_relations, c, d)).astype(dtype),
    }
    bn = {}
    if norm_mode == "batch":
        bn["bn_head"] = _attach_bn(tensors, "bn_head", c * d, bn_momentum, dtype)
        bn["bn_rel"] = _attach_bn(tensors, "bn_rel", c * d, bn_momentum, dtype)
    if is_conv(kind):
        conv = conv or ConvConfig()
        k = conv.kernel_size
        fan_in = k * k
        bound = np.sqrt(6.0 / fan_in)
        tensors["conv.kernel"] = rng.uniform(-bound, bound, size=(conv.n_filters, 1, k, k)).astype(dtype)
        n_flat = conv.n_filters * 2 * c * d
        bound = np.sqrt(6.0 / n_flat)
        tensors["conv.W"] = rng.uniform(-bound, bound, size=(n_flat, c * d)).astype(dtype)
        tensors["conv.b"] = np.zeros(c * d, dtype=dtype)
        if norm_mode == "batch":
            bn["bn_conv"] = _attach_bn(tensors, "bn_conv", n_flat, bn_momentum, dtype)
            bn["bn_gate"] = _attach_bn(tensors, "bn_gate", c * d, bn_momentum, dtype)
    else:
        conv = None
    return ModelParams(kind, norm_mode, d, tensors, bn, conv, None, embed_dropout, product_dropout)


# ---------------------------------------------------------------------------
# forward / backward


def _unit_backward(dy, v):
    n = np.sqrt(np.sum(v * v, axis=-2, keepdims=True))
    denom = n + algebra.UNIT_EPS
    safe_n = np.where(n > 0, n, 1.0)
    proj = np.sum(dy * v, axis=-2, keepdims=True)
    return dy / denom - v * proj / (denom * denom * safe_n)


def conv_gate_forward(params: ModelParams, hn, rn, train=False, rng=None):
    """Gate ``f(vec(f([h, r] * w)) W + b)`` for normalized ``hn, rn`` of shape (B, C, d)."""
    if params.conv is None or "conv.kernel" not in params.tensors:
        raise StructureError(f"{params.model_kind} has no convolutional head")
    cfg = params.conv
    T = params.tensors
    B, C, d = hn.shape
    img = np.concatenate([hn, rn], axis=1)[:, None, :, :]
    x, c_in = dk.dropout_forward(img, cfg.input_dropout, train, rng)
    fmap, c_conv = dk.conv2d_forward(x, T["conv.kernel"], padding=cfg.kernel_size // 2)
    flat = fmap.reshape(B, -1)
    c_bn = None
    if "bn_conv" in params.bn:
        flat, c_bn = dk.batchnorm1d_forward(flat, params.bn["bn_conv"], train)
    flat, c_relu1 = dk.relu_forward(flat)
    flat, c_fd = dk.dropout_forward(flat, cfg.feature_dropout, train, rng)
    z, c_aff = dk.affine_forward(flat, T["conv.W"], T["conv.b"])
    # normalizing the pre-activation keeps the gate's ReLU from dying early in training
    c_bn_gate = None
    if "bn_gate" in params.bn:
        z, c_bn_gate = dk.batchnorm1d_forward(z, params.bn["bn_gate"], train)
    g, c_relu2 = dk.relu_forward(z)
    g, c_hd = dk.dropout_forward(g, cfg.hidden_dropout, train, rng)
    cache = (fmap.shape, c_in, c_conv, c_bn, c_relu1, c_fd, c_aff, c_bn_gate, c_relu2, c_hd)
    return g.reshape(B, C, d), cache


def conv_gate_backward(dgate, cache, grads):
    """Accumulate head-parameter gradients into ``grads``; return ``(dh, dr)``."""
    fmap_shape, c_in, c_conv, c_bn, c_relu1, c_fd, c_aff, c_bn_gate, c_relu2, c_hd = cache
    B, C, d = dgate.shape
    dg = dk.dropout_backward(dgate.reshape(B, -1), c_hd)
    dz = dk.relu_backward(dg, c_relu2)
    if c_bn_gate is not None:
        dz, dgam, dbet = dk.batchnorm1d_backward(dz, c_bn_gate)
        grads["bn_gate.gamma"] = dgam
        grads["bn_gate.beta"] = dbet
    dflat, dW, db = dk.affine_backward(dz, c_aff)
    grads["conv.W"] = dW
    grads["conv.b"] = db
    dflat = dk.dropout_backward(dflat, c_fd)
    dflat = dk.relu_backward(dflat, c_relu1)
    if c_bn is not None:
        dflat, dgam, dbet = dk.batchnorm1d_backward(dflat, c_bn)
        grads["bn_conv.gamma"] = dgam
        grads["bn_conv.beta"] = dbet
    dx, dkern = dk.conv2d_backward(dflat.reshape(fmap_shape), c_conv)
    grads["conv.kernel"] = dkern
    dimg = dk.dropout_backward(dx, c_in)[:, 0]
    return dimg[:, :C], dimg[:, C:]


def _normalize_forward(params, x, bn_name, train, unit):
    B = x.shape[0]
    if params.norm_mode == "batch":
        out, c = dk.batchnorm1d_forward(x.reshape(B, -1), params.bn[bn_name], train)
        return out.reshape(x.shape), ("batch", c)
    if params.norm_mode == "unit" and unit:
        return algebra.unit_normalize(x), ("unit", x)
    return x, ("none", None)


def _normalize_backward(dy, cache, bn_name, grads):
    kind, c = cache
    if kind == "batch":
        dx, dgam, dbet = dk.batchnorm1d_backward(dy.reshape(dy.shape[0], -1), c)
        grads[f"{bn_name}.gamma"] = dgam
        grads[f"{bn_name}.beta"] = dbet
        return dx.reshape(dy.shape)
    if kind == "unit":
        return _unit_backward(dy, c)
    return dy


def encode(params: ModelParams, h, r, train=False, rng=None, gate=None):
    """Gated hypercomplex product ``q`` (B, C, d) for pairs ``(h, r)``.

    ``gate`` overrides the convolutional head with a fixed array broadcastable
    to (B, C, d); pass ``1.0`` to recover the ungated product.
    """
    h = np.asarray(h, dtype=np.int64).reshape(-1)
    r = np.asarray(r, dtype=np.int64).reshape(-1)
    E, R = params.tensors["entity"], params.tensors["relation"]
    if h.size and (h.min() < 0 or h.max() >= len(E)):
        raise IndexError("entity id out of range")
    if r.size and (r.min() < 0 or r.max() >= len(R)):
        raise IndexError("relation id out of range")
    hn, c_h = _normalize_forward(params, E[h], "bn_head", train, unit=False)
    rn, c_r = _normalize_forward(params, R[r], "bn_rel", train, unit=True)
    hn, c_hd = dk.dropout_forward(hn, params.embed_dropout, train, rng)
    rn, c_rd = dk.dropout_forward(rn, params.embed_dropout, train, rng)
    p = algebra.hyper_mul(hn, rn)
    c_gate = None
    g = None
    if gate is not None:
        g = np.broadcast_to(np.asarray(gate, dtype=p.dtype), p.shape)
        q = g * p
    elif is_conv(params.model_kind):
        g, c_gate = conv_gate_forward(params, hn, rn, train, rng)
        q = g * p
    else:
        q = p
    q, c_qd = dk.dropout_forward(q, params.product_dropout, train, rng)
    cache = (h, r, hn, rn, c_h, c_r, c_hd, c_rd, p, g, c_gate, c_qd)
    return q.astype(E.dtype, copy=False), cache


def encode_backward(params: ModelParams, dq, cache, grads):
    h, r, hn, rn, c_h, c_r, c_hd, c_rd, p, g, c_gate, c_qd = cache
    dq = dk.dropout_backward(dq, c_qd)
    dp = dq if g is None else dq * g
    dhn, drn = algebra.mul_backward(dp, hn, rn)
    if c_gate is not None:
        dgh, dgr = conv_gate_backward(dq * p, c_gate, grads)
        dhn = dhn + dgh
        drn = drn + dgr
    dhn = dk.dropout_backward(dhn, c_hd)
    drn = dk.dropout_backward(drn, c_rd)
    dh = _normalize_backward(dhn, c_h, "bn_head", grads)
    dr = _normalize_backward(drn, c_r, "bn_rel", grads)
    dE = grads.setdefault("entity", np.zeros_like(params.tensors["entity"]))
    dR = grads.setdefault("relation", np.zeros_like(params.tensors["relation"]))
    np.add.at(dE, h, dh)
    np.add.at(dR, r, dr)
    return grads


def forward(params: ModelParams, h, r, train=False, rng=None, gate=None):
    """Scores of every entity as tail for each pair: shape (B, n_entities)."""
    q, c_enc = encode(params, h, r, train, rng, gate)
    E = params.tensors["entity"]
    B = q.shape[0]
    scores = q.reshape(B, -1) @ E.reshape(len(E), -1).T
    return scores, (q, c_enc)


def backward(params: ModelParams, dscores, cache) -> dict:
    """Gradients of ``sum(dscores * scores)`` w.r.t. every tensor touched."""
    q, c_enc = cache
    E = params.tensors["entity"]
    B = q.shape[0]
    grads = {"entity": (dscores.T @ q.reshape(B, -1)).reshape(E.shape)}
    dq = (dscores @ E.reshape(len(E), -1)).reshape(q.shape)
    return encode_backward(params, dq, c_enc, grads)


# ---------------------------------------------------------------------------
# public scoring API


def _mode_train(mode) -> bool:
    if mode in ("train", True):
        return True
    if mode in ("eval", False, None):
        return False
    raise ModelConfigError(f"mode must be 'train' or 'eval', got {mode!r}")


def score_all_tails(params: ModelParams, h, r, mode="eval", rng=None) -> np.ndarray:
    """Score plane over all entities; 1-D for scalar ids, (B, N) for id arrays."""
    scalar = np.ndim(h) == 0
    scores, _ = forward(params, np.atleast_1d(h), np.atleast_1d(r), _mode_train(mode), rng)
    return scores[0] if scalar else scores


def score_triples(params: ModelParams, h, r, t, mode="eval", rng=None) -> np.ndarray:
    """Scores of explicit triples without materializing all tails."""
    q, _ = encode(params, np.atleast_1d(h), np.atleast_1d(r), _mode_train(mode), rng)
    t = np.atleast_1d(np.asarray(t, dtype=np.int64))
    return np.sum(q * params.tensors["entity"][t], axis=(-2, -1))


def _score_kind(kind, params, h, r, t, mode):
    if params.model_kind != kind:
        raise StructureError(f"expected {kind} parameters, got {params.model_kind}")
    return float(score_triples(params, h, r, t, mode)[0])


def score_qmult(h, r, t, params: ModelParams, mode="eval") -> float:
    return _score_kind(QMULT, params, h, r, t, mode)


def score_omult(h, r, t, params: ModelParams, mode="eval") -> float:
    return _score_kind(OMULT, params, h, r, t, mode)


def score_convq(h, r, t, params: ModelParams, mode="eval") -> float:
    return _score_kind(CONVQ, params, h, r, t, mode)


def score_convo(h, r, t, params: ModelParams, mode="eval") -> float:
    return _score_kind(CONVO, params, h, r, t, mode)


SCORERS = {QMULT: score_qmult, OMULT: score_omult, CONVQ: score_convq, CONVO: score_convo}


def conv_gate(h, r, params: ModelParams, mode="eval", rng=None) -> np.ndarray:
    """The gate ``gamma`` (C, d) that ConvQ/ConvO multiply into the product."""
    _, cache = encode(params, np.atleast_1d(h), np.atleast_1d(r), _mode_train(mode), rng)
    g = cache[9]
    if cache[10] is None:
        raise StructureError(f"{params.model_kind} has no convolutional head")
    return g[0] if np.ndim(h) == 0 else g


def gated_score(h, r, t, gate=1.0) -> np.ndarray:
    """``<gate o (h * r), t>`` on explicit planes of shape (..., C, d)."""
    return np.sum(np.asarray(gate) * algebra.hyper_mul(h, r) * np.asarray(t), axis=(-2, -1))


def set_constant_gate(params: ModelParams, value: float = 1.0) -> None:
    """Zero the conv kernels and affine weights so the gate equals ``value``.

    With a gate batch norm its scale is zeroed and its shift set to ``value``,
    which makes the output constant in both training and eval mode.
    """
    if not is_conv(params.model_kind):
        raise StructureError(f"{params.model_kind} has no convolutional head")
    params.tensors["conv.kernel"][...] = 0.0
    params.tensors["conv.W"][...] = 0.0
    params.tensors["conv.b"][...] = value
    if "bn_gate" in params.bn:
        params.tensors["bn_gate.gamma"][...] = 0.0
        params.tensors["bn_gate.beta"][...] = value
