"""Differentiable numpy kernels with hand-written backward passes.

Every ``*_forward`` returns ``(out, cache)`` and the matching ``*_backward``
takes ``(dout, cache)``.  Nothing here keeps global state: random masks come
from an explicit ``numpy.random.Generator`` and running statistics live in a
:class:`BatchNormState` owned by the caller.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

BN_EPS = 1e-5
PROB_CLAMP = 1e-7


class ShapeError(ValueError):
    """Operand extents are incompatible."""


class KernelConfigError(ValueError):
    """A kernel hyperparameter is outside its domain."""


# ---------------------------------------------------------------------------
# convolution


def conv_output_size(size: int, k: int, padding: int, stride: int) -> int:
    span = size + 2 * padding - k
    if span < 0:
        raise ShapeError(f"kernel {k} larger than padded input {size + 2 * padding}")
    if span % stride:
        raise ShapeError(f"(size + 2*padding - k) = {span} is not divisible by stride {stride}")
    return span // stride + 1


def conv2d_forward(x, w, padding=0, stride=1):
    """Cross-correlate ``x`` (N, Cin, H, W) with kernels ``w`` (F, Cin, kh, kw)."""
    if stride < 1:
        raise KernelConfigError("stride must be >= 1")
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d shapes {x.shape} and {w.shape} are incompatible")
    _, _, H, W = x.shape
    _, _, kh, kw = w.shape
    oh = conv_output_size(H, kh, padding, stride)
    ow = conv_output_size(W, kw, padding, stride)
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    # (N, Cin, oh, ow, kh, kw)
    cols = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    cols = cols[:, :, :oh, :ow]
    out = np.tensordot(cols, w, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    return out, (x.shape, xp, w, padding, stride)


def conv2d_backward(dout, cache):
    """Return ``(dx, dw)``."""
    x_shape, xp, w, padding, stride = cache
    _, _, kh, kw = w.shape
    _, _, oh, ow = dout.shape
    cols = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :oh, :ow]
    dw = np.tensordot(dout, cols, axes=([0, 2, 3], [0, 2, 3]))
    dxp = np.zeros_like(xp)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += np.tensordot(
                dout, w[:, :, i, j], axes=([1], [0])
            ).transpose(0, 3, 1, 2)
    H, W = x_shape[2], x_shape[3]
    dx = dxp[:, :, padding : padding + H, padding : padding + W]
    return dx, dw


# ---------------------------------------------------------------------------
# dense layers and pointwise maps


def affine_forward(x, w, b):
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0] or b.shape != (w.shape[1],):
        raise ShapeError(f"affine shapes x{x.shape} W{w.shape} b{b.shape} are incompatible")
    return x @ w + b, (x, w)


def affine_backward(dout, cache):
    """Return ``(dx, dw, db)``."""
    x, w = cache
    return dout @ w.T, x.T @ dout, dout.sum(axis=0)


def relu_forward(x):
    return np.maximum(x, 0.0), x


def relu_backward(dout, cache):
    return dout * (cache > 0)


def sigmoid(x):
    x = np.asarray(x, dtype=float)
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid_forward(x):
    out = sigmoid(x)
    return out, out


def sigmoid_backward(dout, cache):
    return dout * cache * (1.0 - cache)


def dropout_forward(x, rate, train, rng=None):
    """Inverted dropout; the identity outside training or at ``rate == 0``."""
    if not 0.0 <= rate < 1.0:
        raise KernelConfigError(f"dropout rate must lie in [0, 1), got {rate}")
    if not train or rate == 0.0:
        return x, None
    if rng is None:
        raise KernelConfigError("training-mode dropout needs an rng")
    mask = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return x * mask, mask


def dropout_backward(dout, cache):
    return dout if cache is None else dout * cache


# ---------------------------------------------------------------------------
# batch normalization


@dataclass
class BatchNormState:
    """Learnable affine parameters plus running statistics for one BN layer."""

    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1

    @classmethod
    def create(cls, n_features: int, momentum: float = 0.1, dtype=np.float64) -> BatchNormState:
        return cls(
            gamma=np.ones(n_features, dtype=dtype),
            beta=np.zeros(n_features, dtype=dtype),
            running_mean=np.zeros(n_features, dtype=dtype),
            running_var=np.ones(n_features, dtype=dtype),
            momentum=momentum,
        )


def batchnorm1d_forward(x, state: BatchNormState, train: bool):
    """Normalize the columns of ``x`` (N, K).

    In training mode the batch statistics (population variance) are used and
    the running statistics are updated in place; otherwise the running
    statistics are used and ``state`` is untouched.
    """
    if x.ndim != 2 or x.shape[1] != state.gamma.shape[0]:
        raise ShapeError(f"batchnorm expects (N, {state.gamma.shape[0]}), got {x.shape}")
    if train:
        n = x.shape[0]
        if n < 2:
            raise ShapeError("training-mode batch normalization needs at least 2 rows")
        mean = x.mean(axis=0)
        var = x.var(axis=0)
        m = state.momentum
        state.running_mean *= 1.0 - m
        state.running_mean += m * mean
        # running variance tracks the unbiased estimate
        state.running_var *= 1.0 - m
        state.running_var += m * var * n / (n - 1)
    else:
        mean, var = state.running_mean, state.running_var
    inv_std = 1.0 / np.sqrt(var + BN_EPS)
    xhat = (x - mean) * inv_std
    out = state.gamma * xhat + state.beta
    return out, (xhat, inv_std, state.gamma, train)


def batchnorm1d_backward(dout, cache):
    """Return ``(dx, dgamma, dbeta)``."""
    xhat, inv_std, gamma, train = cache
    dbeta = dout.sum(axis=0)
    dgamma = (dout * xhat).sum(axis=0)
    dxhat = dout * gamma
    if train:
        dx = inv_std * (dxhat - dxhat.mean(axis=0) - xhat * (dxhat * xhat).mean(axis=0))
    else:
        dx = dxhat * inv_std
    return dx, dgamma, dbeta


# ---------------------------------------------------------------------------
# loss


def bce_loss(y_hat, y):
    """Binary cross entropy averaged over every entry; ``y_hat`` is clamped first.

    Returns ``(loss, cache)``.
    """
    y_hat = np.asarray(y_hat, dtype=float)
    y = np.asarray(y, dtype=float)
    if y_hat.shape != y.shape:
        raise ShapeError(f"prediction shape {y_hat.shape} != target shape {y.shape}")
    p = np.clip(y_hat, PROB_CLAMP, 1.0 - PROB_CLAMP)
    loss = -np.mean(y * np.log(p) + (1.0 - y) * np.log1p(-p))
    return float(loss), (y_hat, p, y)


def bce_backward(cache):
    """Gradient of :func:`bce_loss` w.r.t. the unclamped predictions."""
    y_hat, p, y = cache
    inside = (y_hat >= PROB_CLAMP) & (y_hat <= 1.0 - PROB_CLAMP)
    g = (p - y) / (p * (1.0 - p)) / y.size
    return g * inside


def bce_with_logits(scores, y):
    """Sigmoid followed by :func:`bce_loss`, with the fused logit gradient.

    The reported loss uses the clamped probabilities; the gradient is
    ``(sigmoid(s) - y) / n``, the exact derivative of the unclamped loss, so
    saturated scores keep receiving signal.
    """
    p = sigmoid(scores)
    loss, _ = bce_loss(p, y)
    return loss, (p - y) / y.size


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState) -> None:
    """Bias-corrected Adam update applied in place to ``params``.

    Parameters without an entry in ``grads`` are left alone, but the step
    counter advances once per call.
    """
    state.t += 1
    t = state.t
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    step = state.lr * np.sqrt(c2) / c1
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {name!r} has shape {g.shape}, parameter {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= step * m / (np.sqrt(v) + state.eps * np.sqrt(c2))


# ---------------------------------------------------------------------------
# verification


def numerical_gradient(fn, params: dict, h: float = 1e-5) -> dict:
    """Central finite differences of scalar ``fn(params)`` for every entry."""
    out = {}
    for name, p in params.items():
        g = np.zeros_like(p, dtype=float)
        flat = p.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            fp = fn(params)
            flat[i] = old - h
            fm = fn(params)
            flat[i] = old
            gflat[i] = (fp - fm) / (2.0 * h)
        out[name] = g
    return out


def grad_check(fn, grad_fn, params: dict, h: float = 1e-5) -> float:
    """Largest relative disagreement between analytic and numerical gradients.

    ``fn(params)`` returns a scalar and ``grad_fn(params)`` a dict of analytic
    gradients keyed like ``params``.  The error per coordinate is
    ``|ga - gn| / max(1, |ga|, |gn|)``.
    """
    analytic = grad_fn(params)
    numeric = numerical_gradient(fn, params, h)
    worst = 0.0
    for name, gn in numeric.items():
        ga = np.asarray(analytic[name], dtype=float)
        denom = np.maximum(1.0, np.maximum(np.abs(ga), np.abs(gn)))
        worst = max(worst, float(np.max(np.abs(ga - gn) / denom, initial=0.0)))
    return worst
