"""Quaternion and octonion arithmetic on planar real arrays.

A hypercomplex vector of dimension ``d`` is stored as a real array of shape
``(..., C, d)``: the second-to-last axis holds the ``C`` component planes
(``C=4`` for quaternions, ``C=8`` for octonions) and the last axis runs over
the embedding dimension.  Leading axes are batch axes and broadcast.

The octonion product is the Cayley-Dickson doubling of the Hamilton product::

    (p1, p2) * (q1, q2) = (p1 q1 - conj(q2) p2,  q2 p1 + p2 conj(q1))

with ``x0..x3`` forming the first quaternion half and ``x4..x7`` the second.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

QUATERNION = "quaternion"
OCTONION = "octonion"

N_COMPONENTS = {QUATERNION: 4, OCTONION: 8}

UNIT_EPS = 1e-12


class AlgebraError(ValueError):
    """Raised on shape or algebra-tag mismatches between operands."""


def algebra_of(x: np.ndarray) -> str:
    x = np.asarray(x)
    if x.ndim < 2:
        raise AlgebraError(f"expected an array of shape (..., C, d), got {x.shape}")
    c = x.shape[-2]
    for name, n in N_COMPONENTS.items():
        if n == c:
            return name
    raise AlgebraError(f"component axis must have 4 or 8 planes, got {c}")


def _as_float(x) -> np.ndarray:
    x = np.asarray(x)
    return x if np.issubdtype(x.dtype, np.floating) else x.astype(float)


def _check_pair(p, q, algebra):
    p = _as_float(p)
    q = _as_float(q)
    for x in (p, q):
        if algebra_of(x) != algebra:
            raise AlgebraError(f"expected {algebra} operands, got {x.shape[-2]} planes")
    if p.shape[-1] != q.shape[-1]:
        raise AlgebraError(f"dimension mismatch: {p.shape[-1]} vs {q.shape[-1]}")
    return p, q


def _qmul(p, q) -> np.ndarray:
    a1, b1, c1, d1 = (p[..., i, :] for i in range(4))
    a2, b2, c2, d2 = (q[..., i, :] for i in range(4))
    out = np.empty(np.broadcast_shapes(p.shape, q.shape), dtype=np.result_type(p, q))
    out[..., 0, :] = a1 * a2 - b1 * b2 - c1 * c2 - d1 * d2
    out[..., 1, :] = a1 * b2 + b1 * a2 + c1 * d2 - d1 * c2
    out[..., 2, :] = a1 * c2 - b1 * d2 + c1 * a2 + d1 * b2
    out[..., 3, :] = a1 * d2 + b1 * c2 - c1 * b2 + d1 * a2
    return out


def quat_mul(p, q) -> np.ndarray:
    """Hamilton product, element-wise over the embedding dimension."""
    p, q = _check_pair(p, q, QUATERNION)
    return _qmul(p, q)


def conjugate(v) -> np.ndarray:
    """Negate every imaginary plane."""
    v = _as_float(v).copy()
    algebra_of(v)
    v[..., 1:, :] *= -1.0
    return v


_CONJ4 = np.array([1.0, -1.0, -1.0, -1.0])[:, None]


def oct_mul(p, q) -> np.ndarray:
    """Octonion product via Cayley-Dickson doubling of the Hamilton product."""
    p, q = _check_pair(p, q, OCTONION)
    p1, p2 = p[..., :4, :], p[..., 4:, :]
    q1, q2 = q[..., :4, :], q[..., 4:, :]
    out = np.empty(np.broadcast_shapes(p.shape, q.shape), dtype=np.result_type(p, q))
    out[..., :4, :] = _qmul(p1, q1) - _qmul(q2 * _CONJ4, p2)
    out[..., 4:, :] = _qmul(q2, p1) + _qmul(p2, q1 * _CONJ4)
    return out


def hyper_mul(p, q) -> np.ndarray:
    """Dispatch to the quaternion or octonion product by component count."""
    if algebra_of(p) == QUATERNION:
        return quat_mul(p, q)
    return oct_mul(p, q)


def _inner(p, q, algebra):
    p, q = _check_pair(p, q, algebra)
    if p.shape != q.shape:
        raise AlgebraError(f"shape mismatch: {p.shape} vs {q.shape}")
    return np.sum(p * q, axis=(-2, -1))


def quat_inner(p, q):
    """Sum over dimensions and components of element-wise products."""
    return _inner(p, q, QUATERNION)


def oct_inner(p, q):
    return _inner(p, q, OCTONION)


def norm(v) -> np.ndarray:
    """Per-dimension Euclidean norm across the component planes."""
    v = _as_float(v)
    algebra_of(v)
    return np.sqrt(np.sum(v * v, axis=-2))


def unit_normalize(v) -> np.ndarray:
    """Scale each per-dimension component tuple to unit norm.

    Zero tuples are guarded by ``UNIT_EPS`` in the denominator and come back
    as zeros.
    """
    v = _as_float(v)
    return v / (norm(v)[..., None, :] + UNIT_EPS)


def mul_backward(dz, p, q):
    """Gradients of ``<dz, p * q>`` with respect to ``p`` and ``q``.

    Both algebras are composition algebras, so ``<p q, z> = <p, z conj(q)>``
    and ``<p q, z> = <q, conj(p) z>``.
    """
    dp = hyper_mul(dz, conjugate(q))
    dq = hyper_mul(conjugate(p), dz)
    return dp, dq


def basis_table(algebra: str) -> tuple[np.ndarray, np.ndarray]:
    """Multiplication table of the unit basis: ``e_i * e_j = sign[i, j] * e_{index[i, j]}``."""
    c = N_COMPONENTS[algebra]
    eye = np.eye(c)[:, :, None]
    index = np.zeros((c, c), dtype=int)
    sign = np.zeros((c, c), dtype=int)
    for i in range(c):
        for j in range(c):
            prod = hyper_mul(eye[i], eye[j])[:, 0]
            k = int(np.argmax(np.abs(prod)))
            index[i, j] = k
            sign[i, j] = int(np.sign(prod[k]))
    return index, sign


@dataclass(frozen=True)
class HypercomplexVector:
    """A ``d``-dimensional quaternion or octonion vector in planar layout."""

    components: np.ndarray

    def __post_init__(self):
        comps = np.asarray(self.components, dtype=float)
        if comps.ndim != 2:
            raise AlgebraError(f"components must be (C, d), got {comps.shape}")
        algebra_of(comps)
        if comps.shape[1] < 1:
            raise AlgebraError("dimension must be positive")
        object.__setattr__(self, "components", comps)

    @classmethod
    def from_planes(cls, *planes) -> HypercomplexVector:
        return cls(np.stack([np.atleast_1d(np.asarray(p, dtype=float)) for p in planes]))

    @property
    def algebra(self) -> str:
        return algebra_of(self.components)

    @property
    def d(self) -> int:
        return self.components.shape[1]

    def __mul__(self, other: HypercomplexVector) -> HypercomplexVector:
        if self.algebra != other.algebra:
            raise AlgebraError(f"cannot multiply {self.algebra} by {other.algebra}")
        return HypercomplexVector(hyper_mul(self.components, other.components))

    def dot(self, other: HypercomplexVector) -> float:
        if self.algebra != other.algebra:
            raise AlgebraError(f"cannot take inner product of {self.algebra} and {other.algebra}")
        return float(_inner(self.components, other.components, self.algebra))

    def conj(self) -> HypercomplexVector:
        return HypercomplexVector(conjugate(self.components))

    def norm(self) -> np.ndarray:
        return norm(self.components)

    def unit(self) -> HypercomplexVector:
        return HypercomplexVector(unit_normalize(self.components))
