"""Fast self-checks of the numerical core, grouped for the ``verify`` command.

Each check returns a :class:`CheckResult`; :func:`run_all` runs every group
and never raises on a failed property, only reports it.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np

from . import algebra
from . import diffkernels as dk
from .evaluation import TAIL_ONLY, evaluate
from .graphstore import build_store
from .models import (
    MODEL_KINDS,
    ConvConfig,
    backward,
    forward,
    init_params,
    n_components,
    score_triples,
    set_constant_gate,
)

GRAD_TOL = 1e-4
EXACT_TOL = 1e-10

# e_i e_j = sign * e_index for the quaternion units 1, i, j, k
HAMILTON = {
    (1, 1): (-1, 0), (2, 2): (-1, 0), (3, 3): (-1, 0),
    (1, 2): (1, 3), (2, 3): (1, 1), (3, 1): (1, 2),
    (2, 1): (-1, 3), (3, 2): (-1, 1), (1, 3): (-1, 2),
}  # fmt: skip


@dataclass
class CheckResult:
    group: str
    passed: bool
    detail: str
    seconds: float = 0.0

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status}  {self.group:<10} {self.detail} ({self.seconds:.2f}s)"


def _unit(c, i, d=1):
    v = np.zeros((c, d))
    v[i] = 1.0
    return v


def check_hamilton() -> CheckResult:
    errors = []
    for (i, j), (sign, k) in HAMILTON.items():
        got = algebra.quat_mul(_unit(4, i), _unit(4, j))
        if not np.array_equal(got, sign * _unit(4, k)):
            errors.append(f"e{i}e{j}")
    ijk = algebra.quat_mul(algebra.quat_mul(_unit(4, 1), _unit(4, 2)), _unit(4, 3))
    if not np.array_equal(ijk, -_unit(4, 0)):
        errors.append("ijk")
    example = algebra.quat_mul(np.array([[1.0], [2], [3], [4]]), np.array([[5.0], [6], [7], [8]]))
    if not np.array_equal(example[:, 0], [-60.0, 12.0, 30.0, 24.0]):
        errors.append("worked example")
    detail = "Hamilton rules exact" if not errors else "wrong: " + ", ".join(errors)
    return CheckResult("hamilton", not errors, detail)


def check_octonion(n_vectors: int = 1000, seed: int = 0) -> CheckResult:
    """Basis table structure, subalgebra, alternativity and norm multiplicativity."""
    errors = []
    index, sign = algebra.basis_table(algebra.OCTONION)
    for i in range(8):
        if sorted(index[i]) != list(range(8)):
            errors.append(f"row {i} not a permutation")
    for i in range(1, 8):
        if (index[i, i], sign[i, i]) != (0, -1):
            errors.append(f"e{i}^2 != -1")
        for j in range(1, 8):
            if i != j and (index[i, j] != index[j, i] or sign[i, j] != -sign[j, i]):
                errors.append(f"e{i}e{j} not anticommuting")
    q_index, q_sign = algebra.basis_table(algebra.QUATERNION)
    if not (np.array_equal(index[:4, :4], q_index) and np.array_equal(sign[:4, :4], q_sign)):
        errors.append("quaternion subalgebra")

    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_vectors):
        d = int(rng.integers(1, 9))
        for c in (4, 8):
            p, q = rng.uniform(-1, 1, size=(2, c, d))
            err = np.max(np.abs(algebra.norm(algebra.hyper_mul(p, q)) - algebra.norm(p) * algebra.norm(q)))
            worst = max(worst, float(err))
    if worst >= EXACT_TOL:
        errors.append(f"norm multiplicativity off by {worst:.2e}")
    p, q = rng.normal(size=(2, 8, 4))
    if np.max(np.abs(algebra.oct_mul(algebra.oct_mul(p, p), q) - algebra.oct_mul(p, algebra.oct_mul(p, q)))) > 1e-10:
        errors.append("left alternativity")
    detail = f"table, alternativity, |pq|=|p||q| to {worst:.1e}" if not errors else "; ".join(errors[:4])
    return CheckResult("octonion", not errors, detail)


def toy_params(kind, d=4, norm_mode="batch", seed=0, n_filters=2, dropout=0.0, n_entities=5, n_relations=4):
    conv = ConvConfig(n_filters=n_filters, input_dropout=dropout, feature_dropout=dropout, hidden_dropout=dropout)
    params = init_params(n_entities, n_relations, d, kind, norm_mode, conv, seed=seed)
    rng = np.random.default_rng(seed + 1000)
    # move batch-norm affine and running stats away from the identity so they are exercised
    for st in params.bn.values():
        st.gamma[:] = rng.uniform(0.5, 1.5, size=st.gamma.shape)
        st.beta[:] = rng.normal(0, 0.1, size=st.beta.shape)
        st.running_mean[:] = rng.normal(0, 0.1, size=st.running_mean.shape)
        st.running_var[:] = rng.uniform(0.5, 1.5, size=st.running_var.shape)
    if "conv.b" in params.tensors:
        params.tensors["conv.b"][:] = rng.uniform(0.1, 0.5, size=params.tensors["conv.b"].shape)
    return params


def model_grad_error(params, h, r, train=True, seed=0, step=1e-5) -> float:
    """grad_check of ``sum(w * scores)`` over every tensor, with fixed dropout masks."""
    h = np.asarray(h)
    r = np.asarray(r)
    w = np.random.default_rng(seed).normal(size=(len(h), params.n_entities))

    def fn(_):
        scores, _ = forward(params, h, r, train, np.random.default_rng(seed))
        return float(np.sum(w * scores))

    def grad_fn(_):
        _, cache = forward(params, h, r, train, np.random.default_rng(seed))
        return backward(params, w, cache)

    return dk.grad_check(fn, grad_fn, params.tensors, step)


def check_gradients(d: int = 4, seeds=(0,)) -> CheckResult:
    worst = {}
    for kind in MODEL_KINDS:
        errs = []
        for seed in seeds:
            params = toy_params(kind, d=d, seed=seed, dropout=0.2)
            params.embed_dropout = params.product_dropout = 0.2
            errs.append(model_grad_error(params, [0, 1, 3], [1, 0, 2], train=True, seed=seed))
        worst[kind] = max(errs)
    passed = all(v < GRAD_TOL for v in worst.values())
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    return CheckResult("gradients", passed, detail)


def complex_form(gamma, h, r, t) -> float:
    """Four-term multilinear form of a gated product restricted to the 1, i planes."""
    g1, g2 = gamma[0], gamma[1]
    a_h, b_h = h[0], h[1]
    a_r, b_r = r[0], r[1]
    a_t, b_t = t[0], t[1]
    return float(
        np.sum(g1 * a_h * a_r * a_t)
        + np.sum(g2 * b_h * a_r * b_t)
        + np.sum(g2 * a_h * b_r * b_t)
        - np.sum(g1 * b_h * b_r * a_t)
    )


def reduction_errors(n_instances: int = 100, d: int = 4, seed: int = 0) -> dict:
    """Largest deviations along the ConvQ -> QMult -> ComplEx -> DistMult chain.

    Keys: ``qmult`` (gate forced to one), ``complex`` (j, k planes zeroed),
    ``distmult`` (all imaginary planes zeroed).
    """
    rng = np.random.default_rng(seed)
    worst = {"qmult": 0.0, "complex": 0.0, "distmult": 0.0}
    convq = init_params(3, 2, d, "ConvQ", "none", ConvConfig(n_filters=2), seed=seed)
    qmult = init_params(3, 2, d, "QMult", "none", seed=seed)
    set_constant_gate(convq, 1.0)
    for _ in range(n_instances):
        E = rng.normal(size=(3, 4, d))
        R = rng.normal(size=(2, 4, d))
        for zero, key in ((None, "qmult"), (slice(2, 4), "complex"), (slice(1, 4), "distmult")):
            if zero is not None:
                E[:, zero] = 0.0
                R[:, zero] = 0.0
            for p in (convq, qmult):
                p.tensors["entity"][...] = E
                p.tensors["relation"][...] = R
            s_conv = float(score_triples(convq, 0, 1, 2)[0])
            if key == "qmult":
                ref = float(score_triples(qmult, 0, 1, 2)[0])
            elif key == "complex":
                ref = complex_form(np.ones((2, d)), E[0], R[1], E[2])
            else:
                ref = float(np.sum(E[0, 0] * R[1, 0] * E[2, 0]))
            worst[key] = max(worst[key], abs(s_conv - ref))
    return worst


def check_reduction(n_instances: int = 100) -> CheckResult:
    worst = reduction_errors(n_instances)
    passed = all(v < EXACT_TOL for v in worst.values())
    return CheckResult("reduction", passed, ", ".join(f"{k} {v:.1e}" for k, v in worst.items()))


def toy_graph(n_entities=12, n_relations=3, n_triples=40, seed=0):
    rng = np.random.default_rng(seed)
    triples = [
        (f"e{rng.integers(n_entities)}", f"r{rng.integers(n_relations)}", f"e{rng.integers(n_entities)}")
        for _ in range(n_triples)
    ]
    return build_store(triples[:30], triples[30:35], triples[35:])


def brute_force_ranks(params, store, queries) -> list[int]:
    """Rank by scoring one candidate at a time, with explicit filtering."""
    every = {tuple(x) for x in np.concatenate([store.train, store.valid, store.test]).tolist()}
    ranks = []
    for h, r, t in queries:
        gold = float(score_triples(params, h, r, t)[0])
        better = ties = 0
        for x in range(store.n_entities):
            if x == t or (h, r, x) in every:
                continue
            s = float(score_triples(params, h, r, x)[0])
            better += s > gold
            ties += s == gold
        ranks.append(1 + better + math.ceil(ties / 2))
    return ranks


def check_ranking(seed: int = 0) -> CheckResult:
    store = toy_graph(seed=seed)
    params = init_params(store.n_entities, store.n_relations, 2, "QMult", "none", seed=seed)
    # duplicate entity rows create exact score ties
    params.tensors["entity"][1] = params.tensors["entity"][0]
    params.tensors["entity"][3] = params.tensors["entity"][2]
    errors = []
    for mode in ("head_and_tail", TAIL_ONLY):
        report = evaluate(params, store, mode)
        oracle = brute_force_ranks(params, store, report.queries[:, :3].tolist())
        if report.ranks.tolist() != oracle:
            errors.append(mode)
    detail = "ranks match the per-candidate loop" if not errors else "mismatch in " + ", ".join(errors)
    return CheckResult("ranking", not errors, detail)


CHECKS = {
    "hamilton": check_hamilton,
    "octonion": check_octonion,
    "gradients": check_gradients,
    "reduction": check_reduction,
    "ranking": check_ranking,
}


def run_all(groups=None) -> list[CheckResult]:
    results = []
    for name in groups or CHECKS:
        start = time.perf_counter()
        try:
            res = CHECKS[name]()
        except Exception as exc:  # a crashing check is a failed check
            res = CheckResult(name, False, f"raised {type(exc).__name__}: {exc}")
        res.seconds = time.perf_counter() - start
        results.append(res)
    return results


__all__ = [
    "CheckResult",
    "check_gradients",
    "check_hamilton",
    "check_octonion",
    "check_ranking",
    "check_reduction",
    "complex_form",
    "model_grad_error",
    "n_components",
    "reduction_errors",
    "run_all",
    "toy_params",
]
