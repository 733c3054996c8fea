import numpy as np
import pytest

from hypercomplex_kge import algebra
from hypercomplex_kge.models import (
    CONVO,
    CONVQ,
    MODEL_KINDS,
    OMULT,
    QMULT,
    ConvConfig,
    ModelConfigError,
    StructureError,
    canonical_kind,
    conv_gate,
    encode,
    gated_score,
    init_params,
    score_all_tails,
    score_convo,
    score_convq,
    score_omult,
    score_qmult,
    score_triples,
    set_constant_gate,
)
from hypercomplex_kge.verify import complex_form, model_grad_error, reduction_errors, toy_params

from oracles import conv2d_loops, planes_mul, quat_mul_table


def with_tables(params, entity, relation):
    params.tensors["entity"][...] = entity
    params.tensors["relation"][...] = relation
    return params


def single(kind, h, r, t, norm_mode="none"):
    """Params for one triple (h, r, t) stored as entity 0, relation 0, entity 1."""
    h, r, t = (np.asarray(x, dtype=float).reshape(len(x), -1) for x in (h, r, t))
    p = init_params(2, 1, h.shape[1], kind, norm_mode)
    return with_tables(p, np.stack([h, t]), r[None])


class TestScoreExamples:
    def test_qmult_identity(self):
        p = single(QMULT, [1, 0, 0, 0], [1, 0, 0, 0], [1, 0, 0, 0])
        assert score_qmult(0, 0, 1, p) == 1.0

    def test_qmult_i_j_k(self):
        p = single(QMULT, [0, 1, 0, 0], [0, 0, 1, 0], [0, 0, 0, 1])
        assert score_qmult(0, 0, 1, p) == 1.0

    def test_qmult_matches_scalar_expansion(self):
        rng = np.random.default_rng(0)
        h, r, t = rng.normal(size=(3, 4, 3))
        p = single(QMULT, h, r, t)
        ref = sum(np.dot(quat_mul_table(h[:, k], r[:, k]), t[:, k]) for k in range(3))
        assert score_qmult(0, 0, 1, p) == pytest.approx(ref, abs=1e-12)

    def test_omult_identity_head(self):
        rng = np.random.default_rng(1)
        r = rng.normal(size=(8, 2))
        e0 = np.zeros((8, 2))
        e0[0] = 1.0
        p = single(OMULT, e0, r, r)
        assert score_omult(0, 0, 1, p) == pytest.approx(np.sum(r * r), abs=1e-12)

    def test_omult_subalgebra(self):
        rng = np.random.default_rng(2)
        h, r, t = rng.normal(size=(3, 4, 2))
        z = np.zeros((4, 2))
        po = single(OMULT, np.vstack([h, z]), np.vstack([r, z]), np.vstack([t, z]))
        pq = single(QMULT, h, r, t)
        assert score_omult(0, 0, 1, po) == pytest.approx(score_qmult(0, 0, 1, pq), abs=1e-12)

    def test_omult_matches_recursive_oracle(self):
        rng = np.random.default_rng(3)
        h, r, t = rng.normal(size=(3, 8, 2))
        p = single(OMULT, h, r, t)
        assert score_omult(0, 0, 1, p) == pytest.approx(np.sum(planes_mul(h, r) * t), abs=1e-12)

    def test_wrong_kind(self):
        p = init_params(3, 2, 2, QMULT, "none")
        with pytest.raises(StructureError):
            score_omult(0, 0, 1, p)

    def test_id_out_of_range(self):
        p = init_params(3, 2, 2, QMULT, "none")
        with pytest.raises(IndexError):
            score_qmult(5, 0, 1, p)
        with pytest.raises(IndexError):
            score_qmult(0, 2, 1, p)


class TestConvGate:
    @pytest.mark.parametrize("kind,c", [(CONVQ, 4), (CONVO, 8)])
    def test_shape(self, kind, c):
        p = init_params(6, 3, 5, kind, "batch")
        assert conv_gate(2, 1, p).shape == (c, 5)
        assert conv_gate(np.array([0, 1, 2]), np.array([0, 1, 2]), p).shape == (3, c, 5)

    def test_forced_constant(self):
        p = init_params(6, 3, 5, CONVQ, "batch")
        set_constant_gate(p, 1.0)
        np.testing.assert_array_equal(conv_gate(3, 2, p), np.ones((4, 5)))

    def test_no_head(self):
        p = init_params(6, 3, 5, QMULT, "none")
        with pytest.raises(StructureError):
            conv_gate(0, 0, p)
        with pytest.raises(StructureError):
            set_constant_gate(p)

    @pytest.mark.parametrize("kind", [CONVQ, CONVO])
    def test_matches_loop_oracle(self, kind):
        p = init_params(4, 2, 3, kind, "none", ConvConfig(n_filters=3), seed=4)
        p.tensors["conv.b"][:] = 0.3
        c = p.n_components
        E, R = p.tensors["entity"], p.tensors["relation"]
        img = np.concatenate([E[1], R[0]])[None, None]
        fmap = np.maximum(conv2d_loops(img, p.tensors["conv.kernel"], 1, 1), 0.0).reshape(-1)
        gate = np.maximum(fmap @ p.tensors["conv.W"] + p.tensors["conv.b"], 0.0).reshape(c, 3)
        np.testing.assert_allclose(conv_gate(1, 0, p), gate, atol=1e-10)

    def test_eval_is_deterministic(self):
        p = init_params(6, 3, 4, CONVO, "batch")
        np.testing.assert_array_equal(conv_gate(1, 2, p), conv_gate(1, 2, p))

    def test_convo_composes_sub_kernels(self):
        p = init_params(4, 2, 3, CONVO, "none", seed=5)
        p.tensors["conv.b"][:] = 0.2
        g = conv_gate(0, 1, p)
        E, R = p.tensors["entity"], p.tensors["relation"]
        ref = np.sum(g * algebra.oct_mul(E[0], R[1]) * E[2])
        assert score_convo(0, 1, 2, p) == pytest.approx(ref, abs=1e-10)


class TestReductionChain:
    def test_gate_one_recovers_qmult_and_omult(self):
        rng = np.random.default_rng(6)
        for kind, base, scorer, ref in ((CONVQ, QMULT, score_convq, score_qmult), (CONVO, OMULT, score_convo, score_omult)):
            conv = init_params(3, 2, 4, kind, "none")
            plain = init_params(3, 2, 4, base, "none")
            set_constant_gate(conv, 1.0)
            for _ in range(20):
                E = rng.normal(size=plain.tensors["entity"].shape)
                R = rng.normal(size=plain.tensors["relation"].shape)
                with_tables(conv, E, R)
                with_tables(plain, E, R)
                assert scorer(0, 1, 2, conv) == ref(0, 1, 2, plain)

    def test_chain_errors(self):
        worst = reduction_errors(n_instances=100)
        assert worst["qmult"] < 1e-10
        assert worst["complex"] < 1e-10
        assert worst["distmult"] < 1e-10

    def test_untied_gate_complex_form(self):
        # with j, k zeroed, a full gate splits into its real and i planes
        rng = np.random.default_rng(7)
        h, r, t, g = rng.normal(size=(4, 4, 5))
        for x in (h, r, t):
            x[2:] = 0.0
        assert gated_score(h, r, t, g) == pytest.approx(complex_form(g, h, r, t), abs=1e-12)

    def test_convo_subalgebra(self):
        rng = np.random.default_rng(8)
        q = init_params(3, 2, 3, CONVQ, "none")
        o = init_params(3, 2, 3, CONVO, "none")
        set_constant_gate(q)
        set_constant_gate(o)
        E, R = rng.normal(size=(3, 4, 3)), rng.normal(size=(2, 4, 3))
        with_tables(q, E, R)
        with_tables(o, np.concatenate([E, np.zeros_like(E)], axis=1), np.concatenate([R, np.zeros_like(R)], axis=1))
        assert score_convo(0, 1, 2, o) == pytest.approx(score_convq(0, 1, 2, q), abs=1e-12)


class TestScoreAllTails:
    @pytest.mark.parametrize("kind", MODEL_KINDS)
    @pytest.mark.parametrize("norm_mode", ["batch", "unit", "none"])
    def test_matches_loop(self, kind, norm_mode):
        p = toy_params(kind, d=3, norm_mode=norm_mode, n_entities=20, n_relations=4, seed=9)
        for h, r in [(0, 0), (7, 3), (19, 2)]:
            plane = score_all_tails(p, h, r)
            assert plane.shape == (20,)
            loop = [score_triples(p, h, r, x)[0] for x in range(20)]
            np.testing.assert_allclose(plane, loop, atol=1e-10)

    def test_two_entities(self):
        p = init_params(2, 1, 1, QMULT, "none", seed=3)
        loop = [score_qmult(0, 0, x, p) for x in range(2)]
        np.testing.assert_allclose(score_all_tails(p, 0, 0), loop, atol=1e-15)

    def test_permutation_equivariance(self):
        p = init_params(10, 2, 3, OMULT, "none", seed=1)
        perm = np.random.default_rng(0).permutation(10)
        q = p.copy()
        q.tensors["entity"][...] = p.tensors["entity"][perm]
        # head 0 of p lives at position where(perm == 0) in q
        h_q = int(np.flatnonzero(perm == 0)[0])
        np.testing.assert_allclose(score_all_tails(q, h_q, 1), score_all_tails(p, 0, 1)[perm], atol=1e-12)

    def test_batch_norm_eval_scaling(self):
        rng = np.random.default_rng(2)
        p = toy_params(QMULT, d=3, n_entities=15, seed=2)
        lam = 2.5
        s = p.copy()
        s.tensors["entity"] *= lam
        # running head statistics measured on the scaled table scale the same way
        s.bn["bn_head"].running_mean *= lam
        s.bn["bn_head"].running_var *= lam**2
        base = score_all_tails(p, 4, 1)
        scaled = score_all_tails(s, 4, 1)
        np.testing.assert_allclose(scaled, lam * base, rtol=1e-4)
        np.testing.assert_array_equal(np.argsort(scaled), np.argsort(base))

    def test_batch_norm_train_scaling(self):
        p = toy_params(QMULT, d=3, n_entities=15, seed=3)
        # unit-scale table so the batch-norm epsilon is negligible against the batch variance
        p.tensors["entity"] *= 10.0
        s = p.copy()
        s.tensors["entity"] *= 3.0
        h, r = np.array([0, 4, 9, 12]), np.array([1, 0, 2, 1])
        base = score_all_tails(p, h, r, mode="train")
        scaled = score_all_tails(s, h, r, mode="train")
        np.testing.assert_allclose(scaled, 3.0 * base, rtol=1e-3, atol=1e-3)
        np.testing.assert_array_equal(base.argmax(axis=1), scaled.argmax(axis=1))


class TestNormModes:
    def test_unit_relation_has_unit_norm(self):
        p = init_params(5, 3, 6, OMULT, "unit", seed=0)
        _, cache = encode(p, np.array([0, 1, 2]), np.array([0, 1, 2]))
        rn = cache[3]
        np.testing.assert_allclose(algebra.norm(rn), 1.0, atol=1e-10)
        # the head is left as stored
        np.testing.assert_array_equal(cache[2], p.tensors["entity"][[0, 1, 2]])

    def test_batch_mode_has_bn_states(self):
        assert set(init_params(5, 3, 2, CONVQ, "batch").bn) == {"bn_head", "bn_rel", "bn_conv", "bn_gate"}
        assert init_params(5, 3, 2, QMULT, "unit").bn == {}

    def test_unknown_mode(self):
        with pytest.raises(ModelConfigError):
            init_params(5, 3, 2, QMULT, "layer")


class TestGradients:
    @pytest.mark.parametrize("kind", MODEL_KINDS)
    @pytest.mark.parametrize("d", [1, 4])
    @pytest.mark.parametrize("norm_mode", ["batch", "unit"])
    def test_train_mode(self, kind, d, norm_mode):
        p = toy_params(kind, d=d, norm_mode=norm_mode, dropout=0.2, seed=d)
        p.embed_dropout = p.product_dropout = 0.1
        assert model_grad_error(p, [0, 2, 4], [1, 3, 0], train=True, seed=d) < 1e-4

    @pytest.mark.parametrize("kind", [QMULT, CONVO])
    def test_eval_mode(self, kind):
        p = toy_params(kind, d=2, seed=11)
        assert model_grad_error(p, [1, 3], [2, 2], train=False) < 1e-4

    def test_repeated_heads_accumulate(self):
        p = toy_params(QMULT, d=2, norm_mode="none", seed=12)
        assert model_grad_error(p, [1, 1, 1], [0, 0, 2], train=True) < 1e-6


class TestInit:
    def test_deterministic(self):
        a = init_params(30, 4, 3, CONVO, "batch", seed=7)
        b = init_params(30, 4, 3, CONVO, "batch", seed=7)
        for k in a.tensors:
            np.testing.assert_array_equal(a.tensors[k], b.tensors[k])

    def test_entity_std(self):
        p = init_params(135, 46, 4, QMULT, "batch", seed=1)
        assert 0.05 <= p.tensors["entity"].std() <= 0.15

    def test_structure(self):
        assert "conv.kernel" not in init_params(5, 2, 2, QMULT, "batch").tensors
        assert "conv.kernel" not in init_params(5, 2, 2, OMULT, "none").tensors
        p = init_params(5, 2, 3, CONVO, "batch", ConvConfig(n_filters=4))
        assert p.tensors["conv.kernel"].shape == (4, 1, 3, 3)
        assert p.tensors["conv.W"].shape == (4 * 16 * 3, 8 * 3)
        assert p.tensors["entity"].shape == (5, 8, 3)
        assert p.bn["bn_head"].gamma is p.tensors["bn_head.gamma"]

    def test_kaiming_bound(self):
        p = init_params(5, 2, 3, CONVQ, "none", ConvConfig(n_filters=64))
        assert np.abs(p.tensors["conv.kernel"]).max() <= np.sqrt(6.0 / 9)

    def test_zero_dimension(self):
        with pytest.raises(ModelConfigError):
            init_params(5, 2, 0, QMULT)

    def test_kind_names(self):
        assert canonical_kind("convo") == CONVO
        with pytest.raises(ModelConfigError):
            canonical_kind("TransE")

    def test_bad_conv_config(self):
        with pytest.raises(ModelConfigError):
            ConvConfig(kernel_size=2)
        with pytest.raises(ModelConfigError):
            ConvConfig(input_dropout=1.0)

    def test_copy_is_deep(self):
        p = init_params(5, 2, 3, CONVQ, "batch")
        q = p.copy()
        q.tensors["entity"] += 1.0
        q.bn["bn_head"].running_mean += 1.0
        assert not np.allclose(p.tensors["entity"], q.tensors["entity"])
        np.testing.assert_array_equal(p.bn["bn_head"].running_mean, 0.0)
        assert q.bn["bn_head"].gamma is q.tensors["bn_head.gamma"]
