"""The attention network, its variants, and their oracle equalities."""

import numpy as np
import pytest

from mlbnet import attention as att
from mlbnet import pooling
from mlbnet.errors import DimensionError
from mlbnet.rng import derive
from mlbnet.tensor import grad_check, softmax_rows, value_of
from mlbnet.training import cross_entropy_mean

N, M, D, S, G, ANSWERS = 6, 5, 4, 3, 2, 4
CELLS = S * S


def make_params(seed, biases=False, g=G):
    return att.AttentionModelParams.create(derive(seed, "model"), N, M, D, S, g,
                                           ANSWERS, biases=biases)


def make_inputs(seed):
    rng = derive(seed, "inputs")
    return rng.standard_normal(N), rng.standard_normal((CELLS, M))


class TestAttend:
    def test_zero_weights_uniform_rows(self):
        params = make_params(0)
        for name in ("u_q", "v_f", "p_att"):
            setattr(params, name, np.zeros_like(getattr(params, name)))
        q, big_f = make_inputs(0)
        alpha = att.attend(params, q, big_f)
        assert alpha == pytest.approx(np.full((G, CELLS), 1.0 / CELLS), abs=1e-15)

    def test_rows_sum_to_one_and_lie_in_unit_interval(self):
        for k in range(50):
            params = make_params(k)
            q, big_f = make_inputs(k)
            alpha = att.attend(params, q, big_f)
            assert np.abs(alpha.sum(axis=1) - 1.0).max() < 1e-12
            assert (alpha > 0).all() and (alpha < 1).all()

    def test_constructed_logits_concentrate(self):
        params = att.AttentionModelParams.create(derive(1, "c"), 2, 1, 1, 3, 1, 2,
                                                 biases=False)
        params.u_q = np.array([[1.0]] * 2)[:2]
        params.u_q = np.ones((2, 1))
        params.v_f = np.ones((1, 1))
        params.p_att = np.array([[30.0]])
        q = np.array([1.0, 0.0])
        big_f = -np.ones((9, 1))
        big_f[4, 0] = 1.0
        alpha = att.attend(params, q, big_f)
        assert alpha[0, 4] > 0.999

    def test_column_permutation_equivariance(self):
        params = make_params(2)
        q, big_f = make_inputs(2)
        perm = derive(2, "perm").permutation(CELLS)
        alpha = att.attend(params, q, big_f)
        alpha_p = att.attend(params, q, big_f[perm])
        # softmax renormalization reorders the row sums, so equivariance
        # holds to rounding rather than bitwise
        assert np.abs(alpha_p - alpha[:, perm]).max() < 1e-14


class TestGlimpsePool:
    def test_one_hot_attention_selects_rows(self):
        _, big_f = make_inputs(3)
        alpha = np.zeros((G, CELLS))
        alpha[0, 2] = 1.0
        alpha[1, 7] = 1.0
        vhat = att.glimpse_pool(alpha, big_f)
        assert np.array_equal(vhat, np.concatenate([big_f[2], big_f[7]]))

    def test_uniform_attention_gives_mean_rows(self):
        _, big_f = make_inputs(4)
        alpha = np.full((G, CELLS), 1.0 / CELLS)
        vhat = att.glimpse_pool(alpha, big_f)
        mean = big_f.mean(axis=0)
        assert vhat == pytest.approx(np.concatenate([mean, mean]), abs=1e-14)

    def test_matches_double_loop(self):
        rng = derive(5, "gl")
        alpha = value_of(softmax_rows(rng.standard_normal((G, CELLS))))
        big_f = rng.standard_normal((CELLS, M))
        got = att.glimpse_pool(alpha, big_f)
        want = np.zeros(G * M)
        for g in range(G):
            for s in range(CELLS):
                want[g * M:(g + 1) * M] += alpha[g, s] * big_f[s]
        assert np.abs(got - want).max() < 1e-12

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            att.glimpse_pool(np.zeros((G, CELLS + 1)), np.zeros((CELLS, M)))


class TestClassify:
    def test_zero_weights_uniform(self):
        params = make_params(6)
        for name in ("w_q", "v_vhat", "p_out"):
            setattr(params, name, np.zeros_like(getattr(params, name)))
        q, _ = make_inputs(6)
        dist = att.classify(params, q, np.zeros(G * M))
        assert dist == pytest.approx(np.full(ANSWERS, 1.0 / ANSWERS), abs=1e-15)

    def test_distribution_sums_to_one(self):
        for k in range(50):
            params = make_params(k)
            rng = derive(k, "cl")
            dist = att.classify(params, rng.standard_normal(N), rng.standard_normal(G * M))
            assert abs(dist.sum() - 1.0) < 1e-12

    def test_equals_pooled_form_plus_softmax_exactly(self):
        params = make_params(7)
        rng = derive(7, "cl2")
        q, vhat = rng.standard_normal(N), rng.standard_normal(G * M)
        dist = att.classify(params, q, vhat)
        pooled = pooling.nonlinear_pool(
            pooling.PoolingParams(u=params.w_q, v=params.v_vhat, p=params.p_out,
                                  b=np.zeros(ANSWERS), activation="tanh"),
            q, vhat, "before")
        e = np.exp(pooled - pooled.max())
        assert np.array_equal(dist, e / e.sum())

    def test_logit_shift_invariance(self):
        params = make_params(8, biases=True)
        rng = derive(8, "cl3")
        q, vhat = rng.standard_normal(N), rng.standard_normal(G * M)
        base = att.classify(params, q, vhat)
        params.b_out = value_of(params.b_out) + 11.0
        shifted = att.classify(params, q, vhat)
        assert np.abs(base - shifted).max() < 1e-12


class TestPredict:
    def test_zero_weights_tie_breaks_to_zero(self):
        params = att.AttentionModelParams.create(derive(9, "p"), N, M, D, S, 1, 3,
                                                 biases=False)
        for name in ("u_q", "v_f", "p_att", "w_q", "v_vhat", "p_out"):
            setattr(params, name, np.zeros_like(getattr(params, name)))
        q, big_f = make_inputs(9)
        assert att.predict(params, q, big_f[:, :M]) == 0

    def test_agrees_with_compositional_route(self):
        for k in range(100):
            params = make_params(k)
            q, big_f = make_inputs(k)
            alpha = att.attend(params, q, big_f)
            dist = att.classify(params, q, att.glimpse_pool(alpha, big_f))
            assert att.predict(params, q, big_f) == int(np.argmax(dist))


class TestBatchedForward:
    def test_bit_identical_to_single_samples(self):
        for biases in (False, True):
            params = make_params(10, biases=biases)
            rng = derive(10, "batch")
            q_cols = rng.standard_normal((N, 6))
            f3 = rng.standard_normal((6, CELLS, M))
            batch = value_of(att.mlb_forward_batch(params, q_cols, f3))
            singles = np.stack([
                att.classify(params, q_cols[:, b],
                             att.glimpse_pool(att.attend(params, q_cols[:, b], f3[b]), f3[b]))
                for b in range(6)])
            assert np.array_equal(batch, singles)


class TestMarn:
    def test_zero_shortcuts_bit_equal_plain(self):
        params = make_params(11, biases=True)
        q, big_f = make_inputs(11)
        zeros = att.ShortcutMaps.zeros(N, M, G, ANSWERS)
        assert np.array_equal(att.marn_forward(params, zeros, q, big_f),
                              att.marn_forward(params, None, q, big_f))

    def test_nonzero_shortcuts_change_output(self):
        params = make_params(12)
        q, big_f = make_inputs(12)
        shortcuts = att.ShortcutMaps.create(derive(12, "sc"), N, M, G, ANSWERS)
        plain = att.marn_forward(params, None, q, big_f)
        routed = att.marn_forward(params, shortcuts, q, big_f)
        assert np.abs(plain - routed).max() > 0

    def test_term_by_term_recomputation(self):
        params = make_params(13)
        q, big_f = make_inputs(13)
        shortcuts = att.ShortcutMaps.create(derive(13, "sc"), N, M, G, ANSWERS)
        got = att.marn_forward(params, shortcuts, q, big_f)
        alpha = att.attend(params, q, big_f)
        vhat = att.glimpse_pool(alpha, big_f)
        logits = (value_of(params.p_out).T
                  @ (np.tanh(value_of(params.w_q).T @ q) * np.tanh(value_of(params.v_vhat).T @ vhat))
                  + value_of(shortcuts.h_q).T @ q + value_of(shortcuts.h_v).T @ vhat)
        e = np.exp(logits - logits.max())
        assert np.abs(got - e / e.sum()).max() < 1e-12

    def test_batched_matches_single(self):
        params = make_params(14, biases=True)
        shortcuts = att.ShortcutMaps.create(derive(14, "sc"), N, M, G, ANSWERS)
        rng = derive(14, "b")
        q_cols = rng.standard_normal((N, 4))
        f3 = rng.standard_normal((4, CELLS, M))
        batch = value_of(att.marn_forward_batch(params, shortcuts, q_cols, f3))
        singles = np.stack([att.marn_forward(params, shortcuts, q_cols[:, b], f3[b])
                            for b in range(4)])
        assert np.array_equal(batch, singles)


class TestMcbAttention:
    def make(self, seed, sketch_dim=8):
        return att.MCBAttentionParams.create(derive(seed, "mcb"), N, M, S, G,
                                             ANSWERS, sketch_dim)

    def test_zero_projections_uniform_everywhere(self):
        params = self.make(15)
        params.w_att = np.zeros_like(value_of(params.w_att))
        params.w_cls = np.zeros_like(value_of(params.w_cls))
        q, big_f = make_inputs(15)
        dist = att.mcb_attention_forward(params, q, big_f)
        assert dist == pytest.approx(np.full(ANSWERS, 1.0 / ANSWERS), abs=1e-15)

    def test_distribution_sums_to_one(self):
        for k in range(20):
            params = self.make(k)
            q, big_f = make_inputs(k)
            assert abs(att.mcb_attention_forward(params, q, big_f).sum() - 1.0) < 1e-12

    def test_deterministic_without_dropout(self):
        params = self.make(16)
        q, big_f = make_inputs(16)
        assert np.array_equal(att.mcb_attention_forward(params, q, big_f),
                              att.mcb_attention_forward(params, q, big_f))

    def test_tiny_dims_match_hand_composed_chain(self):
        rng = derive(17, "mcb-hand")
        params = att.MCBAttentionParams.create(rng, 2, 2, 1, 1, 2, sketch_dim=4)
        q = rng.standard_normal(2)
        big_f = rng.standard_normal((1, 2))
        from mlbnet import sketch as sk

        def chain(x, y, sp, w):
            pooled = sk.circular_convolution(
                sk.count_sketch(x, sp.h_x, sp.s_x, sp.d),
                sk.count_sketch(y, sp.h_y, sp.s_y, sp.d), "fft")
            ssq = np.sign(pooled) * np.sqrt(np.abs(pooled))
            normed = ssq / max(np.sqrt((ssq ** 2).sum()), 1e-12)
            return value_of(w).T @ normed

        att_logits = chain(q, big_f[0], params.sp_att, params.w_att)
        alpha = np.exp(att_logits - att_logits.max())
        alpha = alpha / alpha.sum()
        vhat = alpha[0] * big_f[0]
        cls_logits = chain(q, vhat, params.sp_cls, params.w_cls)
        e = np.exp(cls_logits - cls_logits.max())
        want = e / e.sum()
        got = att.mcb_attention_forward(params, q, big_f)
        assert np.abs(got - want).max() < 1e-12


class TestMrnStack:
    def make(self, seed, blocks):
        return att.MRNBlockParams.create(derive(seed, "mrn"), width=4, m_v=3,
                                         hidden=3, block_dim=2, blocks=blocks)

    def test_single_block_hand_expansion(self):
        params = self.make(18, 1)
        rng = derive(18, "mrn-in")
        q, v = rng.standard_normal(4), rng.standard_normal(3)
        got = att.mrn_stack(params, q, v)
        fused = (np.tanh(value_of(params.w_q[0]).T @ q)
                 * np.tanh(value_of(params.w_2[0]).T @ np.tanh(value_of(params.w_1[0]).T @ v)))
        want = value_of(params.w_q_short).T @ q + value_of(params.w_f[0]).T @ fused
        assert np.abs(got - want).max() < 1e-12

    def test_zero_block_projections_leave_pure_shortcut(self):
        params = self.make(19, 2)
        params.w_f = [np.zeros((2, 4)), np.zeros((2, 4))]
        rng = derive(19, "mrn-in")
        q, v = rng.standard_normal(4), rng.standard_normal(3)
        got = att.mrn_stack(params, q, v)
        assert got == pytest.approx(value_of(params.w_q_short).T @ q, abs=1e-14)

    def test_two_block_unrolled_oracle(self):
        params = self.make(20, 2)
        rng = derive(20, "mrn-in")
        q, v = rng.standard_normal(4), rng.standard_normal(3)
        got = att.mrn_stack(params, q, v)
        wq = [value_of(t) for t in params.w_q]
        w1 = [value_of(t) for t in params.w_1]
        w2 = [value_of(t) for t in params.w_2]
        wf = [value_of(t) for t in params.w_f]
        f1 = np.tanh(wq[0].T @ q) * np.tanh(w2[0].T @ np.tanh(w1[0].T @ v))
        h1 = value_of(params.w_q_short).T @ q + wf[0].T @ f1
        f2 = np.tanh(wq[1].T @ h1) * np.tanh(w2[1].T @ np.tanh(w1[1].T @ v))
        assert np.abs(got - (h1 + wf[1].T @ f2)).max() < 1e-12


class TestHobmEnergy:
    def test_rank_one_all_ones(self):
        factors = att.HOBMFactors(w_x=np.ones((2, 1)), w_y=np.ones((2, 1)),
                                  w_h=np.ones((2, 1)),
                                  bias_h=np.zeros(2), bias_y=np.zeros(2))
        out = att.hobm_energy(factors, np.ones(2), np.ones(2), np.ones(2))
        assert out == pytest.approx(8.0)

    def test_zeroed_modality_leaves_linear_term(self):
        rng = derive(21, "hobm")
        factors = att.HOBMFactors.create(rng, 3, 2, 4, 2)
        factors.w_h = np.zeros((4, 2))
        factors.bias_y = rng.standard_normal(2)
        x, y, h = rng.standard_normal(3), rng.standard_normal(2), rng.standard_normal(4)
        assert att.hobm_energy(factors, x, y, h) == pytest.approx(float(y @ factors.bias_y))

    def test_factored_vs_unfactored_sweep(self):
        worst = 0.0
        for k in range(100):
            rng = derive(k, "hobm-sweep")
            i, j, kk, f = (int(rng.integers(1, 5)) for _ in range(4))
            factors = att.HOBMFactors(
                w_x=rng.standard_normal((i, f)), w_y=rng.standard_normal((j, f)),
                w_h=rng.standard_normal((kk, f)),
                bias_h=rng.standard_normal(kk), bias_y=rng.standard_normal(j))
            x, y, h = rng.standard_normal(i), rng.standard_normal(j), rng.standard_normal(kk)
            worst = max(worst, abs(att.hobm_energy(factors, x, y, h)
                                   - att.hobm_energy_unfactored(factors, x, y, h)))
        assert worst < 1e-10


class TestEndToEndGradient:
    def test_pipeline_cross_entropy_under_1e5(self):
        params = make_params(22, biases=True)
        names = list(params.named_tensors())
        values = [value_of(t) for t in params.named_tensors().values()]
        q, big_f = make_inputs(22)

        def loss(nodes):
            model = att.AttentionModelParams(g=G, s=S, **dict(zip(names, nodes)))
            dist = att.mlb_forward_batch(model, q[:, None], big_f[None])
            return cross_entropy_mean(dist, [1])

        assert grad_check(loss, values) < 1e-5

    def test_mcb_projection_gradients(self):
        params = att.MCBAttentionParams.create(derive(23, "mcbg"), N, M, S, G,
                                               ANSWERS, sketch_dim=8)
        q, big_f = make_inputs(23)

        def loss(nodes):
            model = att.MCBAttentionParams(sp_att=params.sp_att, sp_cls=params.sp_cls,
                                           w_att=nodes[0], w_cls=nodes[1], g=G, s=S)
            dist = att.mcb_attention_forward(model, q, big_f)
            from mlbnet.training import cross_entropy
            return cross_entropy(dist, 2)

        assert grad_check(loss, [value_of(params.w_att), value_of(params.w_cls)]) < 1e-5
