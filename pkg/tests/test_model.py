import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tailorsum.data import EncodedExample, STOP_ID, UNK_ID
from tailorsum.model import (
    Dims,
    ModelParams,
    attend,
    decoder_step,
    encode,
    final_distribution,
    generation_switch,
    initial_coverage,
    initial_state,
    load_checkpoint,
    save_checkpoint,
)
from tailorsum.numerics import check_gradients, finite_diff_gradient
from tailorsum.training import nll_loss, sequence_pass

from conftest import scalar_lstm_step, scalar_sigmoid_ref


def scalar_step_oracle(P, source_ids, prev, h, c, coverage, boost, ext):
    """Decoder step recomputed from plain Python floats."""
    V, H = P.dims.vocab, P.dims.hidden
    # encoder
    eh, ec = [0.0] * H, [0.0] * H
    states = []
    for tok in source_ids:
        row = tok if tok < V else UNK_ID
        eh, ec = scalar_lstm_step(P.enc_W.tolist(), P.enc_b.tolist(), P.embedding[row].tolist(), eh, ec)
        states.append(eh)
    if h is None:
        h, c = eh, ec
    x = P.embedding[prev if prev < V else UNK_ID].tolist()
    s, _ = scalar_lstm_step(P.dec_W.tolist(), P.dec_b.tolist(), x, h, c)
    A = P.dims.attn
    scores = []
    for i, hi in enumerate(states):
        e = 0.0
        for a in range(A):
            pre = P.att_b[a] + P.att_wcov[a] * coverage[i]
            pre += sum(P.att_Wh[a, k] * hi[k] for k in range(H))
            pre += sum(P.att_Ws[a, k] * s[k] for k in range(H))
            e += P.att_v[a] * math.tanh(pre)
        scores.append(boost[i] * e)
    m = max(scores)
    ex = [math.exp(v - m) for v in scores]
    att = [v / sum(ex) for v in ex]
    ctx = [sum(att[i] * states[i][k] for i in range(len(states))) for k in range(H)]
    z = P.gen_b[0] + sum(P.gen_wh[k] * ctx[k] for k in range(H)) + sum(P.gen_ws[k] * s[k] for k in range(H))
    z += sum(P.gen_wy[k] * x[k] for k in range(len(x)))
    pg = scalar_sigmoid_ref(z)
    sc = list(s) + ctx
    logits = [P.out_b[w] + sum(P.out_W[w, k] * sc[k] for k in range(2 * H)) for w in range(V)]
    m = max(logits)
    el = [math.exp(v - m) for v in logits]
    pv = [v / sum(el) for v in el]
    dist = [0.0] * ext
    for w in range(V):
        dist[w] += pg * pv[w]
    for i, tok in enumerate(source_ids):
        dist[tok] += (1 - pg) * att[i]
    return att, pg, dist


class TestEncode:
    def test_shapes(self):
        P = ModelParams.init(Dims(10, 3, 4, 5), np.random.default_rng(0))
        enc = encode(P, [4, 5, 6])
        assert enc.states.shape == (3, 4)

    def test_zero_params(self):
        P = ModelParams(Dims(10, 3, 4, 5))
        np.testing.assert_array_equal(encode(P, [4, 5, 6]).states, np.zeros((3, 4)))

    def test_scalar_oracle(self, tiny_params):
        ids = [5, 9, 21, 3]
        enc = encode(tiny_params, ids)
        h, c = [0.0] * 8, [0.0] * 8
        for k, tok in enumerate(ids):
            row = tok if tok < 20 else UNK_ID
            h, c = scalar_lstm_step(tiny_params.enc_W.tolist(), tiny_params.enc_b.tolist(),
                                    tiny_params.embedding[row].tolist(), h, c)
            np.testing.assert_allclose(enc.states[k], h, rtol=1e-12, atol=1e-14)

    def test_empty_source(self, tiny_params):
        with pytest.raises(ValueError, match="empty source"):
            encode(tiny_params, [])

    def test_forget_bias_initialized_to_one(self, tiny_params):
        np.testing.assert_array_equal(tiny_params.enc_b[8:16], np.ones(8))
        np.testing.assert_array_equal(tiny_params.enc_b[:8], np.zeros(8))


class TestAttend:
    def test_unit_boost_is_identity(self, tiny_params):
        enc = encode(tiny_params, [4, 5, 6, 7])
        s = np.random.default_rng(1).normal(size=8)
        a1, c1, r1 = attend(tiny_params, enc, s)
        a2, c2, r2 = attend(tiny_params, enc, s, boost=np.ones(4), coverage=np.zeros(4))
        assert a1.tobytes() == a2.tobytes() and c1.tobytes() == c2.tobytes()

    def test_equal_states_split_evenly(self, tiny_params):
        enc = encode(tiny_params, [4, 4])
        enc.states[1] = enc.states[0]
        enc.features[1] = enc.features[0]
        a, _, _ = attend(tiny_params, enc, np.zeros(8), boost=np.array([2.0, 2.0]))
        np.testing.assert_allclose(a, [0.5, 0.5], atol=1e-15)

    def test_context_is_weighted_sum(self, tiny_params):
        enc = encode(tiny_params, [4, 5, 6])
        a, ctx, _ = attend(tiny_params, enc, np.ones(8))
        np.testing.assert_allclose(ctx, sum(a[i] * enc.states[i] for i in range(3)), atol=1e-15)

    @pytest.mark.parametrize("seed", range(6))
    def test_boost_monotonicity_follows_score_sign(self, tiny_params, seed):
        rng = np.random.default_rng(seed)
        enc = encode(tiny_params, list(rng.integers(4, 20, size=5)))
        s = rng.normal(size=8)
        a0, _, raw = attend(tiny_params, enc, s)
        for i in range(5):
            boost = np.ones(5)
            boost[i] = 2.0
            a1, _, _ = attend(tiny_params, enc, s, boost=boost)
            if raw[i] > 0:
                assert a1[i] > a0[i]
            elif raw[i] < 0:
                assert a1[i] < a0[i]

    def test_positive_score_boost_raises_weight(self, tiny_params):
        # force a positive score on position 0
        tiny_params = tiny_params.copy()
        tiny_params.att_v[:] = np.abs(tiny_params.att_v)
        tiny_params.att_b[:] = 5.0
        enc = encode(tiny_params, [4, 5, 6])
        a0, _, raw = attend(tiny_params, enc, np.zeros(8))
        assert raw[0] > 0
        a1, _, _ = attend(tiny_params, enc, np.zeros(8), boost=np.array([2.0, 1.0, 1.0]))
        assert a1[0] > a0[0]

    def test_length_mismatch(self, tiny_params):
        enc = encode(tiny_params, [4, 5])
        with pytest.raises(ValueError, match="boost"):
            attend(tiny_params, enc, np.zeros(8), boost=np.ones(3))
        with pytest.raises(ValueError, match="coverage"):
            attend(tiny_params, enc, np.zeros(8), coverage=np.ones(1))
        with pytest.raises(ValueError, match="decoder state"):
            attend(tiny_params, enc, np.zeros(7))


class TestGenerationSwitch:
    def test_half_at_zero(self, tiny_dims):
        P = ModelParams(tiny_dims)
        assert generation_switch(P, np.zeros(8), np.zeros(8), np.zeros(8)) == 0.5

    def test_saturates(self, tiny_dims):
        P = ModelParams(tiny_dims)
        P.gen_b[0] = 20.0
        assert generation_switch(P, np.zeros(8), np.zeros(8), np.zeros(8)) > 0.9999

    def test_scalar_oracle(self, tiny_params):
        rng = np.random.default_rng(3)
        ctx, s, y = rng.normal(size=8), rng.normal(size=8), rng.normal(size=8)
        z = tiny_params.gen_b[0] + sum(float(tiny_params.gen_wh[k] * ctx[k] + tiny_params.gen_ws[k] * s[k]
                                             + tiny_params.gen_wy[k] * y[k]) for k in range(8))
        assert generation_switch(tiny_params, ctx, s, y) == pytest.approx(scalar_sigmoid_ref(z), rel=1e-13)


class TestFinalDistribution:
    def test_generate_only(self):
        pv = np.array([0.1, 0.2, 0.3, 0.4])
        out = final_distribution(1.0, pv, np.array([0.5, 0.5]), [1, 5], 6)
        np.testing.assert_array_equal(out, [0.1, 0.2, 0.3, 0.4, 0.0, 0.0])

    def test_copy_aggregates_repeats(self):
        out = final_distribution(0.0, np.full(6, 1 / 6), np.array([0.4, 0.6]), [5, 5], 6)
        assert out[5] == pytest.approx(1.0)

    def test_mixture_arithmetic(self):
        pv = np.array([0.2, 0.8])
        out = final_distribution(0.5, pv, np.array([0.1, 0.2, 0.7]), [0, 0, 1], 2)
        assert out[0] == pytest.approx(0.25)

    def test_source_outside_extended(self):
        with pytest.raises(ValueError, match="outside extended size"):
            final_distribution(0.5, np.ones(3) / 3, np.array([1.0]), [4], 4)

    @given(st.floats(0, 1), st.integers(0, 2 ** 31 - 1))
    def test_sums_to_one(self, p_gen, seed):
        rng = np.random.default_rng(seed)
        V, n = 7, int(rng.integers(1, 8))
        pv, a = rng.dirichlet(np.ones(V)), rng.dirichlet(np.ones(n))
        out = final_distribution(p_gen, pv, a, rng.integers(0, V + 3, size=n), V + 3)
        assert abs(out.sum() - 1.0) <= 1e-9 and np.all(out >= 0)


class TestDecoderStep:
    def test_initial_coverage_zero(self, tiny_params):
        enc = encode(tiny_params, [4, 5, 6])
        np.testing.assert_array_equal(initial_coverage(enc), np.zeros(3))

    def test_coverage_accumulates(self, tiny_params):
        enc = encode(tiny_params, [4, 5, 20, 6])
        state, cov, prev = initial_state(enc), initial_coverage(enc), 2
        for t in range(6):
            out = decoder_step(tiny_params, enc, state, prev, coverage=cov, extended_size=21)
            state, cov, prev = out.state, out.coverage, int(np.argmax(out.final_dist))
            assert abs(out.final_dist.sum() - 1.0) <= 1e-9
            assert 0.0 < out.p_gen < 1.0
        assert cov.sum() == pytest.approx(6.0, abs=1e-6)

    def test_scalar_oracle(self, tiny_params):
        src = [5, 20, 7, 5]
        enc = encode(tiny_params, src)
        cov = np.array([0.3, 0.1, 0.0, 0.6])
        boost = np.array([1.0, 1.5, 1.0, 2.0])
        out = decoder_step(tiny_params, enc, initial_state(enc), 21, boost=boost, coverage=cov, extended_size=22)
        att, pg, dist = scalar_step_oracle(tiny_params, src, 21, None, None, cov, boost, 22)
        np.testing.assert_allclose(out.attention, att, rtol=1e-11, atol=1e-14)
        assert out.p_gen == pytest.approx(pg, rel=1e-11)
        np.testing.assert_allclose(out.final_dist, dist, rtol=1e-10, atol=1e-14)
        np.testing.assert_allclose(out.coverage, cov + out.attention)

    def test_negative_previous_token(self, tiny_params):
        enc = encode(tiny_params, [4])
        with pytest.raises(ValueError, match="previous token"):
            decoder_step(tiny_params, enc, initial_state(enc), -1)

    def test_gradients_every_group(self, tiny_params, tiny_example):
        # one decode step plus STOP, full NLL + coverage loss
        ex = EncodedExample(tiny_example.source_ids, np.array([20, STOP_ID]), tiny_example.oovs, 22)
        _, grads, _ = nll_loss(tiny_params, ex, coverage_weight=1.0)

        def loss(theta):
            sp = sequence_pass(ModelParams(tiny_params.dims, theta), ex.source_ids, 22, targets=ex.target_ids)
            return sp.nll + sp.coverage_loss

        numeric = finite_diff_gradient(loss, tiny_params.flat.copy())
        for group, ix in tiny_params.group_slices().items():
            rep = check_gradients(grads.flat[ix], numeric[ix], 1e-4)
            assert rep.passed, f"{group}: {rep.summary()}"


class TestParams:
    def test_views_share_memory(self, tiny_params):
        tiny_params.att_v[0] = 123.0
        assert 123.0 in tiny_params.flat

    def test_size(self, tiny_dims):
        V, D, H, A = 20, 8, 8, 8
        expected = V * D + 2 * (4 * H * (D + H) + 4 * H) + A + 2 * A * H + 2 * A + 2 * H + D + 1 + V * 2 * H + V
        assert tiny_dims.size == expected

    def test_checkpoint_round_trip(self, tiny_params, tmp_path):
        save_checkpoint(tiny_params, tmp_path / "a.ckpt")
        back = load_checkpoint(tmp_path / "a.ckpt")
        assert back.dims == tiny_params.dims and back.flat.tobytes() == tiny_params.flat.tobytes()
        save_checkpoint(back, tmp_path / "b.ckpt")
        assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()

    def test_checkpoint_rejects_garbage(self, tmp_path):
        (tmp_path / "x").write_bytes(b"hello\n")
        with pytest.raises(ValueError, match="not a checkpoint"):
            load_checkpoint(tmp_path / "x")

    def test_check_finite(self, tiny_params):
        tiny_params.out_b[0] = np.nan
        with pytest.raises(FloatingPointError, match="out_b"):
            tiny_params.check_finite()
