import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ettrack import attention as att
from ettrack import tensor as T
from ettrack.tensor import ShapeError


def conv_same(X, w, b=None, groups=1):
    return T.conv2d(X, w, b, padding=(w.shape[-1] - 1) // 2, groups=groups)


def params(D=4, E=4, Z=3, S=1, D_QK=8, groups=1, seed=0, dtype=np.float64, **kw):
    return att.init_exemplar_attention(D, D_QK, E, Z, S, groups=groups, rng=seed, dtype=dtype, **kw)


class TestExemplarAttention:
    def test_single_exemplar_is_plain_conv(self, rng):
        p = params(E=1)
        p.bias_V[:] = rng.standard_normal(4)
        X = rng.standard_normal((4, 6, 6))
        out = att.exemplar_attention_efficient(X, p)
        np.testing.assert_array_equal(out, conv_same(X, p.W_V[0], p.bias_V))
        np.testing.assert_array_equal(att.exemplar_attention_reference(X, p), out)

    def test_single_exemplar_f32(self, rng):
        p = params(E=1, dtype=np.float32)
        X = rng.standard_normal((4, 6, 6)).astype(np.float32)
        np.testing.assert_allclose(att.exemplar_attention_efficient(X, p), conv_same(X, p.W_V[0], p.bias_V),
                                   atol=1e-6)

    def test_equal_keys_use_mean_kernel(self, rng):
        p = params(E=5)
        p.K_hat[:] = p.K_hat[0]
        X = rng.standard_normal((4, 7, 5))
        np.testing.assert_allclose(att.exemplar_attention_efficient(X, p),
                                   conv_same(X, p.W_V.mean(axis=0), p.bias_V), atol=1e-12)

    def test_efficient_matches_reference(self, rng):
        p = params(D=4, E=4, Z=3)
        X = rng.standard_normal((4, 6, 6))
        np.testing.assert_allclose(att.exemplar_attention_efficient(X, p),
                                   att.exemplar_attention_reference(X, p), atol=1e-12)

    @pytest.mark.parametrize("S", [2, 3])
    def test_efficient_matches_reference_patches(self, rng, S):
        p = params(D=4, E=3, Z=3, S=S)
        X = rng.standard_normal((4, 7, 8))
        np.testing.assert_allclose(att.exemplar_attention_efficient(X, p),
                                   att.exemplar_attention_reference(X, p), atol=1e-12)

    def test_saturated_key_selects_one_value_map(self, rng):
        p = params(E=3)
        X = rng.standard_normal((4, 6, 6))
        Q = T.adaptive_avg_pool(X, 1).reshape(1, 4) @ p.W_Q
        # push exemplar 2 far ahead of the others along the query direction
        p.K_hat[2] += 1e4 * Q[0] / np.linalg.norm(Q[0])
        sim = att.similarity(X, p)
        np.testing.assert_allclose(sim, [[0.0, 0.0, 1.0]], atol=1e-300)
        np.testing.assert_allclose(att.exemplar_attention_reference(X, p), conv_same(X, p.W_V[2], p.bias_V),
                                   atol=1e-12)

    def test_similarity_rows_sum_to_one(self, rng):
        p = params(E=16, S=4)
        X = rng.standard_normal((4, 9, 9))
        sim = att.similarity(X, p)
        assert sim.shape == (16, 16)
        np.testing.assert_allclose(sim.sum(axis=1), 1, atol=1e-12)

    def test_key_shift_invariance(self, rng):
        p = params(E=4, S=2, dtype=np.float32)
        X = rng.standard_normal((4, 6, 6)).astype(np.float32)
        before = att.exemplar_attention_efficient(X, p)
        p.K_hat += rng.standard_normal(p.K_hat.shape[1]).astype(np.float32)
        np.testing.assert_allclose(att.exemplar_attention_efficient(X, p), before, atol=1e-5)

    def test_exemplar_permutation_equivariance(self, rng):
        p = params(E=5, S=2)
        X = rng.standard_normal((4, 6, 6))
        perm = rng.permutation(5)
        q = att.ExemplarAttentionParams(p.W_Q, p.K_hat[perm], p.W_V[perm], p.bias_V, S=2)
        np.testing.assert_allclose(att.exemplar_attention_efficient(X, q),
                                   att.exemplar_attention_efficient(X, p), atol=1e-12)

    def test_scale_after_softmax(self, rng):
        p = params(E=3, scale_after_softmax=True)
        X = rng.standard_normal((4, 5, 5))
        sim = att.similarity(X, p)
        np.testing.assert_allclose(sim.sum(axis=1), 1 / math.sqrt(p.d_k), atol=1e-12)
        np.testing.assert_allclose(att.exemplar_attention_efficient(X, p),
                                   att.exemplar_attention_reference(X, p), atol=1e-12)

    def test_tcond_same_as_shifted_input(self, rng):
        p = params()
        X = rng.standard_normal((4, 6, 6))
        t = rng.standard_normal(4)
        np.testing.assert_array_equal(att.exemplar_attention_efficient(X, p, t),
                                      att.exemplar_attention_efficient(X + t[:, None, None], p))

    def test_depthwise_values(self, rng):
        p = params(D=6, E=3, groups=6)
        X = rng.standard_normal((6, 5, 5))
        np.testing.assert_allclose(att.exemplar_attention_efficient(X, p),
                                   att.exemplar_attention_reference(X, p), atol=1e-12)

    def test_rejects_large_S(self):
        p = params(S=4)
        with pytest.raises(ShapeError, match="exceeds"):
            att.exemplar_attention_efficient(np.zeros((4, 3, 5)), p)

    def test_rejects_channel_mismatch(self):
        with pytest.raises(ShapeError, match="channels"):
            att.exemplar_attention_efficient(np.zeros((3, 5, 5)), params())

    def test_rejects_even_kernel(self):
        with pytest.raises(ShapeError, match="odd"):
            att.ExemplarAttentionParams(np.zeros((4, 2)), np.zeros((1, 2)), np.zeros((1, 4, 4, 2, 2)))

    def test_zero_upstream_grad(self, rng):
        p = params(E=3, S=2)
        X = rng.standard_normal((4, 6, 6))
        out, cache = att.exemplar_attention_forward(X, p, rng.standard_normal(4))
        dX, grads, dt = att.exemplar_attention_backward(np.zeros_like(out), cache)
        for g in list(grads.values()) + [dX, dt]:
            np.testing.assert_array_equal(g, 0)

    def test_routes_give_same_gradients(self, rng):
        p = params(E=3, S=2)
        X = rng.standard_normal((4, 6, 7))
        d = rng.standard_normal((4, 6, 7))
        ge = att.exemplar_attention_backward(d, att.exemplar_attention_forward(X, p)[1])
        gr = att.exemplar_attention_backward(d, att.exemplar_attention_reference_forward(X, p)[1])
        np.testing.assert_allclose(ge[0], gr[0], atol=1e-12)
        for k in ge[1]:
            np.testing.assert_allclose(ge[1][k], gr[1][k], atol=1e-12, err_msg=k)


@given(st.sampled_from([1, 2, 4, 16]), st.sampled_from([1, 2, 4]), st.sampled_from([1, 3]), st.integers(0, 10**6))
def test_routes_agree(E, S, Z, seed):
    rng = np.random.default_rng(seed)
    p = params(D=4, E=E, Z=Z, S=S, seed=seed)
    p.bias_V[:] = rng.standard_normal(4)
    X = rng.standard_normal((4, 6, 6))
    np.testing.assert_allclose(att.exemplar_attention_efficient(X, p),
                               att.exemplar_attention_reference(X, p), atol=1e-10)


class TestStandardAttention:
    def test_single_position(self, rng):
        X = rng.standard_normal((3, 1, 1))
        Wq, Wk, Wv = (rng.standard_normal((3, 2)) for _ in range(3))
        out = att.standard_attention(X, Wq, Wk, Wv)
        np.testing.assert_allclose(out[:, 0, 0], X[:, 0, 0] @ Wv)

    def test_zero_query_weights_average_values(self, rng):
        X = rng.standard_normal((3, 2, 4))
        Wk, Wv = rng.standard_normal((3, 2)), rng.standard_normal((3, 3))
        out = att.standard_attention(X, np.zeros((3, 2)), Wk, Wv)
        mean_v = (X.reshape(3, 8).T @ Wv).mean(axis=0)
        np.testing.assert_allclose(out.reshape(3, 8), np.tile(mean_v[:, None], (1, 8)), atol=1e-12)

    def test_two_positions_by_hand(self):
        X = np.array([[[1.0, 2.0]]])  # D=1, two positions
        one = np.ones((1, 1))
        out = att.standard_attention(X, one, one, one, d_k=1.0)
        # position 0: logits (1, 2); position 1: logits (2, 4)
        w0 = np.exp(2) / (np.exp(1) + np.exp(2))
        w1 = np.exp(4) / (np.exp(2) + np.exp(4))
        np.testing.assert_allclose(out[0, 0], [1 + w0, 1 + w1], rtol=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            att.StandardAttentionParams(np.zeros((3, 2)), np.zeros((3, 4)), np.zeros((3, 3)))


class TestTransformerLayer:
    def test_zero_values_reduce_to_layernorm(self, rng):
        layer = att.init_transformer_layer(4, att.Variant.ATT_ONLY, D_QK=8, rng=0, dtype=np.float64)
        layer.attn.W_V[:] = 0
        X = rng.standard_normal((4, 5, 5))
        expect = T.layernorm(X.reshape(4, 25), np.ones(4), np.zeros(4), axis=0).reshape(4, 5, 5)
        np.testing.assert_allclose(att.transformer_layer(X, layer), expect, atol=1e-12)

    def test_identity_ffn(self, rng):
        D = 4
        layer = att.init_transformer_layer(D, att.Variant.ATT_FFN, D_QK=8, rng=1, dtype=np.float64)
        layer.ffn_W1[:] = np.eye(D)
        layer.ffn_b1[:] = 100.0  # keeps the ReLU in its linear part
        layer.ffn_W2[:] = np.eye(D)
        layer.ffn_b2[:] = -100.0
        X = rng.standard_normal((D, 5, 5))
        A = att.exemplar_attention_efficient(X, layer.attn)
        y = T.layernorm((A + X).reshape(D, 25), layer.ln1_gamma, layer.ln1_beta, axis=0)
        expect = T.layernorm(y, layer.ln2_gamma, layer.ln2_beta, axis=0).reshape(D, 5, 5)
        np.testing.assert_allclose(att.transformer_layer(X, layer), expect, atol=1e-10)

    def test_ffn_residual_flag(self, rng):
        a = att.init_transformer_layer(4, D_QK=8, rng=2, dtype=np.float64)
        b = att.init_transformer_layer(4, D_QK=8, rng=2, dtype=np.float64, ffn_residual=True)
        X = rng.standard_normal((4, 5, 5))
        assert not np.allclose(att.transformer_layer(X, a), att.transformer_layer(X, b))

    def test_single_exemplar_layer_matches_conv_residual(self, rng):
        layer = att.init_transformer_layer(4, att.Variant.ATT_ONLY, D_QK=8, E=1, rng=3, dtype=np.float32)
        p = layer.attn
        X = rng.standard_normal((4, 6, 6)).astype(np.float32)
        r = conv_same(X, p.W_V[0], p.bias_V) + X
        expect = T.layernorm(r.reshape(4, 36), layer.ln1_gamma, layer.ln1_beta, axis=0).reshape(4, 6, 6)
        np.testing.assert_allclose(att.transformer_layer(X, layer), expect, atol=1e-6)

    def test_outputs_normalised_per_position(self, rng):
        layer = att.init_transformer_layer(8, att.Variant.ATT_FFN, D_QK=8, rng=4, dtype=np.float64)
        out = att.transformer_layer(rng.standard_normal((8, 4, 4)), layer)
        np.testing.assert_allclose(out.mean(axis=0), 0, atol=1e-10)

    def test_dropout_only_with_rng(self, rng):
        layer = att.init_transformer_layer(4, D_QK=8, rng=5, dtype=np.float64, dropout_rate=0.5)
        X = rng.standard_normal((4, 5, 5))
        a = att.transformer_layer(X, layer)
        np.testing.assert_array_equal(att.transformer_layer_forward(X, layer)[0], a)
        b = att.transformer_layer_forward(X, layer, rng=np.random.default_rng(0))[0]
        assert not np.allclose(a, b)

    def test_residual_needs_square_values(self):
        a = params(D=4)
        a.W_V = np.zeros((4, 3, 4, 3, 3))
        with pytest.raises(ShapeError, match="D_V == D"):
            att.TransformerLayerParams(a, np.ones(4), np.zeros(4), att.Variant.ATT_ONLY)

    def test_ffn_variant_needs_ffn(self):
        with pytest.raises(ShapeError, match="FFN"):
            att.TransformerLayerParams(params(), np.ones(4), np.zeros(4), att.Variant.ATT_FFN)

    def test_missing_cache(self):
        with pytest.raises(ValueError, match="cache"):
            att.transformer_layer_backward(np.zeros((4, 2, 2)), None)


class TestInit:
    def test_seeded(self):
        a = att.init_transformer_layer(8, D_QK=8, rng=7)
        b = att.init_transformer_layer(8, D_QK=8, rng=7)
        for (k, u), (_, v) in zip(a.arrays().items(), b.arrays().items()):
            np.testing.assert_array_equal(u, v, err_msg=k)

    def test_value_bound(self):
        p = params(D=16, E=8, Z=3)
        assert np.abs(p.W_V).max() <= math.sqrt(6 / (16 * 9))

    def test_key_std(self):
        p = att.init_exemplar_attention(8, D_QK=64, E=1024, rng=0)
        assert abs(p.K_hat.std() / (1 / 8) - 1) < 0.2
