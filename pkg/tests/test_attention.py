import numpy as np
import pytest

from layerdiff import tensor as T
from layerdiff.attention import (SpatialBias, TokenMask, attention_logits, latent_token_mask, pool_mask,
                                 sma_attention, sma_bias, vanilla_attention)


class TestLogits:
    def test_hand_case(self):
        assert np.array_equal(attention_logits([[1.0]], [[2.0]]).data, [[2.0]])

    def test_zero_query(self, rng):
        assert not np.any(attention_logits(np.zeros((3, 4)), rng.normal((3, 4))).data)

    def test_symmetric_for_identity_rows(self):
        A = attention_logits(np.eye(4), np.eye(4)).data
        assert np.array_equal(A, A.T)

    def test_scaling(self, rng):
        Q, K = rng.spawn("q").normal((3, 9)), rng.spawn("k").normal((3, 9))
        assert np.allclose(attention_logits(Q, K).data, Q @ K.T / 3.0, atol=1e-14)

    def test_width_mismatch(self):
        with pytest.raises(ValueError):
            attention_logits(np.ones((2, 3)), np.ones((2, 4)))


class TestSmaBias:
    def test_zero_alpha(self):
        assert not np.any(sma_bias([1, 0, 1], SpatialBias()).data)

    def test_hand_case(self):
        b = SpatialBias(np.array([[0.0, 0.0], [0.5, 0.0]]))  # alpha[s=1, t=0] = 0.5
        assert np.array_equal(sma_bias([1, 0], b).data, [[0.0, 0.5], [0.0, 0.0]])

    def test_uniform_mask(self):
        b = SpatialBias(np.array([[0.7, 1.0], [2.0, 3.0]]))
        assert np.array_equal(sma_bias([0, 0, 0], b).data, np.full((3, 3), 0.7))

    def test_entries_index_alpha(self, rng):
        alpha = rng.normal((2, 2))
        m = rng.integers(0, 2, (7,))
        B = sma_bias(m, SpatialBias(alpha)).data
        for i in range(7):
            for j in range(7):
                assert B[i, j] == alpha[m[i], m[j]]

    def test_non_binary_mask(self):
        with pytest.raises(ValueError):
            TokenMask([0, 2])

    def test_alpha_gradient(self, rng):
        b = SpatialBias(rng.normal((2, 2)))
        Q, K, V = (rng.spawn(s).normal((5, 3)) for s in "qkv")
        m = np.array([1, 0, 0, 1, 1])
        f = lambda: T.sum_squares(sma_attention(Q, K, V, m, b))
        [g] = T.grad(f(), [b.alpha_st])
        with T.no_grad():
            [n] = T.finite_diff_grad(lambda: f().item(), [b.alpha_st])
        assert T.relative_error(g, n, 1e-6) < 1e-7


class TestSmaAttention:
    def test_zero_bias_bit_identical(self, rng):
        for i in range(20):
            r = rng.spawn(i)
            Q, K, V = r.normal((6, 4)), r.normal((6, 4)), r.normal((6, 3))
            m = r.integers(0, 2, (6,))
            assert np.array_equal(sma_attention(Q, K, V, m, SpatialBias()).data, vanilla_attention(Q, K, V).data)

    def test_large_negative_limit(self, rng):
        Q, K, V = (rng.spawn(s).normal((2, 3)) for s in "qkv")
        b = SpatialBias(np.array([[0.0, 0.0], [-1e9, 0.0]]))  # fg query -> bg key suppressed
        out = sma_attention(Q, K, V, [1, 0], b).data
        # oracle: foreground query attends to foreground keys only
        assert np.allclose(out[0], V[0], atol=1e-12)

    def test_zero_values(self, rng):
        Q, K = rng.spawn("q").normal((4, 3)), rng.spawn("k").normal((4, 3))
        assert not np.any(sma_attention(Q, K, np.zeros((4, 2)), [0, 1, 1, 0], SpatialBias(np.ones((2, 2)))).data)

    def test_masked_softmax_oracle(self, rng):
        Q, K, V = (rng.spawn(s).normal((4, 2)) for s in "qkv")
        m = np.array([1, 1, 0, 0])
        b = SpatialBias(np.array([[0.0, -1e9], [-1e9, 0.0]]))
        out = sma_attention(Q, K, V, m, b).data
        for i in range(4):
            keep = m == m[i]
            s = Q[i] @ K[keep].T / np.sqrt(2)
            w = np.exp(s - s.max())
            assert np.allclose(out[i], (w / w.sum()) @ V[keep], atol=1e-12)


class TestLatentTokenMask:
    def test_all_ones(self):
        assert np.all(latent_token_mask(np.ones((8, 8)), 4, 4).m == 1)

    def test_all_zeros(self):
        assert np.all(latent_token_mask(np.zeros((8, 8)), 2, 2).m == 0)

    def test_quadrant(self):
        m = np.zeros((4, 4))
        m[:2, 2:] = 1
        assert latent_token_mask(m, 2, 2).m.tolist() == [0, 1, 0, 0]

    def test_tie_goes_to_one(self):
        m = np.zeros((2, 2))
        m[0] = 1
        assert latent_token_mask(m, 1, 1).m.tolist() == [1]

    def test_non_divisible(self):
        with pytest.raises(ValueError):
            latent_token_mask(np.zeros((5, 5)), 2, 2)

    def test_pool_without_threshold(self):
        m = np.zeros((4, 4))
        m[0, 0] = 1
        assert pool_mask(m, 2, 2, threshold=False)[0, 0] == 0.25
