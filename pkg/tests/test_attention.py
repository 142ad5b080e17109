import numpy as np
import pytest

from aspect_attn.attention import (AttentionParams, AttentionVariant, contribution_decomposition, m1_attention,
                               m2_fixed_attention, m3_interpretable_value_attention, aspect_attention,
                               scaled_dot_attention)
from aspect_attn.errors import ConfigError, ShapeError
from aspect_attn.tensor import Tensor


def _params(gen, D, with_v=True):
    return AttentionParams(Tensor(gen.normal(size=(D, D)) / np.sqrt(D)),
                           w_v=Tensor(gen.normal(size=(D, D)) / np.sqrt(D)) if with_v else None)


def _np_softmax(x, axis):
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


class TestScaledDot:
    def test_matches_plain_numpy(self, gen):
        q, k, v = gen.normal(size=(5, 3)), gen.normal(size=(4, 3)), gen.normal(size=(4, 2))
        z, w = scaled_dot_attention(Tensor(q), Tensor(k), Tensor(v), 3)
        ref_w = _np_softmax(q @ k.T / np.sqrt(3), 1)
        np.testing.assert_allclose(w.array, ref_w, rtol=1e-13)
        np.testing.assert_allclose(z.data, ref_w @ v, rtol=1e-13)

    def test_incompatible_shapes(self, gen):
        with pytest.raises(ShapeError):
            scaled_dot_attention(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 4))), Tensor(np.ones((2, 2))), 3)


class TestAspectAttention:
    def test_rows_are_distributions_and_outputs_convex(self, gen):
        D, K, T = 6, 4, 9
        ssl, tok = gen.normal(size=(T, D)), gen.normal(size=(K, D))
        p = AttentionParams(Tensor(gen.normal(size=(D, D))), Tensor(gen.normal(size=(D, D))))
        z, w = aspect_attention(Tensor(ssl), Tensor(tok), p)
        assert w.array.shape == (T, K) and w.axis == 1
        np.testing.assert_allclose(w.array.sum(axis=1), 1.0, atol=1e-12)
        assert np.all(z.data >= tok.min(axis=0) - 1e-12)
        assert np.all(z.data <= tok.max(axis=0) + 1e-12)

    def test_contributions_sum_to_output(self, gen):
        ssl, tok = gen.normal(size=(3, 4)), gen.normal(size=(4, 4))
        z, w = aspect_attention(Tensor(ssl), Tensor(tok), AttentionParams(Tensor(np.eye(4))))
        c = contribution_decomposition(w, tok)
        assert c.shape == (3, 4, 4)
        np.testing.assert_allclose(c.sum(axis=1), z.data, rtol=1e-12)

    def test_value_projection_forbidden(self, gen):
        p = AttentionParams(Tensor(np.eye(3)), w_v=Tensor(np.eye(3)))
        with pytest.raises(ConfigError):
            aspect_attention(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 3))), p)

    def test_dimension_mismatch(self):
        with pytest.raises(ShapeError):
            aspect_attention(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 5))), AttentionParams(Tensor(np.eye(3))))


class TestTwoHeadVariants:
    @pytest.mark.parametrize("head,shape", [("embedding", (5, 7)), ("temporal", (6, 7))])
    def test_m1_scores_normalised_over_features(self, gen, head, shape):
        T, D, F = 6, 5, 7
        ssl, x = gen.normal(size=(T, D)), gen.normal(size=F)
        z, w = m1_attention(Tensor(ssl), Tensor(x), _params(gen, D), head)
        assert w.array.shape == shape and w.axis == 1
        np.testing.assert_allclose(w.array.sum(axis=1), 1.0)
        assert z.shape == ((F, T) if head == "embedding" else (F, D))

    def test_m1_embedding_oracle(self, gen):
        T, D, F = 4, 3, 5
        ssl, x = gen.normal(size=(T, D)), gen.normal(size=F)
        p = _params(gen, D)
        wq, wv = p.w_q.data, p.w_v.data
        scores = (ssl @ wq).T @ np.tile(x, (T, 1)) / np.sqrt(T)
        w = _np_softmax(scores, 1)
        z, _ = m1_attention(Tensor(ssl), Tensor(x), p, "embedding")
        np.testing.assert_allclose(z.data, w.T @ (ssl @ wv).T, rtol=1e-12)

    @pytest.mark.parametrize("head", ["embedding", "temporal"])
    def test_m2_rows_of_transposed_weights_sum_to_one(self, gen, head):
        T, D, F = 6, 5, 7
        ssl, x = gen.normal(size=(T, D)), gen.normal(size=F)
        z, w = m2_fixed_attention(Tensor(ssl), Tensor(x), _params(gen, D), head)
        assert w.axis == 0
        np.testing.assert_allclose(w.array.sum(axis=0), 1.0)
        v = ssl @ _params(gen, D).w_v.data  # noqa: F841 - shapes only below
        assert z.shape == ((F, T) if head == "embedding" else (F, D))

    def test_m2_temporal_oracle(self, gen):
        T, D, F = 5, 3, 4
        ssl, x = gen.normal(size=(T, D)), gen.normal(size=F)
        p = _params(gen, D)
        scores = (ssl @ p.w_q.data) @ np.tile(x, (D, 1)) / np.sqrt(D)    # T x F
        w = _np_softmax(scores.T, 1)                                      # F x T
        z, _ = m2_fixed_attention(Tensor(ssl), Tensor(x), p, "temporal")
        np.testing.assert_allclose(z.data, w @ (ssl @ p.w_v.data), rtol=1e-12)

    @pytest.mark.parametrize("head", ["embedding", "temporal"])
    def test_m3_output_rows_equal_informed_vector(self, gen, head):
        ssl, x = gen.normal(size=(6, 5)), gen.normal(size=7)
        z, _ = m3_interpretable_value_attention(Tensor(ssl), Tensor(x), _params(gen, 5, with_v=False), head)
        assert z.shape == (7, 7)
        np.testing.assert_allclose(z.data, np.tile(x, (7, 1)), rtol=1e-12)

    def test_unknown_head(self, gen):
        with pytest.raises(ConfigError):
            m1_attention(Tensor(np.ones((2, 3))), Tensor(np.ones(4)), _params(gen, 3), "spectral")

    def test_wq_shape_checked(self, gen):
        with pytest.raises(ShapeError):
            m2_fixed_attention(Tensor(np.ones((2, 3))), Tensor(np.ones(4)), _params(gen, 4), "temporal")


class TestVariantTags:
    def test_heads(self):
        assert [h.head for h in AttentionVariant.heads_for("M4")] == ["aspect"]
        assert [h.head for h in AttentionVariant.heads_for("m2")] == ["embedding", "temporal"]
