import numpy as np
import pytest

from crt import attention as A, tensor as T
from crt.attention import causal_mask_with_memory, multi_head_attention, transformer_layer
from crt.errors import DimensionError
from crt.tensor import MASK_SENTINEL, Tape, Tensor


def reference_attention(x, p, mask):
    """Definitional multi-head computation in plain numpy, used as the oracle."""
    outs = []
    d_k = p.d_k
    for i in range(p.heads):
        q = x @ p.w_q[i].data
        k = x @ p.w_k[i].data
        v = x @ p.w_v[i].data
        scores = q @ k.T / np.sqrt(d_k)
        if mask is not None:
            scores = scores + mask
        scores -= scores.max(axis=1, keepdims=True)
        w = np.exp(scores)
        w /= w.sum(axis=1, keepdims=True)
        outs.append(w @ v)
    return np.concatenate(outs, axis=1) @ p.w_o.data


class TestCausalMask:
    def test_length_one(self):
        mask = causal_mask_with_memory(1)
        allowed = {(i, j) for i in range(2) for j in range(2) if mask[i, j] == 0.0}
        assert allowed == {(0, 0), (1, 0), (1, 1)}

    def test_length_two(self):
        mask = causal_mask_with_memory(2)
        assert (mask[2] == 0.0).all()
        assert mask[1, 2] == MASK_SENTINEL
        assert mask[1, 0] == 0.0 and mask[1, 1] == 0.0

    def test_every_row_attends_somewhere(self):
        for n in (1, 3, 7):
            mask = causal_mask_with_memory(n)
            assert (mask == 0.0).any(axis=1).all()

    def test_block_diag(self):
        mask = A.block_diag_mask(causal_mask_with_memory(2), 2)
        assert mask.shape == (6, 6)
        assert (mask[:3, 3:] == MASK_SENTINEL).all()
        assert (mask[3:, :3] == MASK_SENTINEL).all()
        np.testing.assert_array_equal(mask[3:, 3:], causal_mask_with_memory(2))


class TestMultiHeadAttention:
    def test_single_key_per_row(self):
        # mask every row down to exactly one position: output row = that value row
        rng = np.random.default_rng(0)
        p = A.init_attention_params(rng, 6, 2)
        x = Tensor(rng.normal(size=(3, 6)))
        mask = np.full((3, 3), MASK_SENTINEL)
        keys = [2, 0, 1]
        for i, j in enumerate(keys):
            mask[i, j] = 0.0
        out = multi_head_attention(x, p, mask)
        values = np.concatenate([x.data @ p.w_v[i].data for i in range(2)], axis=1)
        np.testing.assert_allclose(out.data, values[keys] @ p.w_o.data, atol=1e-12)

    def test_identical_keys_give_uniform_attention(self):
        rng = np.random.default_rng(1)
        p = A.init_attention_params(rng, 4, 1)
        x_rows = np.tile(rng.normal(size=(1, 4)), (3, 1))
        # identical rows: every allowed position gets equal weight, so the
        # output equals the mean of allowed value rows
        values = x_rows @ p.w_v[0].data
        out = multi_head_attention(Tensor(x_rows), p, None)
        np.testing.assert_allclose(out.data, np.tile(values.mean(axis=0), (3, 1)) @ p.w_o.data, atol=1e-12)

    def test_matches_definitional_oracle(self):
        rng = np.random.default_rng(2)
        for heads in (1, 2, 4):
            p = A.init_attention_params(rng, 8, heads)
            x = rng.normal(size=(5, 8))
            mask = causal_mask_with_memory(4)
            got = multi_head_attention(Tensor(x), p, mask)
            np.testing.assert_allclose(got.data, reference_attention(x, p, mask), atol=1e-12)

    def test_gradient_wrt_query_weights(self):
        rng = np.random.default_rng(3)
        p = A.init_attention_params(rng, 4, 2)
        x = Tensor(rng.normal(size=(4, 4)))
        mask = causal_mask_with_memory(3)
        probe = Tensor(rng.normal(size=(4, 4)))

        def loss(w):
            q = A.AttentionParams(w_q=[w, p.w_q[1]], w_k=p.w_k, w_v=p.w_v, w_o=p.w_o, heads=2)
            return T.reduce_sum(T.hadamard(multi_head_attention(x, q, mask), probe))

        assert T.grad_check(loss, p.w_q[0]) < 1e-4

    def test_dimension_error(self):
        rng = np.random.default_rng(4)
        p = A.init_attention_params(rng, 4, 2)
        with pytest.raises(DimensionError):
            multi_head_attention(Tensor(np.ones((3, 5))), p, None)

    def test_attention_rows_are_distributions(self):
        rng = np.random.default_rng(5)
        x = rng.normal(size=(4, 6))
        w = rng.normal(size=(6, 3))
        scores = T.matmul(Tensor(x @ w), T.transpose(Tensor(x @ w)))
        weights = T.softmax_rows(scores, causal_mask_with_memory(3)).data
        assert (weights >= 0.0).all()
        np.testing.assert_allclose(weights.sum(axis=1), 1.0, atol=1e-12)
        # masked entries contribute nothing
        assert (weights[causal_mask_with_memory(3) == MASK_SENTINEL] == 0.0).all()


class TestTransformerLayer:
    def test_zero_weights_is_identity(self):
        d_m, d_ff = 4, 8
        z = lambda *s: Tensor(np.zeros(s))
        p = A.LayerParams(
            attn=A.AttentionParams(w_q=[z(4, 2), z(4, 2)], w_k=[z(4, 2), z(4, 2)],
                                   w_v=[z(4, 2), z(4, 2)], w_o=z(4, 4), heads=2),
            w1=z(d_m, d_ff), b1=z(d_ff), w2=z(d_ff, d_m), b2=z(d_m),
            ln1_gain=Tensor(np.ones(d_m)), ln1_bias=z(d_m),
            ln2_gain=Tensor(np.ones(d_m)), ln2_bias=z(d_m))
        x = np.random.default_rng(6).normal(size=(4, 4))
        out = transformer_layer(Tensor(x), p, causal_mask_with_memory(3))
        np.testing.assert_array_equal(out.data, x)

    def test_shape_preserved(self):
        rng = np.random.default_rng(7)
        for n, d_m in ((1, 4), (5, 8)):
            p = A.init_layer_params(rng, d_m, 2, 2 * d_m)
            out = transformer_layer(Tensor(rng.normal(size=(n + 1, d_m))), p,
                                    causal_mask_with_memory(n))
            assert out.shape == (n + 1, d_m)

    def test_causality_perturbation(self):
        # bumping row j leaves rows < j (and the memory row) exactly unchanged
        rng = np.random.default_rng(8)
        p = A.init_layer_params(rng, 6, 2, 12)
        n = 4
        x = rng.normal(size=(n + 1, 6))
        base = transformer_layer(Tensor(x), p, causal_mask_with_memory(n)).data
        j = 3
        bumped = x.copy()
        bumped[j] += rng.normal(size=6)
        out = transformer_layer(Tensor(bumped), p, causal_mask_with_memory(n)).data
        np.testing.assert_array_equal(out[:j], base[:j])
        assert np.abs(out[j:] - base[j:]).max() > 1e-8

    def test_memory_row_influences_everything(self):
        rng = np.random.default_rng(9)
        p = A.init_layer_params(rng, 6, 2, 12)
        n = 3
        x = rng.normal(size=(n + 1, 6))
        base = transformer_layer(Tensor(x), p, causal_mask_with_memory(n)).data
        bumped = x.copy()
        bumped[0] += rng.normal(size=6)
        out = transformer_layer(Tensor(bumped), p, causal_mask_with_memory(n)).data
        assert (np.abs(out - base).max(axis=1) > 1e-10).all()

    def test_permutation_equivariance_with_full_mask(self):
        # identity-affine layer norms, bidirectional mask: permuting two input
        # rows permutes the output rows, confirming no positional terms hide
        # inside the attention scores
        rng = np.random.default_rng(10)
        p = A.init_layer_params(rng, 6, 2, 12)  # gains 1, biases 0 at init
        x = rng.normal(size=(5, 6))
        full_mask = np.zeros((5, 5))
        base = transformer_layer(Tensor(x), p, full_mask).data
        perm = [0, 3, 2, 1, 4]  # swap rows 1 and 3
        out = transformer_layer(Tensor(x[perm]), p, full_mask).data
        np.testing.assert_allclose(out, base[perm], atol=1e-12)

    def test_relu_activation_option(self):
        rng = np.random.default_rng(11)
        p = A.init_layer_params(rng, 4, 2, 8)
        x = Tensor(rng.normal(size=(3, 4)))
        mask = causal_mask_with_memory(2)
        a = transformer_layer(x, p, mask, activation="gelu").data
        b = transformer_layer(x, p, mask, activation="relu").data
        assert np.abs(a - b).max() > 1e-9

    def test_dropout_zero_is_inert_and_seeded_dropout_is_deterministic(self):
        rng = np.random.default_rng(12)
        p = A.init_layer_params(rng, 4, 2, 8)
        x = Tensor(rng.normal(size=(3, 4)))
        mask = causal_mask_with_memory(2)
        plain = transformer_layer(x, p, mask).data
        inert = transformer_layer(x, p, mask, dropout=0.0, rng=np.random.default_rng(0)).data
        np.testing.assert_array_equal(plain, inert)
        d1 = transformer_layer(x, p, mask, dropout=0.5, rng=np.random.default_rng(1)).data
        d2 = transformer_layer(x, p, mask, dropout=0.5, rng=np.random.default_rng(1)).data
        np.testing.assert_array_equal(d1, d2)
        assert np.abs(d1 - plain).max() > 1e-9

    def test_gradient_through_layer(self):
        rng = np.random.default_rng(13)
        p = A.init_layer_params(rng, 4, 2, 8)
        mask = causal_mask_with_memory(3)
        probe = Tensor(rng.normal(size=(4, 4)))

        def loss(x):
            return T.reduce_sum(T.hadamard(transformer_layer(x, p, mask), probe))

        assert T.grad_check(loss, Tensor(rng.normal(size=(4, 4)))) < 1e-4


class TestHeadSplitConsistency:
    def test_manual_head_merge_equals_module(self):
        rng = np.random.default_rng(14)
        p = A.init_attention_params(rng, 8, 4)
        x = rng.normal(size=(6, 8))
        mask = causal_mask_with_memory(5)
        module = multi_head_attention(Tensor(x), p, mask).data

        tape = Tape()
        xt = tape.leaf(x)
        heads = []
        for i in range(4):
            q = T.matmul(xt, p.w_q[i])
            k = T.matmul(xt, p.w_k[i])
            v = T.matmul(xt, p.w_v[i])
            w = T.softmax_rows(T.scale(T.matmul(q, T.transpose(k)), 1.0 / np.sqrt(p.d_k)), mask)
            heads.append(T.matmul(w, v))
        manual = T.matmul(T.cols_concat(heads), p.w_o).data
        np.testing.assert_allclose(module, manual, atol=1e-13)
