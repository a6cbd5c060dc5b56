import math

import numpy as np
import pytest

from grounding3d import attention as A
from grounding3d import tensor as T
from grounding3d.tensor import ShapeError, Tensor, grad_check


def loop_attention(q_in, kv_in, p):
    """Naive per-head oracle: explicit loops, no vectorized softmax."""
    q = q_in @ p.w_q.data
    k = kv_in @ p.w_k.data
    v = kv_in @ p.w_v.data
    d = p.width
    dk = d // p.heads
    m, n = q_in.shape[0], kv_in.shape[0]
    concat = np.zeros((m, d))
    for h in range(p.heads):
        qh = q[:, h * dk:(h + 1) * dk]
        kh = k[:, h * dk:(h + 1) * dk]
        vh = v[:, h * dk:(h + 1) * dk]
        for i in range(m):
            logits = [sum(qh[i][t] * kh[j][t] for t in range(dk)) / math.sqrt(dk)
                      for j in range(n)]
            z = sum(math.exp(l) for l in logits)
            weights = [math.exp(l) / z for l in logits]
            for c in range(dk):
                concat[i, h * dk + c] = sum(weights[j] * vh[j][c] for j in range(n))
    return concat @ p.w_o.data


def make_params(seed, d=4, heads=2):
    return A.AttentionParams.create(np.random.default_rng(seed), d, heads)


def test_mhca_single_key_degeneracy():
    p = make_params(0)
    rng = np.random.default_rng(1)
    q_in = Tensor(rng.standard_normal((3, 4)))
    kv = rng.standard_normal((1, 4))
    out, weights = A.mhca(q_in, Tensor(kv), p, return_weights=True)
    for w in weights:
        assert np.allclose(w.data, 1.0)
    expected = np.repeat(kv @ p.w_v.data @ p.w_o.data, 3, axis=0)
    assert np.allclose(out.data, expected, atol=1e-12)


def test_mhca_duplicate_kv_rows_invariant():
    p = make_params(2)
    rng = np.random.default_rng(3)
    q_in = Tensor(rng.standard_normal((2, 4)))
    kv = rng.standard_normal((3, 4))
    single = A.mhca(q_in, Tensor(kv), p)
    doubled = A.mhca(q_in, Tensor(np.vstack([kv, kv])), p)
    assert np.allclose(single.data, doubled.data, atol=1e-12)


def test_mhca_matches_loop_oracle():
    rng = np.random.default_rng(4)
    p = make_params(5)
    q_in = rng.standard_normal((2, 4))
    kv = rng.standard_normal((3, 4))
    out = A.mhca(Tensor(q_in), Tensor(kv), p)
    assert np.max(np.abs(out.data - loop_attention(q_in, kv, p))) < 1e-10


def test_mhca_mhsa_loop_oracle_many_seeds():
    for seed in range(100):
        rng = np.random.default_rng(seed)
        d = int(rng.choice([4, 8]))
        heads = int(rng.choice([1, 2, 4]))
        p = A.AttentionParams.create(rng, d, heads)
        m, n = int(rng.integers(1, 5)), int(rng.integers(1, 5))
        q_in = rng.standard_normal((m, d))
        kv = rng.standard_normal((n, d))
        cross = A.mhca(Tensor(q_in), Tensor(kv), p)
        assert np.max(np.abs(cross.data - loop_attention(q_in, kv, p))) < 1e-10
        x = rng.standard_normal((n, d))
        own = A.mhsa(Tensor(x), p)
        assert np.max(np.abs(own.data - loop_attention(x, x, p))) < 1e-10


def test_mhsa_single_row():
    p = make_params(6)
    x = np.random.default_rng(7).standard_normal((1, 4))
    out = A.mhsa(Tensor(x), p)
    assert np.allclose(out.data, x @ p.w_v.data @ p.w_o.data, atol=1e-12)


def test_mhsa_permutation_equivariance():
    p = make_params(8)
    x = np.random.default_rng(9).standard_normal((4, 4))
    perm = [2, 0, 3, 1]
    out = A.mhsa(Tensor(x), p).data
    out_perm = A.mhsa(Tensor(x[perm]), p).data
    assert np.allclose(out_perm, out[perm], atol=1e-12)


def test_attention_weight_rows_sum_to_one():
    p = make_params(10)
    rng = np.random.default_rng(11)
    _, weights = A.mhca(Tensor(rng.standard_normal((3, 4))),
                        Tensor(rng.standard_normal((5, 4))), p, return_weights=True)
    for w in weights:
        assert np.max(np.abs(np.sum(w.data, axis=1) - 1.0)) < 1e-12


def test_width_mismatch_raises():
    p = make_params(12)
    with pytest.raises(ShapeError):
        A.mhca(Tensor(np.zeros((2, 6))), Tensor(np.zeros((2, 4))), p)


def test_ffn_identity_config():
    p = A.FFNParams.identity(3)
    x = np.random.default_rng(13).standard_normal((2, 3))
    assert np.array_equal(A.ffn(Tensor(x), p).data, x)


def test_encoder_layer_shapes():
    rng = np.random.default_rng(14)
    p = A.EncoderLayerParams.create(rng, 32, 4, 64)
    out = A.visual_encoder_layer(Tensor(rng.standard_normal((10, 32))),
                                 Tensor(rng.standard_normal((6, 32))), p)
    assert out.shape == (10, 32)
    out = A.depth_encoder_layer(Tensor(rng.standard_normal((8, 32))),
                                Tensor(rng.standard_normal((6, 32))), p)
    assert out.shape == (8, 32)


def test_zero_text_contributes_nothing():
    """With no projection biases, cross-attention over zero text adds zero."""
    rng = np.random.default_rng(15)
    p = A.EncoderLayerParams.create(rng, 8, 2, 16)
    x = Tensor(rng.standard_normal((4, 8)))
    zeros = Tensor(np.zeros((3, 8)))

    for layer in (A.visual_encoder_layer, A.depth_encoder_layer):
        full = layer(x, zeros, p)
        # replay the layer without its cross-attention stage
        y = x
        order = A.VISUAL_LAYER_ORDER if layer is A.visual_encoder_layer else A.DEPTH_LAYER_ORDER
        for stage in order:
            if stage == "self_attention":
                y = T.add(y, A.mhsa(y, p.self_attn))
            elif stage == "ffn":
                y = T.add(y, A.ffn(y, p.ffn))
        assert np.allclose(full.data, y.data, atol=1e-12)


def test_sublayer_orders_differ_structurally():
    assert A.VISUAL_LAYER_ORDER != A.DEPTH_LAYER_ORDER
    assert A.VISUAL_LAYER_ORDER.index("ffn") == 2
    assert A.DEPTH_LAYER_ORDER.index("ffn") == 1
    assert set(A.VISUAL_LAYER_ORDER) == set(A.DEPTH_LAYER_ORDER)


@pytest.mark.parametrize("layer", [A.visual_encoder_layer, A.depth_encoder_layer])
def test_encoder_layer_gradcheck(layer):
    rng = np.random.default_rng(16)
    p = A.EncoderLayerParams.create(rng, 4, 2, 8)
    text = Tensor(rng.standard_normal((3, 4)))
    x0 = Tensor(rng.standard_normal((2, 4)))
    readout = Tensor(rng.standard_normal((2, 4)))

    def f(x):
        return T.total(T.mul(layer(x, text, p), readout))

    assert grad_check(f, x0) < 1e-5

    def g(t):
        return T.total(T.mul(layer(x0, t, p), readout))

    assert grad_check(g, text) < 1e-5


def test_mhca_gradcheck_through_params():
    rng = np.random.default_rng(17)
    p = make_params(18)
    q_in = Tensor(rng.standard_normal((2, 4)))
    kv = Tensor(rng.standard_normal((3, 4)))

    def f(wq):
        p2 = A.AttentionParams(wq, p.w_k, p.w_v, p.w_o, p.heads)
        return T.mean(A.mhca(q_in, kv, p2))

    assert grad_check(f, p.w_q) < 1e-5
