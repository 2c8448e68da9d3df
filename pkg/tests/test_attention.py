import numpy as np
import pytest

from regioncap import tensor as T
from regioncap.attention import AttentionParams, attend, init_attention, multi_head_attention
from regioncap.gradcheck import check_gradients
from regioncap.tensor import ShapeError, Tensor, precision


def _params(rng, d_model=8, d_attn=8, heads=2, trainable=False):
    return init_attention(d_model, d_attn, heads, rng, trainable=trainable)


def _oracle_attention(q_in, kv_in, p, causal=False):
    """Unvectorized per-head reference: explicit loops over queries and keys."""
    q = q_in @ p.w_q.data
    k = kv_in @ p.w_k.data
    v = kv_in @ p.w_v.data
    d_head = p.d_attn // p.num_heads
    mixed = np.zeros((q_in.shape[0], p.d_attn))
    for h in range(p.num_heads):
        sl = slice(h * d_head, (h + 1) * d_head)
        for i in range(q_in.shape[0]):
            scores = np.array([q[i, sl] @ k[j, sl] / np.sqrt(d_head)
                               for j in range(kv_in.shape[0])])
            if causal:
                scores[i + 1:] = -np.inf
            weights = np.exp(scores - scores.max())
            weights /= weights.sum()
            for j in range(kv_in.shape[0]):
                mixed[i, sl] += weights[j] * v[j, sl]
    return mixed @ p.w_o.data


def test_single_key_output_is_value_projection_for_every_query():
    rng = np.random.default_rng(0)
    p = _params(rng)
    q_in = Tensor(rng.normal(size=(3, 8)))
    kv_in = Tensor(rng.normal(size=(1, 8)))
    out = multi_head_attention(q_in, kv_in, p)
    expect = kv_in.data @ p.w_v.data @ p.w_o.data  # softmax over one key is 1
    for row in range(3):
        np.testing.assert_allclose(out.data[row], expect[0], rtol=1e-5, atol=1e-6)


def test_kv_permutation_invariance():
    for trial in range(20):
        rng = np.random.default_rng(100 + trial)
        p = _params(rng)
        q_in = Tensor(rng.normal(size=(3, 8)))
        kv = rng.normal(size=(5, 8))
        base = multi_head_attention(q_in, Tensor(kv), p).data
        perm = rng.permutation(5)
        shuffled = multi_head_attention(q_in, Tensor(kv[perm]), p).data
        np.testing.assert_allclose(shuffled, base, atol=1e-5)


def test_query_key_scale_cancellation():
    # scaling w_q by c and w_k by 1/c leaves Q Kᵀ (hence the output) unchanged
    rng = np.random.default_rng(7)
    with precision("float64"):
        p = _params(rng)
        q_in = Tensor(rng.normal(size=(4, 8)))
        kv_in = Tensor(rng.normal(size=(6, 8)))
        base = multi_head_attention(q_in, kv_in, p).data
        c = 3.7
        scaled = AttentionParams(
            w_q=Tensor(p.w_q.data * c), w_k=Tensor(p.w_k.data / c),
            w_v=p.w_v, w_o=p.w_o, num_heads=p.num_heads)
        np.testing.assert_allclose(multi_head_attention(q_in, kv_in, scaled).data,
                                   base, atol=1e-9)


def test_matches_per_head_loop_oracle():
    rng = np.random.default_rng(21)
    with precision("float64"):
        p = _params(rng, d_model=8, d_attn=8, heads=2)
        q_in = rng.normal(size=(3, 8))
        kv_in = rng.normal(size=(5, 8))
        got = multi_head_attention(Tensor(q_in), Tensor(kv_in), p).data
        np.testing.assert_allclose(got, _oracle_attention(q_in, kv_in, p), atol=1e-6)


def test_causal_matches_oracle_and_blocks_future():
    rng = np.random.default_rng(33)
    with precision("float64"):
        p = _params(rng)
        x = rng.normal(size=(5, 8))
        got = multi_head_attention(Tensor(x), Tensor(x), p, causal=True).data
        np.testing.assert_allclose(got, _oracle_attention(x, x, p, causal=True), atol=1e-6)
        # perturbing a later token leaves earlier outputs unchanged
        y = x.copy()
        y[4] += 1.0
        got2 = multi_head_attention(Tensor(y), Tensor(y), p, causal=True).data
        np.testing.assert_allclose(got2[:4], got[:4], atol=1e-12)


def test_gradients_for_all_four_weight_matrices():
    with precision("float64"):
        rng = np.random.default_rng(55)
        p = _params(rng, trainable=True)
        q_in = Tensor(rng.normal(size=(3, 8)), requires_grad=True)
        kv_in = Tensor(rng.normal(size=(4, 8)), requires_grad=True)
        r = Tensor(rng.normal(size=(3, 8)))
        params = {"w_q": p.w_q, "w_k": p.w_k, "w_v": p.w_v, "w_o": p.w_o,
                  "q_in": q_in, "kv_in": kv_in}
        build = lambda: T.tsum(T.mul(multi_head_attention(q_in, kv_in, p), r))
        assert check_gradients(build, params) < 1e-3


def test_head_divisibility_enforced():
    rng = np.random.default_rng(1)
    with pytest.raises(ShapeError):
        init_attention(8, 6, 4, rng)


def test_mismatched_d_model_raises():
    rng = np.random.default_rng(2)
    p = _params(rng)
    with pytest.raises(ShapeError):
        multi_head_attention(Tensor(np.zeros((2, 5))), Tensor(np.zeros((2, 5))), p)


def test_attend_rejects_causal_cross_shape():
    rng = np.random.default_rng(3)
    q = Tensor(rng.normal(size=(3, 4)))
    k = Tensor(rng.normal(size=(5, 4)))
    with pytest.raises(ShapeError):
        attend(q, k, k, num_heads=2, causal=True)
