import numpy as np
import pytest

from regioncap import tensor as T
from regioncap.errors import ValidationError
from regioncap.gradcheck import check_gradients
from regioncap.layers import init_linear
from regioncap.lora import attach_lora, lora_forward, lora_init, lora_merge
from regioncap.optim import AdamHyper, AdamState, adamw_update
from regioncap.tensor import Tensor, backward, precision


def test_forward_at_init_equals_base_exactly():
    rng = np.random.default_rng(0)
    layer = lora_init(6, 4, r=2, alpha=4.0, rng=rng, bias=True)
    x = Tensor(rng.normal(size=(5, 4)))
    adapted = lora_forward(x, layer).data
    base = (T.add(T.matmul(x, T.transpose(layer.w0)), layer.bias)).data
    np.testing.assert_array_equal(adapted, base)


def test_rank_boundaries():
    rng = np.random.default_rng(1)
    lora_init(4, 6, r=4, alpha=8.0, rng=rng)  # r = min(d, k) accepted
    with pytest.raises(ValidationError):
        lora_init(4, 6, r=0, alpha=8.0, rng=rng)
    with pytest.raises(ValidationError):
        lora_init(4, 6, r=5, alpha=8.0, rng=rng)


def test_doubling_alpha_doubles_adapter_contribution():
    rng = np.random.default_rng(2)
    with precision("float64"):
        layer = lora_init(5, 5, r=2, alpha=4.0, rng=rng)
        layer.b.data[...] = rng.normal(size=layer.b.shape)
        x = Tensor(rng.normal(size=(3, 5)))
        base = T.matmul(x, T.transpose(layer.w0)).data
        delta1 = lora_forward(x, layer).data - base
        layer.alpha = 8.0
        delta2 = lora_forward(x, layer).data - base
        np.testing.assert_allclose(delta2, 2.0 * delta1, rtol=1e-9)


def test_forward_matches_dense_merge_oracle():
    rng = np.random.default_rng(3)
    with precision("float64"):
        layer = lora_init(7, 4, r=3, alpha=6.0, rng=rng)
        layer.b.data[...] = rng.normal(size=layer.b.shape)
        x = rng.normal(size=(6, 4))
        got = lora_forward(Tensor(x), layer).data
        dense = layer.w0.data + (layer.alpha / layer.r) * (layer.b.data @ layer.a.data)
        np.testing.assert_allclose(got, x @ dense.T, atol=1e-5)


def test_merge_identity_and_paired_forwards():
    rng = np.random.default_rng(4)
    zero_b = lora_init(5, 5, r=2, alpha=4.0, rng=rng)
    np.testing.assert_array_equal(lora_merge(zero_b).data, zero_b.w0.data)

    layer = lora_init(6, 5, r=2, alpha=4.0, rng=rng)
    layer.b.data[...] = rng.normal(size=layer.b.shape)
    merged = lora_merge(layer)
    for trial in range(100):
        x = Tensor(np.random.default_rng(500 + trial).normal(size=(2, 5)))
        via_adapter = lora_forward(x, layer).data
        via_merged = T.matmul(x, T.transpose(merged)).data
        np.testing.assert_allclose(via_adapter, via_merged, atol=1e-5)


def test_rank_one_update_matches_outer_product():
    rng = np.random.default_rng(5)
    layer = lora_init(4, 3, r=1, alpha=2.0, rng=rng)
    layer.a.data[...] = rng.normal(size=(1, 3))
    layer.b.data[...] = rng.normal(size=(4, 1))
    merged = lora_merge(layer).data
    outer = np.outer(layer.b.data[:, 0], layer.a.data[0])  # oracle: explicit outer product
    np.testing.assert_allclose(merged - layer.w0.data, 2.0 * outer, rtol=1e-6)


def test_gradients_flow_only_into_factors():
    with precision("float64"):
        rng = np.random.default_rng(6)
        layer = lora_init(5, 4, r=2, alpha=4.0, rng=rng, bias=True)
        layer.b.data[...] = rng.normal(size=layer.b.shape)
        x = Tensor(rng.normal(size=(3, 4)))
        r = Tensor(rng.normal(size=(3, 5)))
        build = lambda: T.tsum(T.mul(lora_forward(x, layer), r))
        grads = backward(build(), {"w0": layer.w0, "a": layer.a, "b": layer.b, "bias": layer.bias})
        assert set(grads) == {"a", "b"}
        assert check_gradients(build, {"a": layer.a, "b": layer.b}) < 1e-3


def _fit_adapter(r, steps=250, seed=7):
    """Train only A/B to mimic a random dense target map; returns final loss."""
    rng = np.random.default_rng(seed)
    target = rng.normal(size=(12, 12)) / np.sqrt(12)
    xs = rng.normal(size=(16, 12))
    layer = lora_init(12, 12, r=r, alpha=2.0 * r, rng=np.random.default_rng(seed + 1))
    params = {"a": layer.a, "b": layer.b}
    state = AdamState.for_params(params)
    hyper = AdamHyper(lr=2e-2)
    w0_before = layer.w0.data.tobytes()
    want = Tensor(xs @ target.T)
    xs_t = Tensor(xs)
    loss_val = None
    for _ in range(steps):
        diff = T.add(lora_forward(xs_t, layer), T.scale(want, -1.0))
        loss = T.tmean(T.mul(diff, diff))
        adamw_update(params, backward(loss, params), state, hyper)
        loss_val = loss.item()
    assert layer.w0.data.tobytes() == w0_before  # base weights bitwise unchanged
    return loss_val


def test_training_never_touches_w0_and_higher_rank_fits_better():
    loss_r8 = _fit_adapter(r=8)
    loss_r2 = _fit_adapter(r=2)
    assert loss_r8 <= loss_r2


def test_attach_lora_shares_and_freezes_base():
    rng = np.random.default_rng(8)
    base = init_linear(rng, 4, 6)
    adapted = attach_lora(base, r=2, alpha=4.0, rng=rng)
    assert adapted.w0 is base.weight
    assert not base.weight.requires_grad
    x = Tensor(rng.normal(size=(3, 4)))
    np.testing.assert_array_equal(adapted(x).data, base(x).data)
