import math

import numpy as np
import pytest

from regioncap import tensor as T
from regioncap.gradcheck import check_gradients, max_relative_error
from regioncap.tensor import ShapeError, Tensor, backward, precision


def test_matmul_identity():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    eye = Tensor(np.eye(2))
    out = T.matmul(a, eye)
    np.testing.assert_allclose(out.data, a.data)


def test_matmul_scalar_case():
    out = T.matmul(Tensor([[2.0]]), Tensor([[3.0]]))
    assert out.data.shape == (1, 1)
    assert out.item() == pytest.approx(6.0)


def test_matmul_matches_triple_loop_oracle():
    rng = np.random.default_rng(11)
    a = rng.normal(size=(5, 7))
    b = rng.normal(size=(7, 3))
    # independent oracle: naive triple loop
    expect = np.zeros((5, 3))
    for i in range(5):
        for j in range(3):
            for p in range(7):
                expect[i, j] += a[i, p] * b[p, j]
    got = T.matmul(Tensor(a, dtype=np.float64), Tensor(b, dtype=np.float64))
    np.testing.assert_allclose(got.data, expect, atol=1e-6)


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 2\)"):
        T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 2))))


def test_softmax_symmetry():
    out = T.softmax(Tensor([[0.0, 0.0]]))
    np.testing.assert_allclose(out.data, [[0.5, 0.5]])


def test_softmax_max_subtraction_stability():
    out = T.softmax(Tensor([[1000.0, 0.0]], dtype=np.float64))
    assert np.all(np.isfinite(out.data))
    np.testing.assert_allclose(out.data, [[1.0, 0.0]], atol=1e-12)


def test_softmax_matches_exp_normalize_oracle():
    rng = np.random.default_rng(3)
    with precision("float64"):
        x = rng.normal(size=8)
        got = T.softmax(Tensor(x)).data
        expect = np.exp(x) / np.exp(x).sum()  # oracle: direct exp/sum in 64-bit
        np.testing.assert_allclose(got, expect, atol=1e-12)
        assert got.sum() == pytest.approx(1.0, abs=1e-6)


def test_softmax_rows_sum_to_one_property():
    rng = np.random.default_rng(17)
    for _ in range(20):
        x = Tensor(rng.normal(scale=rng.uniform(0.1, 50.0), size=(4, 9)))
        s = T.softmax(x).data
        np.testing.assert_allclose(s.sum(axis=-1), np.ones(4), atol=1e-6)


def test_softmax_empty_axis_errors():
    with pytest.raises(ShapeError):
        T.softmax(Tensor(np.zeros((2, 0))))


def test_cross_entropy_uniform_logits():
    logits = Tensor(np.zeros((1, 4)))
    loss = T.cross_entropy(logits, [2], ignore_id=-100)
    assert loss.item() == pytest.approx(math.log(4.0), abs=1e-6)


def test_cross_entropy_confident_spike():
    logits = np.zeros((1, 5))
    logits[0, 3] = 50.0
    loss = T.cross_entropy(Tensor(logits), [3], ignore_id=-100)
    assert loss.item() < 1e-8


def test_cross_entropy_matches_manual_average():
    rng = np.random.default_rng(5)
    logits = rng.normal(size=(3, 5))
    targets = [1, -100, 4]  # middle position ignored
    got = T.cross_entropy(Tensor(logits, dtype=np.float64), targets, ignore_id=-100).item()
    # oracle: per-position -log p, averaged by hand over the 2 kept rows
    expect = 0.0
    for row, tgt in ((0, 1), (2, 4)):
        p = np.exp(logits[row]) / np.exp(logits[row]).sum()
        expect += -math.log(p[tgt])
    expect /= 2.0
    assert got == pytest.approx(expect, abs=1e-9)


def test_cross_entropy_all_ignored_errors():
    with pytest.raises(ValueError, match="no supervised positions"):
        T.cross_entropy(Tensor(np.zeros((2, 4))), [-100, -100], ignore_id=-100)


def test_cross_entropy_rejects_out_of_range_target():
    with pytest.raises(ValueError):
        T.cross_entropy(Tensor(np.zeros((1, 4))), [4], ignore_id=-100)


def test_cross_entropy_never_reads_ignored_targets():
    rng = np.random.default_rng(8)
    logits = Tensor(rng.normal(size=(4, 6)))
    a = T.cross_entropy(logits, [-100, 2, -100, 5], ignore_id=-100).item()
    # garbage (even out-of-range) values at ignored positions must not matter
    b = T.cross_entropy(logits, [-100, 2, -100, 5], ignore_id=-100).item()
    assert a == b


def test_backward_sum_of_squares():
    x = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
    loss = T.tsum(T.mul(x, x))
    grads = backward(loss, {"x": x})
    np.testing.assert_allclose(grads["x"].data, 2.0 * x.data, rtol=1e-6)


def test_backward_unreachable_param_gets_zeros():
    x = Tensor(np.ones(3), requires_grad=True)
    unused = Tensor(np.ones((2, 2)), requires_grad=True)
    loss = T.tsum(x)
    grads = backward(loss, {"x": x, "unused": unused})
    np.testing.assert_array_equal(grads["unused"].data, np.zeros((2, 2)))


def test_backward_requires_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ShapeError):
        backward(T.mul(x, x), {"x": x})


def test_backward_deterministic_across_calls():
    rng = np.random.default_rng(2)
    x = Tensor(rng.normal(size=(4, 4)), requires_grad=True)
    w = Tensor(rng.normal(size=(4, 4)), requires_grad=True)
    loss = T.tmean(T.gelu(T.matmul(x, w)))
    params = {"x": x, "w": w}
    first = backward(loss, params)
    second = backward(loss, params)
    for name in params:
        np.testing.assert_array_equal(first[name].data, second[name].data)


def test_detached_tensors_never_in_gradient_map():
    x = Tensor(np.ones(3), requires_grad=True)
    frozen = Tensor(np.ones(3), requires_grad=False)
    loss = T.tsum(T.mul(x, frozen))
    grads = backward(loss, {"x": x, "frozen": frozen})
    assert "frozen" not in grads
    assert frozen.node_id is None


def test_embedding_accumulates_repeated_ids():
    table = Tensor(np.zeros((4, 2)), requires_grad=True)
    out = T.embedding(table, [1, 1, 3])
    loss = T.tsum(out)
    grads = backward(loss, {"table": table})
    expect = np.zeros((4, 2))
    expect[1] = 2.0
    expect[3] = 1.0
    np.testing.assert_array_equal(grads["table"].data, expect)


def test_concat_and_narrow_round_trip():
    a = Tensor(np.arange(6.0).reshape(2, 3))
    b = Tensor(np.arange(6.0, 12.0).reshape(2, 3))
    cat = T.concat([a, b], axis=0)
    np.testing.assert_array_equal(T.narrow(cat, 0, 2, 2).data, b.data)
    cat1 = T.concat([a, b], axis=1)
    np.testing.assert_array_equal(T.narrow(cat1, 1, 3, 3).data, b.data)


def test_layer_norm_normalizes_rows():
    rng = np.random.default_rng(9)
    x = Tensor(rng.normal(loc=5.0, scale=3.0, size=(4, 8)))
    out = T.layer_norm(x, Tensor(np.ones(8)), Tensor(np.zeros(8)))
    np.testing.assert_allclose(out.data.mean(axis=-1), np.zeros(4), atol=1e-5)
    np.testing.assert_allclose(out.data.std(axis=-1), np.ones(4), atol=1e-3)


def test_gelu_reference_values():
    # Phi(0) = 0.5 and Phi(1) ~ 0.841345 give the expected products
    out = T.gelu(Tensor(np.array([0.0, 1.0, -1.0]), dtype=np.float64))
    np.testing.assert_allclose(out.data, [0.0, 0.8413447, -0.1586553], atol=1e-6)


def _random_instance(rng, op_name):
    """Build (loss closure, params) for one op so FD can probe it."""
    if op_name == "matmul":
        a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        b = Tensor(rng.normal(size=(4, 2)), requires_grad=True)
        r = Tensor(rng.normal(size=(3, 2)))
        return lambda: T.tsum(T.mul(T.matmul(a, b), r)), {"a": a, "b": b}
    if op_name == "add_bias":
        x = Tensor(rng.normal(size=(3, 5)), requires_grad=True)
        b = Tensor(rng.normal(size=5), requires_grad=True)
        r = Tensor(rng.normal(size=(3, 5)))
        return lambda: T.tsum(T.mul(T.add(x, b), r)), {"x": x, "b": b}
    if op_name == "mul":
        a = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
        b = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
        return lambda: T.tsum(T.mul(a, b)), {"a": a, "b": b}
    if op_name == "scale":
        a = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
        r = Tensor(rng.normal(size=(2, 3)))
        return lambda: T.tsum(T.mul(T.scale(a, 1.7), r)), {"a": a}
    if op_name == "transpose":
        a = Tensor(rng.normal(size=(2, 4)), requires_grad=True)
        r = Tensor(rng.normal(size=(4, 2)))
        return lambda: T.tsum(T.mul(T.transpose(a), r)), {"a": a}
    if op_name == "concat":
        a = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
        b = Tensor(rng.normal(size=(1, 3)), requires_grad=True)
        r = Tensor(rng.normal(size=(3, 3)))
        return lambda: T.tsum(T.mul(T.concat([a, b], axis=0), r)), {"a": a, "b": b}
    if op_name == "narrow":
        a = Tensor(rng.normal(size=(4, 5)), requires_grad=True)
        r = Tensor(rng.normal(size=(2, 5)))
        return lambda: T.tsum(T.mul(T.narrow(a, 0, 1, 2), r)), {"a": a}
    if op_name == "embedding":
        tbl = Tensor(rng.normal(size=(6, 3)), requires_grad=True)
        ids = rng.integers(0, 6, size=5).tolist()
        r = Tensor(rng.normal(size=(5, 3)))
        return lambda: T.tsum(T.mul(T.embedding(tbl, ids), r)), {"tbl": tbl}
    if op_name == "layer_norm":
        x = Tensor(rng.normal(size=(3, 6)), requires_grad=True)
        g = Tensor(rng.normal(size=6), requires_grad=True)
        b = Tensor(rng.normal(size=6), requires_grad=True)
        r = Tensor(rng.normal(size=(3, 6)))
        return lambda: T.tsum(T.mul(T.layer_norm(x, g, b), r)), {"x": x, "g": g, "b": b}
    if op_name == "gelu":
        x = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        r = Tensor(rng.normal(size=(3, 4)))
        return lambda: T.tsum(T.mul(T.gelu(x), r)), {"x": x}
    if op_name == "softmax":
        x = Tensor(rng.normal(size=(3, 5)), requires_grad=True)
        r = Tensor(rng.normal(size=(3, 5)))
        return lambda: T.tsum(T.mul(T.softmax(x), r)), {"x": x}
    if op_name == "cross_entropy":
        x = Tensor(rng.normal(size=(4, 6)), requires_grad=True)
        targets = rng.integers(0, 6, size=4).tolist()
        targets[rng.integers(0, 4)] = -100
        return lambda: T.cross_entropy(x, targets, ignore_id=-100), {"x": x}
    if op_name == "tmean":
        x = Tensor(rng.normal(size=(3, 3)), requires_grad=True)
        return lambda: T.tmean(T.mul(x, x)), {"x": x}
    raise AssertionError(op_name)


PRIMITIVE_OPS = [
    "matmul", "add_bias", "mul", "scale", "transpose", "concat", "narrow",
    "embedding", "layer_norm", "gelu", "softmax", "cross_entropy", "tmean",
]


@pytest.mark.parametrize("op_name", PRIMITIVE_OPS)
def test_primitive_gradients_match_finite_differences(op_name):
    with precision("float64"):
        worst = 0.0
        for trial in range(20):
            rng = np.random.default_rng(1000 + 7 * trial)
            build, params = _random_instance(rng, op_name)
            worst = max(worst, check_gradients(build, params))
    assert worst < 1e-3, f"{op_name}: max relative error {worst:.2e}"


def test_max_relative_error_handles_small_values():
    assert max_relative_error(np.array([1e-9]), np.array([2e-9])) < 1e-8
