import math

import numpy as np
import pytest
from conftest import fd_grad
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from ceit import tensor as T
from ceit.tensor import RunningStats, ShapeError, Tensor


def check_grad(op, *shapes, rng, tol=1e-6, positive=False):
    """Backprop vs central differences for ``sum(op(*inputs) * w)`` with random ``w``."""
    xs = [rng.normal(size=s) for s in shapes]
    if positive:
        xs = [np.abs(x) + 0.5 for x in xs]
    out_shape = op(*[Tensor(x) for x in xs]).shape
    w = rng.normal(size=out_shape)
    leaves = [Tensor(x.copy(), requires_grad=True) for x in xs]
    T.tsum(T.mul(op(*leaves), w)).backward()
    for i, x in enumerate(xs):

        def f(xi, i=i):
            args = [Tensor(a) for a in xs]
            args[i] = Tensor(xi)
            return float((op(*args).data * w).sum())

        num = fd_grad(f, x)
        np.testing.assert_allclose(leaves[i].grad, num, rtol=tol, atol=tol)


# -- forward examples ---------------------------------------------------------------


def test_matmul_hand_example():
    out = T.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[0.0], [1.0]]))
    np.testing.assert_array_equal(out.data, [[2.0], [4.0]])


def test_matmul_inner_mismatch():
    with pytest.raises(ShapeError):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_softmax_examples():
    np.testing.assert_allclose(T.softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])
    np.testing.assert_allclose(T.softmax(Tensor([1000.0, 1000.0, 1000.0])).data, [1 / 3] * 3)
    np.testing.assert_allclose(T.softmax(Tensor([math.log(2.0), 0.0])).data, [2 / 3, 1 / 3], rtol=1e-14)


@settings(max_examples=50, deadline=None)
@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=1, max_dims=3, max_side=6), elements=st.floats(-700, 700)))
def test_softmax_rows_sum_to_one(x):
    s = T.softmax(Tensor(x), axis=-1).data
    assert np.all(s >= 0)
    np.testing.assert_allclose(s.sum(axis=-1), 1.0, rtol=1e-12)


def test_gelu_examples():
    assert T.gelu(Tensor([0.0])).data[0] == 0.0
    assert abs(T.gelu(Tensor([10.0])).data[0] - 10.0) < 1e-6
    assert abs(T.gelu(Tensor([-10.0])).data[0]) < 1e-6


def test_gelu_is_exact_erf_form():
    from scipy.stats import norm

    x = np.linspace(-4, 4, 17)
    np.testing.assert_allclose(T.gelu(Tensor(x)).data, x * norm.cdf(x), rtol=1e-12, atol=1e-15)


def test_layer_norm_examples():
    out = T.layer_norm(Tensor([5.0, 5.0, 5.0]), Tensor(np.ones(3)), Tensor(np.zeros(3)))
    np.testing.assert_array_equal(out.data, [0.0, 0.0, 0.0])
    out = T.layer_norm(Tensor([1.0, -1.0]), Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=1e-12)
    np.testing.assert_allclose(out.data, [1.0, -1.0], rtol=1e-10)


def test_batch_norm_unit_batch_passthrough(rng):
    x = rng.normal(size=(64, 3))
    x = (x - x.mean(0)) / x.std(0)
    out = T.batch_norm(Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros(3)), RunningStats(3), training=True, axis=1)
    np.testing.assert_allclose(out.data, x, atol=1e-4)


def test_batch_norm_constant_channel_is_zero():
    x = np.full((4, 2, 3, 3), 7.0)
    out = T.batch_norm(Tensor(x), None, None, RunningStats(2), training=True)
    np.testing.assert_array_equal(out.data, 0.0)


def test_batch_norm_eval_uses_stored_stats():
    stats = RunningStats(1)
    stats.mean[...] = 2.0
    stats.var[...] = 4.0
    out = T.batch_norm(Tensor(np.full((1, 1), 4.0)), Tensor([1.0]), Tensor([0.0]), stats, training=False)
    assert out.data.item() == pytest.approx((4 - 2) / math.sqrt(4 + 1e-5), rel=1e-14)


def test_batch_norm_running_update_uses_unbiased_variance():
    x = np.array([[1.0], [3.0]])  # mean 2, biased var 1, unbiased var 2
    stats = RunningStats(1, momentum=0.1)
    T.batch_norm(Tensor(x), None, None, stats, training=True)
    assert stats.mean[0] == pytest.approx(0.2)
    assert stats.var[0] == pytest.approx(0.9 * 1.0 + 0.1 * 2.0)


def test_batch_norm_rejects_single_value_per_channel():
    with pytest.raises(ValueError):
        T.batch_norm(Tensor(np.ones((1, 3))), None, None, RunningStats(3), training=True)


def test_conv_identity_kernels(rng):
    x = rng.normal(size=(1, 1, 5, 5))
    out = T.conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1))))
    np.testing.assert_array_equal(out.data, x)
    x = rng.normal(size=(2, 4, 6, 6))
    delta = np.zeros((4, 1, 3, 3))
    delta[:, :, 1, 1] = 1.0
    out = T.conv2d(Tensor(x), Tensor(delta), padding=1, groups=4)
    np.testing.assert_array_equal(out.data, x)


def conv_loop(x, w, b, stride, pad, groups):
    n, cin, h, wd = x.shape
    cout, cg, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((n, cout, ho, wo))
    per = cout // groups
    for bi in range(n):
        for o in range(cout):
            g = o // per
            for i in range(ho):
                for j in range(wo):
                    acc = b[o]
                    for c in range(cg):
                        for u in range(kh):
                            for v in range(kw):
                                acc += w[o, c, u, v] * xp[bi, g * cg + c, i * stride + u, j * stride + v]
                    out[bi, o, i, j] = acc
    return out


@pytest.mark.parametrize("stride,pad,groups,cout", [(1, 0, 1, 2), (2, 3, 1, 4), (1, 1, 3, 3), (2, 1, 3, 6)])
def test_conv_matches_loop_oracle(rng, stride, pad, groups, cout):
    x = rng.normal(size=(1, 3, 7, 7))
    k = 7 if pad == 3 else 3
    w = rng.normal(size=(cout, 3 // groups, k, k))
    b = rng.normal(size=cout)
    out = T.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride, padding=pad, groups=groups)
    np.testing.assert_allclose(out.data, conv_loop(x, w, b, stride, pad, groups), rtol=1e-12, atol=1e-12)


def test_conv_kernel_larger_than_input():
    with pytest.raises(ShapeError):
        T.conv2d(Tensor(np.ones((1, 1, 2, 2))), Tensor(np.ones((1, 1, 3, 3))))


def test_max_pool_examples():
    assert T.max_pool2d(Tensor(np.full((1, 1, 4, 4), 3.0)), 2).data.tolist() == [[[[3.0, 3.0], [3.0, 3.0]]]]
    assert T.max_pool2d(Tensor([[[[1.0, 2.0], [3.0, 4.0]]]]), 2, 2).data.item() == 4.0


def test_max_pool_tie_routes_gradient_to_first():
    x = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
    T.tsum(T.max_pool2d(x, 2)).backward()
    np.testing.assert_array_equal(x.grad[0, 0], [[1.0, 0.0], [0.0, 0.0]])


def test_permute_is_bijection(rng):
    x = rng.normal(size=(2, 3, 4, 5))
    y = T.permute(Tensor(x), (2, 0, 3, 1))
    back = T.permute(y, tuple(np.argsort((2, 0, 3, 1))))
    np.testing.assert_array_equal(back.data, x)
    with pytest.raises(ShapeError):
        T.permute(Tensor(x), (0, 0, 1, 2))


# -- backward ---------------------------------------------------------------------------


def test_backward_simple_examples():
    x = Tensor([3.0], requires_grad=True)
    T.tsum(T.mul(x, x)).backward()
    assert x.grad[0] == 6.0
    a = Tensor([[1.0, 2.0]], requires_grad=True)
    T.tsum(T.matmul(a, Tensor([[1.0], [1.0]]))).backward()
    np.testing.assert_array_equal(a.grad, [[1.0, 1.0]])


def test_backward_accumulates_leaf_reused():
    x = Tensor([2.0], requires_grad=True)
    T.tsum(T.add(T.mul(x, x), x)).backward()
    assert x.grad[0] == 5.0


def test_backward_requires_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ShapeError):
        T.mul(x, 2.0).backward()


def test_no_grad_builds_no_graph():
    x = Tensor(np.ones(3), requires_grad=True)
    with T.no_grad():
        y = T.tsum(T.mul(x, x))
    assert y.is_leaf and not y.requires_grad


def test_non_finite_forward_raises():
    with pytest.raises(FloatingPointError), np.errstate(invalid="ignore"):
        T.mul(Tensor([np.inf]), 0.0)


GRAD_CASES = {
    "add_broadcast": (lambda a, b: T.add(a, b), [(3, 4), (4,)]),
    "mul_broadcast": (lambda a, b: T.mul(a, b), [(2, 3, 4), (3, 1)]),
    "matmul_batched": (lambda a, b: T.matmul(a, b), [(2, 3, 4), (4, 5)]),
    "linear": (lambda x, w, b: T.linear(x, w, b), [(2, 3, 4), (4, 6), (6,)]),
    "gelu": (lambda x: T.gelu(x), [(3, 5)]),
    "softmax": (lambda x: T.softmax(x, axis=1), [(2, 4, 3)]),
    "layer_norm": (lambda x, g, b: T.layer_norm(x, g, b), [(2, 3, 5), (5,), (5,)]),
    "sum_axis": (lambda x: T.tsum(x, axis=(0, 2), keepdims=True), [(2, 3, 4)]),
    "mean": (lambda x: T.mean(x, axis=1), [(2, 3, 4)]),
    "reshape_permute": (lambda x: T.permute(T.reshape(x, (3, 2, 4)), (2, 0, 1)), [(6, 4)]),
    "getitem": (lambda x: T.getitem(x, (slice(None), [0, 2, 2])), [(3, 4)]),
    "concat": (lambda a, b: T.concat([a, b], axis=1), [(2, 1, 3), (2, 4, 3)]),
    "conv": (lambda x, w, b: T.conv2d(x, w, b, stride=2, padding=1), [(2, 2, 5, 5), (3, 2, 3, 3), (3,)]),
    "conv_depthwise": (lambda x, w: T.conv2d(x, w, padding=1, groups=3), [(1, 3, 4, 4), (3, 1, 3, 3)]),
    "max_pool": (lambda x: T.max_pool2d(x, 3, 2, padding=1), [(2, 2, 6, 6)]),
}


@pytest.mark.parametrize("name", sorted(GRAD_CASES))
def test_op_gradients_match_finite_differences(name, rng):
    op, shapes = GRAD_CASES[name]
    check_grad(op, *shapes, rng=rng)


def test_batch_norm_train_gradient(rng):
    def op(x, g, b):
        return T.batch_norm(x, g, b, RunningStats(3), training=True, axis=1, update_stats=False)

    check_grad(op, (4, 3, 2, 2), (3,), (3,), rng=rng)


def test_cross_entropy_gradient_and_value(rng):
    logits = rng.normal(size=(4, 5))
    labels = np.array([0, 3, 4, 1])

    def ref(z):
        z = z - z.max(1, keepdims=True)
        return float(-(z[np.arange(4), labels] - np.log(np.exp(z).sum(1))).mean())

    t = Tensor(logits.copy(), requires_grad=True)
    loss = T.cross_entropy(t, labels)
    assert loss.item() == pytest.approx(ref(logits), rel=1e-13)
    loss.backward()
    np.testing.assert_allclose(t.grad, fd_grad(ref, logits), atol=1e-8)


def test_mac_counter_matmul_and_conv():
    with T.count_macs() as c:
        T.matmul(Tensor(np.ones((2, 3, 4))), Tensor(np.ones((4, 5))))
        T.conv2d(Tensor(np.ones((1, 2, 4, 4))), Tensor(np.ones((6, 2, 3, 3))), padding=1)
    assert c.by_op["matmul"] == 2 * 3 * 4 * 5
    assert c.by_op["conv2d"] == 6 * 16 * 2 * 9
