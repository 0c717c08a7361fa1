import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hccm import tensor as T
from hccm.tensor import Tensor


def leaf(a):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


def weighted_sum(out, rng):
    w = rng.normal(size=out.shape)
    return T.tsum(T.mul(out, w))


# ---------------------------------------------------------------- elementwise

def test_sigmoid_and_relu_values():
    assert T.sigmoid(Tensor(0.0)).item() == 0.5
    assert T.relu(Tensor(-3.2)).item() == 0.0
    assert T.elementwise("relu", Tensor([1.5])).item() == 1.5


def test_sigmoid_derivative_at_zero_matches_central_difference():
    x = leaf(0.0)
    T.backward(T.sigmoid(x))
    assert x.grad == pytest.approx(0.25, abs=1e-15)
    eps = 1e-5
    fd = (T._sigmoid_np(np.array(eps)) - T._sigmoid_np(np.array(-eps))) / (2 * eps)
    assert abs(x.grad - fd) <= 1e-8


def test_sigmoid_extreme_inputs_stay_in_open_interval():
    s = T.sigmoid(Tensor([-30.0, 30.0])).data
    assert 0 < s[0] < 1e-12 and 1 - 1e-12 < s[1] < 1


@pytest.mark.parametrize("op", ["relu", "sigmoid"])
def test_non_finite_input_is_rejected(op):
    with pytest.raises(T.NumericDomainError):
        T.elementwise(op, Tensor([1.0, np.nan]))


# ---------------------------------------------------------------- matmul

def test_matmul_identity_and_dot():
    m = Tensor([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(T.matmul(Tensor(np.eye(2)), m).data, m.data)
    assert T.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]])).data.tolist() == [[11.0]]


def test_matmul_gradient_is_row_sums_of_b():
    rng = np.random.default_rng(0)
    a, b = leaf(rng.normal(size=(3, 4))), leaf(rng.normal(size=(4, 2)))
    T.backward(T.tsum(T.matmul(a, b)))
    expected = np.broadcast_to(b.data.sum(axis=1), (3, 4))
    np.testing.assert_allclose(a.grad, expected, rtol=0, atol=1e-12)
    assert T.grad_check(lambda: T.tsum(T.matmul(a, b)), [a, b]) <= 1e-8


def test_matmul_shape_mismatch():
    with pytest.raises(T.ShapeError):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


# ---------------------------------------------------------------- conv2d

def test_conv2d_pointwise_scale():
    x = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(2, 2, 1))
    k = Tensor(np.full((1, 1, 1, 1), 2.0))
    out = T.conv2d(x, k, stride=1, padding="same")
    np.testing.assert_array_equal(out.data[..., 0], [[2.0, 4.0], [6.0, 8.0]])


def test_conv2d_full_window_sum():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(3, 3, 1))
    out = T.conv2d(Tensor(x), Tensor(np.ones((3, 3, 1, 1))), padding="valid")
    assert out.shape == (1, 1, 1)
    assert out.data.item() == pytest.approx(x.sum(), abs=1e-12)


def test_conv2d_kernel_gradient_matches_finite_differences():
    rng = np.random.default_rng(2)
    x, k = leaf(rng.normal(size=(5, 5, 2))), leaf(rng.normal(size=(3, 3, 2, 4)))
    w = rng.normal(size=(5, 5, 4))

    def f():
        return T.tsum(T.mul(T.conv2d(x, k, 1, "same"), w))
    T.backward(f())
    analytic = k.grad.copy()
    numeric = T.numerical_grad(lambda: float(f().data), k)
    rel = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))
    assert rel.max() <= 1e-5


@pytest.mark.parametrize("stride,padding", [(1, "same"), (2, "same"), (1, "valid"), (2, "valid")])
def test_conv2d_input_and_kernel_gradients(stride, padding):
    rng = np.random.default_rng(3)
    x, k = leaf(rng.normal(size=(2, 6, 5, 3))), leaf(rng.normal(size=(3, 3, 3, 2)))
    w = rng.normal(size=T.conv2d(x, k, stride, padding).shape)
    assert T.grad_check(lambda: T.tsum(T.mul(T.conv2d(x, k, stride, padding), w)), [x, k]) <= 1e-6


def test_conv2d_kernel_larger_than_input():
    with pytest.raises(T.ShapeError):
        T.conv2d(Tensor(np.ones((2, 2, 1))), Tensor(np.ones((3, 3, 1, 1))), padding="valid")


@settings(max_examples=40, deadline=None)
@given(h=st.integers(3, 12), w=st.integers(3, 12), stride=st.integers(1, 3),
       padding=st.sampled_from(["same", "valid"]))
def test_conv2d_output_extent_arithmetic(h, w, stride, padding):
    out = T.conv2d(Tensor(np.zeros((h, w, 2))), Tensor(np.zeros((3, 3, 2, 1))), stride, padding)
    if padding == "same":
        assert out.shape[:2] == (-(-h // stride), -(-w // stride))
    else:
        assert out.shape[:2] == ((h - 3) // stride + 1, (w - 3) // stride + 1)


# ---------------------------------------------------------------- pooling

@pytest.mark.parametrize("op", ["avg", "max"])
def test_global_pool_constant_map(op):
    out = T.global_pool(op, Tensor(np.full((3, 2, 4), 3.0)))
    np.testing.assert_array_equal(out.data, np.full(4, 3.0))


def test_global_pool_single_spike():
    F = np.zeros((2, 2, 1))
    F[1, 0, 0] = 5.0
    assert T.global_pool("avg", Tensor(F)).data.item() == 1.25
    assert T.global_pool("max", Tensor(F)).data.item() == 5.0


@pytest.mark.parametrize("op", ["avg", "max"])
def test_global_pool_gradient(op):
    rng = np.random.default_rng(4)
    F = leaf(rng.normal(size=(4, 4, 3)))
    w = rng.normal(size=3)
    assert T.grad_check(lambda: T.tsum(T.mul(T.global_pool(op, F), w)), F) <= 1e-6


def test_max_pool_tie_goes_to_first_row_major_position():
    F = leaf(np.array([[[1.0], [2.0]], [[2.0], [0.0]]]))
    T.backward(T.tsum(T.global_pool("max", F)))
    np.testing.assert_array_equal(F.grad[..., 0], [[0.0, 1.0], [0.0, 0.0]])


# ---------------------------------------------------------------- softmax

def test_softmax_uniform_and_stable():
    np.testing.assert_array_equal(T.softmax(Tensor(np.zeros(4))).data, np.full(4, 0.25))
    p = T.softmax(Tensor([1000.0, 0.0])).data
    assert abs(p[0] - 1.0) <= 1e-12 and abs(p[1]) <= 1e-12


def test_softmax_jacobian_matches_finite_differences():
    s = leaf([0.3, -0.1, 0.7])
    for i in range(3):
        def f():
            return T.reshape(T.softmax(s), (3,))
        out = f()
        pick = np.eye(3)[i]
        assert T.grad_check(lambda: T.tsum(T.mul(f(), pick)), s) <= 1e-6


def test_softmax_mask():
    p = T.softmax(Tensor([2.0, 5.0, 1.0]), mask=[True, False, True]).data
    assert p[1] == 0.0
    assert abs(p.sum() - 1.0) <= 1e-12
    with pytest.raises(T.EmptyAttentionError):
        T.softmax(Tensor([1.0, 2.0]), mask=[False, False])
    rows = T.softmax(Tensor(np.ones((2, 2))), mask=[[False, False], [True, True]], allow_empty=True).data
    np.testing.assert_array_equal(rows, [[0.0, 0.0], [0.5, 0.5]])


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=12), st.data())
def test_softmax_is_a_distribution_over_unmasked(scores, data):
    mask = data.draw(st.lists(st.booleans(), min_size=len(scores), max_size=len(scores)))
    if not any(mask):
        mask[0] = True
    p = T.softmax(Tensor(scores), mask=mask).data
    assert np.all(p >= 0)
    assert abs(p[np.array(mask)].sum() - 1.0) <= 1e-12
    assert np.all(p[~np.array(mask)] == 0.0)


# ---------------------------------------------------------------- concat / channel_scale

def test_concat_single_and_shapes():
    x = Tensor(np.ones((2, 3)))
    assert T.concat([x], axis=0) is x
    out = T.concat([Tensor(np.zeros((4, 4, 3))), Tensor(np.zeros((4, 4, 1)))], axis=-1)
    assert out.shape == (4, 4, 4)
    with pytest.raises(T.ShapeError):
        T.concat([Tensor(np.zeros((4, 4, 3))), Tensor(np.zeros((4, 3, 1)))], axis=-1)


def test_concat_gradient_split():
    rng = np.random.default_rng(5)
    a, b = leaf(rng.normal(size=(3, 2))), leaf(rng.normal(size=(3, 4)))
    w = rng.normal(size=(3, 6))
    T.backward(T.tsum(T.mul(T.concat([a, b], axis=1), w)))
    assert a.grad.shape == a.shape and b.grad.shape == b.shape
    np.testing.assert_array_equal(a.grad, w[:, :2])
    np.testing.assert_array_equal(b.grad, w[:, 2:])
    a.grad = b.grad = None
    assert T.grad_check(lambda: T.tsum(T.mul(T.concat([a, b], axis=1), w)), [a, b]) <= 1e-8


def test_channel_scale_values_and_gradients():
    rng = np.random.default_rng(6)
    F = leaf(rng.normal(size=(3, 3, 4)))
    np.testing.assert_array_equal(T.channel_scale(F, Tensor(np.ones(4))).data, F.data)
    np.testing.assert_array_equal(T.channel_scale(F, Tensor(np.full(4, 0.5))).data, F.data * 0.5)
    M = leaf(rng.normal(size=4))
    w = rng.normal(size=(3, 3, 4))
    assert T.grad_check(lambda: T.tsum(T.mul(T.channel_scale(F, M), w)), [F, M]) <= 1e-6
    with pytest.raises(T.ShapeError):
        T.channel_scale(F, Tensor(np.ones(3)))


# ---------------------------------------------------------------- backward

def test_backward_of_leaf_sum_is_ones():
    x = leaf(np.arange(6.0).reshape(2, 3))
    T.backward(T.tsum(x))
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))


def test_unused_leaf_gets_zero_gradient():
    x, y = leaf(np.ones(3)), leaf(np.ones(3))
    T.backward(T.tsum(x))
    assert y.grad is None  # never reached: zero by convention
    z = leaf(np.ones(3))
    T.backward(T.tsum(T.add(x, T.mul(z, 0.0))))
    np.testing.assert_array_equal(z.grad, np.zeros(3))


def test_frozen_tensor_receives_no_gradient():
    w = Tensor(np.ones(3))  # requires_grad=False
    x = leaf(np.ones(3))
    T.backward(T.tsum(T.mul(x, w)))
    assert w.grad is None


def test_backward_requires_scalar_root():
    with pytest.raises(T.ContractError):
        T.backward(leaf(np.ones(3)))


def test_tape_is_topologically_ordered_and_visits_once():
    x = leaf(np.ones(2))
    y = T.mul(x, x)
    z = T.add(y, y)
    root = T.tsum(z)
    tape = T.topo_order(root)
    pos = {id(n): i for i, n in enumerate(tape)}
    assert len(pos) == len(tape)
    for node in tape:
        for p in node._parents:
            assert pos[id(p)] < pos[id(node)]
    T.backward(root)
    np.testing.assert_array_equal(x.grad, 4 * x.data)


def test_grad_check_scalar_examples():
    theta = leaf(3.0)
    assert T.grad_check(lambda: T.mul(theta, theta), theta, 1e-5) <= 1e-8
    theta.grad = None
    z = leaf(0.0)
    T.backward(T.sigmoid(z))
    assert z.grad == 0.25


def test_grad_check_rejects_non_finite_objective():
    theta = leaf(1e-6)
    with pytest.raises(T.NumericDomainError):
        T.grad_check(lambda: T.log(theta), theta, 1e-5)


# ---------------------------------------------------------------- randomized property

def _random_case(op, rng):
    if op == "relu":
        x = leaf(rng.normal(size=(3, 4)))
        x.data[np.abs(x.data) < 1e-3] = 0.5  # keep away from the kink
        return [x], lambda: T.relu(x)
    if op == "sigmoid":
        x = leaf(rng.normal(size=(3, 4)) * 3)
        return [x], lambda: T.sigmoid(x)
    if op == "matmul":
        a, b = leaf(rng.normal(size=(3, 4))), leaf(rng.normal(size=(4, 2)))
        return [a, b], lambda: T.matmul(a, b)
    if op == "conv2d":
        x, k = leaf(rng.normal(size=(4, 5, 2))), leaf(rng.normal(size=(3, 3, 2, 3)))
        s = int(rng.integers(1, 3))
        return [x, k], lambda: T.conv2d(x, k, s, "same")
    if op == "avg_pool":
        F = leaf(rng.normal(size=(3, 3, 2)))
        return [F], lambda: T.global_pool("avg", F)
    if op == "max_pool":
        F = leaf(rng.normal(size=(3, 3, 2)))
        return [F], lambda: T.global_pool("max", F)
    if op == "softmax":
        s = leaf(rng.normal(size=5))
        mask = rng.random(5) < 0.7
        mask[0] = True
        return [s], lambda: T.softmax(s, mask)
    if op == "concat":
        a, b = leaf(rng.normal(size=(2, 3))), leaf(rng.normal(size=(2, 1)))
        return [a, b], lambda: T.concat([a, b], axis=1)
    if op == "channel_scale":
        F, M = leaf(rng.normal(size=(2, 3, 4))), leaf(rng.normal(size=4))
        return [F, M], lambda: T.channel_scale(F, M)
    raise AssertionError(op)


@pytest.mark.parametrize("op", ["relu", "sigmoid", "matmul", "conv2d", "avg_pool", "max_pool",
                                "softmax", "concat", "channel_scale"])
def test_gradients_match_finite_differences_100_trials(op):
    for trial in range(100):
        rng = np.random.default_rng([trial, len(op)])
        params, fn = _random_case(op, rng)
        w = rng.normal(size=fn().shape)
        err = T.grad_check(lambda: T.tsum(T.mul(fn(), w)), params, 1e-5)
        assert err <= 1e-4, (op, trial, err)


def test_forward_backward_is_bit_reproducible():
    def run():
        rng = np.random.default_rng(11)
        x, k = leaf(rng.normal(size=(2, 6, 6, 3))), leaf(rng.normal(size=(3, 3, 3, 4)))
        out = T.tsum(T.sigmoid(T.conv2d(x, k, 1, "same")))
        T.backward(out)
        return out.data.tobytes(), x.grad.tobytes(), k.grad.tobytes()
    assert run() == run()


def test_op_counter_counts_convolutions():
    with T.count_ops() as counts:
        T.conv2d(Tensor(np.zeros((3, 3, 1))), Tensor(np.zeros((1, 1, 1, 1))))
        T.relu(Tensor([1.0]))
    assert counts["conv2d"] == 1 and counts["relu"] == 1
