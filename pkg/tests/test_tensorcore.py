import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from difflab import tensorcore as tc


def leaf(a):
    return tc.Tensor(np.asarray(a, dtype=float), requires_grad=True)


def central_diff(f, x, h=1e-6):
    """Numerical gradient of scalar numpy function f at x."""
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return g


def test_matmul_identity():
    m = np.array([[1.0, 2.0], [3.0, 4.0]])
    out = tc.matmul(np.eye(2), m)
    np.testing.assert_array_equal(out.data, m)


def test_matmul_hand_arithmetic():
    out = tc.matmul([[1.0, 2.0], [3.0, 4.0]], [[0.0], [1.0]])
    np.testing.assert_array_equal(out.data, [[2.0], [4.0]])


def test_matmul_shape_mismatch():
    with pytest.raises(ValueError, match="dimension"):
        tc.matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_matmul_grad_against_finite_differences():
    rng = np.random.default_rng(3)
    A0, B = rng.standard_normal((3, 4)), rng.standard_normal((4, 2))
    a = leaf(A0.copy())
    tc.sum(tc.matmul(a, B)).backward()
    expected = np.ones((3, 2)) @ B.T
    numeric = central_diff(lambda x: (x @ B).sum(), A0.copy())
    np.testing.assert_allclose(numeric, expected, atol=1e-8)
    np.testing.assert_allclose(a.grad, expected, atol=1e-12)


def test_grad_check_square():
    x = leaf([3.0])
    err = tc.grad_check(lambda: tc.sum(tc.square(x)), [x])
    assert err < 1e-8
    x.grad = None
    tc.sum(tc.square(x)).backward()
    assert x.grad[0] == pytest.approx(6.0)


def test_grad_check_constant_function():
    x = leaf([1.5, -2.0])
    c = tc.Tensor([7.0])
    assert tc.grad_check(lambda: tc.sum(tc.add(tc.scale(x, 0.0), c)), [x]) == 0.0


def test_grad_check_rejects_non_scalar():
    x = leaf([1.0, 2.0])
    with pytest.raises(ValueError, match="scalar"):
        tc.grad_check(lambda: tc.square(x), [x])


def test_grad_check_rejects_bad_step():
    x = leaf([1.0])
    with pytest.raises(ValueError):
        tc.grad_check(lambda: tc.sum(x), [x], h=1e-2)


def test_one_hidden_layer_mlp_mse():
    rng = np.random.default_rng(0)
    # 2 -> 10 -> 2: 20 + 10 + 20 = 50 trainable numbers
    w1, b1 = leaf(rng.standard_normal((2, 10))), leaf(np.zeros(10))
    w2 = leaf(rng.standard_normal((10, 2)))
    x, y = rng.standard_normal((8, 2)), rng.standard_normal((8, 2))
    params = [w1, b1, w2]
    assert sum(p.data.size for p in params) == 50

    def f():
        h = tc.silu(tc.add(tc.matmul(x, w1), b1))
        return tc.mse(tc.matmul(h, w2), y)

    assert tc.grad_check(f, params) < 1e-4


OPS = {
    "add": lambda a, b: tc.sum(tc.add(a, b)),
    "sub": lambda a, b: tc.sum(tc.square(tc.sub(a, b))),
    "mul": lambda a, b: tc.sum(tc.mul(a, b)),
    "scale": lambda a, b: tc.sum(tc.square(tc.scale(a, -1.7))),
    "silu": lambda a, b: tc.sum(tc.mul(tc.silu(a), b)),
    "mean": lambda a, b: tc.mean(tc.square(tc.add(a, b))),
    "mse": lambda a, b: tc.mse(a, b),
    "mse_weighted": lambda a, b: tc.mse(a, b, weight=np.array([[1.0], [0.0], [2.0]])),
    "matmul": lambda a, b: tc.sum(tc.square(tc.matmul(a, np.linspace(-1, 1, 8).reshape(4, 2)))),
    "matmul_rhs": lambda a, b: tc.sum(tc.silu(tc.matmul(np.arange(6.0).reshape(2, 3) / 5, b))),
}


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), op=st.sampled_from(sorted(OPS)))
def test_every_op_grad_checks(seed, op):
    rng = np.random.default_rng(seed)
    a = leaf(rng.standard_normal((3, 4)))
    b = leaf(rng.standard_normal((3, 4)))
    f = OPS[op]
    assert tc.grad_check(lambda: f(a, b), [a, b]) < 1e-4


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_bias_broadcast_and_matmul_grad(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((5, 3))
    w, b = leaf(rng.standard_normal((3, 4))), leaf(rng.standard_normal(4))
    f = lambda: tc.sum(tc.silu(tc.add(tc.matmul(x, w), b)))  # noqa: E731
    assert tc.grad_check(f, [w, b]) < 1e-4


def test_backward_visits_shared_node_once():
    x = leaf([2.0])
    y = tc.square(x)
    z = tc.add(y, y)  # d/dx (2 x^2) = 4x
    tc.sum(z).backward()
    assert x.grad[0] == pytest.approx(8.0)


def test_backward_needs_scalar():
    x = leaf([1.0, 2.0])
    with pytest.raises(ValueError):
        tc.square(x).backward()


def test_retained_intermediate_grad():
    x = leaf(np.ones((2, 2)))
    y = tc.scale(x, 3.0)
    loss = tc.sum(tc.square(y))
    loss.backward(retain=[y])
    np.testing.assert_allclose(y.grad, 2 * 3.0 * np.ones((2, 2)))


def test_weighted_mse_zero_weight_gives_exact_zero_grad():
    rng = np.random.default_rng(1)
    p = leaf(rng.standard_normal((4, 2)))
    w = np.array([[1.0], [0.0], [1.0], [0.0]])
    loss = tc.mse(p, rng.standard_normal((4, 2)), weight=w)
    loss.backward()
    assert np.all(p.grad[[1, 3]] == 0.0)
    assert np.all(p.grad[[0, 2]] != 0.0)


def test_non_finite_is_an_error():
    with np.errstate(over="ignore"), pytest.raises(tc.NonFiniteError):
        tc.scale(tc.Tensor([1e308]), 1e10)


def test_no_grad_records_nothing():
    x = leaf([1.0])
    with tc.no_grad():
        y = tc.square(x)
    assert not y.requires_grad


def test_rng_same_seed_same_stream():
    a = tc.Rng(42).stream("noise").standard_normal(1000)
    b = tc.Rng(42).stream("noise").standard_normal(1000)
    assert a.tobytes() == b.tobytes()


def test_rng_substreams_independent_of_consumption():
    r1, r2 = tc.Rng(5), tc.Rng(5)
    r1.stream("timesteps").integers(0, 10, size=12345)
    np.testing.assert_array_equal(r1.stream("noise").standard_normal(10),
                                  r2.stream("noise").standard_normal(10))
    assert not np.array_equal(tc.Rng(5).stream("noise").random(10), tc.Rng(5).stream("data").random(10))


def test_rng_reseed_one_substream():
    r = tc.Rng(1)
    before = tc.Rng(1).stream("data").random(5)
    r.reseed("noise", 99)
    np.testing.assert_array_equal(r.stream("data").random(5), before)
    np.testing.assert_array_equal(r.stream("noise").random(5), tc.Rng(2).reseed("noise", 99).random(5))


def test_rng_state_roundtrip():
    r = tc.Rng(9)
    r.stream("noise").random(17)
    clone = tc.Rng.from_state(r.get_state())
    np.testing.assert_array_equal(clone.stream("noise").random(8), r.stream("noise").random(8))


def test_gauss_moments():
    x = tc.gauss(tc.Rng(0).stream("noise"), (1_000_000,)).data
    assert abs(x.mean()) < 0.01
    assert abs(x.std() - 1.0) < 0.01
