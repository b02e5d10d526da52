import math
import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from aapl_lab import tensor as T
from aapl_lab.errors import ContractError, DegenerateInputError, DimensionError, NumericError

finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)


def vec(n):
    return arrays(np.float64, n, elements=finite)


def test_matmul_identity_and_hand_case():
    a = np.arange(9.0).reshape(3, 3)
    assert np.array_equal(T.matmul(T.Tensor(np.eye(3)), T.Tensor(a)).data, a)
    out = T.matmul(T.Tensor([[1.0, 2.0], [3.0, 4.0]]), T.Tensor([[0.0], [1.0]]))
    assert np.array_equal(out.data, [[2.0], [4.0]])


def test_matmul_gradient_matches_fd(rng):
    a = T.Tensor(rng.normal(size=(4, 5)))
    b = T.Tensor(rng.normal(size=(5, 3)))
    assert T.grad_check_many(lambda x, y: T.tsum(T.matmul(x, y)), [a, b], 1e-5) < 1e-6


def test_matmul_shape_mismatch():
    with pytest.raises(DimensionError):
        T.matmul(T.Tensor(np.ones((2, 3))), T.Tensor(np.ones((2, 3))))


def test_elementwise_examples(rng):
    assert np.array_equal(T.relu(T.Tensor([-1.0, 0.0, 2.0])).data, [0.0, 0.0, 2.0])
    x = T.Tensor(rng.normal(size=5))
    assert np.array_equal(T.sub(x, x).data, np.zeros(5))
    assert np.array_equal(T.elementwise("scale", x, 2.0).data, 2.0 * x.data)
    with pytest.raises(ContractError):
        T.elementwise("pow", x)


def test_add_gradient_is_ones(rng):
    a = T.Tensor(rng.normal(size=4), requires_grad=True)
    b = T.Tensor(rng.normal(size=4), requires_grad=True)
    with T.GradientTape():
        y = T.tsum(T.add(a, b))
    g = T.backward(y)
    assert np.array_equal(g[a].data, np.ones(4)) and np.array_equal(g[b].data, np.ones(4))
    assert T.grad_check_many(lambda x, y: T.tsum(T.add(x, y)), [a, b]) < 1e-6


def test_relu_subgradient_at_zero_is_zero():
    x = T.Tensor([0.0, 1.0], requires_grad=True)
    with T.GradientTape():
        y = T.tsum(T.relu(x))
    assert np.array_equal(T.backward(y)[x].data, [0.0, 1.0])


def test_cosine_similarity_examples():
    u = T.Tensor([0.3, -2.0, 5.0])
    assert math.isclose(T.cosine_similarity(u, u).item(), 1.0, abs_tol=1e-15)
    assert T.cosine_similarity(T.Tensor([1.0, 0.0]), T.Tensor([0.0, 1.0])).item() == 0.0
    assert math.isclose(
        T.cosine_similarity(T.Tensor([1.0, 1.0]), T.Tensor([1.0, 0.0])).item(), 0.7071067811865475, abs_tol=1e-16
    )
    with pytest.raises(DegenerateInputError):
        T.cosine_similarity(T.Tensor([0.0, 0.0]), T.Tensor([1.0, 0.0]))


def test_euclidean_distance_examples(rng):
    u = T.Tensor(rng.normal(size=3))
    assert T.euclidean_distance(u, u).item() == 0.0
    assert T.euclidean_distance(T.Tensor([0.0, 0.0]), T.Tensor([3.0, 4.0])).item() == 5.0
    with pytest.raises(DimensionError):
        T.euclidean_distance(T.Tensor([1.0]), T.Tensor([1.0, 2.0]))
    v = T.Tensor(rng.normal(size=3))
    assert T.grad_check_many(T.euclidean_distance, [u, v], 1e-5) < 1e-6


def test_euclidean_gradient_at_coincident_points_is_zero():
    u = T.Tensor([1.0, 2.0], requires_grad=True)
    v = T.Tensor([1.0, 2.0], requires_grad=True)
    with T.GradientTape():
        d = T.euclidean_distance(u, v)
    g = T.backward(d)
    assert np.array_equal(g[u].data, [0.0, 0.0]) and np.array_equal(g[v].data, [0.0, 0.0])


def test_softmax_cross_entropy_examples(rng):
    assert math.isclose(T.softmax_cross_entropy(T.Tensor(np.zeros(4)), 2).item(), math.log(4), abs_tol=1e-12)
    assert T.softmax_cross_entropy(T.Tensor([200.0, 0.0, -5.0]), 0).item() < 1e-12
    with pytest.raises(IndexError):
        T.softmax_cross_entropy(T.Tensor(np.zeros(3)), 3)

    z = rng.normal(size=5)
    x = T.Tensor(z, requires_grad=True)
    with T.GradientTape():
        loss = T.softmax_cross_entropy(x, 1)
    expected = T.softmax(z) - np.eye(5)[1]
    assert np.allclose(T.backward(loss)[x].data, expected, atol=1e-15)
    assert T.grad_check(lambda t: T.softmax_cross_entropy(t, 1), T.Tensor(z), 1e-5) < 1e-6


def test_backward_examples(rng):
    x = T.Tensor(rng.normal(size=6), requires_grad=True)
    with T.GradientTape():
        y = T.tsum(x)
    assert np.array_equal(T.backward(y)[x].data, np.ones(6))

    with T.GradientTape():
        sq = T.tsum(T.matmul(x, T.reshape(x, (6, 1))))
    assert np.allclose(T.backward(sq)[x].data, 2 * x.data, rtol=0, atol=1e-14)


def test_backward_rejects_non_scalar():
    x = T.Tensor(np.ones(3), requires_grad=True)
    with T.GradientTape():
        y = T.scale(x, 2.0)
    with pytest.raises(ContractError):
        T.backward(y)


def test_backward_only_reaches_requires_grad_tensors(rng):
    w = T.Tensor(rng.normal(size=3), requires_grad=True)
    c = T.Tensor(rng.normal(size=3))
    with T.GradientTape():
        y = T.tsum(T.add(w, c))
    g = T.backward(y)
    assert w in g and c not in g


def test_grad_check_examples(rng):
    p = T.Tensor(rng.normal(size=(3, 4)))
    # exact slope, so the only error is rounding in (f(x+e) - f(x-e)) / 2e, ~ ulp(f) / eps
    assert T.grad_check(T.tsum, p) < 1e-9
    v = T.Tensor(rng.normal(size=6))
    assert T.grad_check(lambda u: T.cosine_similarity(u, v), T.Tensor(rng.normal(size=6))) < 1e-6


def test_grad_check_errors():
    with pytest.raises(ContractError):
        T.grad_check(T.tsum, T.Tensor([1.0]), eps=0.1)
    with np.errstate(over="ignore"), pytest.raises(NumericError):
        T.grad_check(lambda x: T.tsum(T.scale(x, 1e308)), T.Tensor([10.0, 10.0]))


def test_non_finite_tensor_rejected():
    with pytest.raises(NumericError):
        T.Tensor([1.0, np.nan])


def test_tapes_are_thread_confined(rng):
    data = [rng.normal(size=5) for _ in range(8)]
    results = [None] * len(data)

    def work(i):
        x = T.Tensor(data[i], requires_grad=True)
        for _ in range(50):
            with T.GradientTape():
                y = T.tsum(T.scale(x, float(i + 1)))
            results[i] = T.backward(y)[x].data

    threads = [threading.Thread(target=work, args=(i,)) for i in range(len(data))]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    for i, g in enumerate(results):
        assert np.array_equal(g, np.full(5, float(i + 1)))


def test_kink_margin_reports_closest_relu_input():
    assert T.kink_margin(lambda x: T.tsum(T.relu(x)), [T.Tensor([0.5, -0.01, 3.0])]) == pytest.approx(0.01)
    assert T.kink_margin(T.tsum, [T.Tensor([0.0])]) == math.inf


# --- properties -------------------------------------------------------------------------


@given(vec(6), vec(6))
def test_cosine_is_bounded(u, v):
    if np.linalg.norm(u) < 1e-6 or np.linalg.norm(v) < 1e-6:
        return
    s = T.cosine_similarity(T.Tensor(u), T.Tensor(v)).item()
    assert -1 - 1e-12 <= s <= 1 + 1e-12


@given(vec(5), st.integers(0, 4), st.floats(-50, 50))
def test_cross_entropy_shift_invariance(z, label, c):
    a = T.softmax_cross_entropy(T.Tensor(z), label).item()
    b = T.softmax_cross_entropy(T.Tensor(z + c), label).item()
    assert abs(a - b) < 1e-9


@given(vec(4), vec(4))
def test_backward_is_linear(x0, w0):
    def grads(f):
        x = T.Tensor(x0, requires_grad=True)
        with T.GradientTape():
            y = f(x)
        return T.backward(y)[x].data

    w = T.Tensor(w0)
    f1 = lambda x: T.tsum(T.relu(x))  # noqa: E731
    f2 = lambda x: T.tsum(T.matmul(x, T.reshape(w, (4, 1))))  # noqa: E731
    both = grads(lambda x: T.add(f1(x), f2(x)))
    assert np.allclose(both, grads(f1) + grads(f2), rtol=0, atol=1e-12)


OPS = {
    "matmul": (lambda a, b: T.matmul(a, b), [(3,), (3, 2)]),
    "sub": (T.sub, [(4,), (4,)]),
    "scale": (lambda a: T.scale(a, 0.3), [(4,)]),
    "l2_normalize": (T.l2_normalize, [(5,)]),
    "cosine": (T.cosine_similarity, [(5,), (5,)]),
    "distance": (T.euclidean_distance, [(5,), (5,)]),
    "cross_entropy": (lambda z: T.softmax_cross_entropy(z, 0), [(4,)]),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_ops_pass_gradcheck_at_eps_1e5(name):
    fn, shapes = OPS[name]
    rng = np.random.default_rng(sum(name.encode()))
    for _ in range(10):
        pts = [T.Tensor(rng.normal(size=s)) for s in shapes]
        probe = T.Tensor(rng.normal(size=fn(*pts).size))

        def f(*xs):
            return T.tsum(T.matmul(T.reshape(fn(*xs), (probe.size,)), T.reshape(probe, (probe.size, 1))))

        assert T.grad_check_many(f, pts, 1e-5) < 1e-4


@settings(max_examples=25)
@given(vec(3), vec(3))
def test_relu_gradcheck_away_from_kink(x, y):
    z = x + y
    if np.min(np.abs(z)) < 1e-3:
        return
    assert T.grad_check(lambda t: T.tsum(T.relu(t)), T.Tensor(z), 1e-5) < 1e-4
