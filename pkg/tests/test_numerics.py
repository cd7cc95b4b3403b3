"""Autodiff engine: op examples, gradient checks, tape rules."""
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mpformer import numerics as nx
from mpformer.numerics import Tensor


def t(x, grad=True):
    return Tensor(np.asarray(x, dtype=np.float64), requires_grad=grad)


# -- matmul ---------------------------------------------------------------------------

def test_matmul_identity():
    eye = np.eye(2)
    np.testing.assert_array_equal(nx.matmul(t(eye), t(eye)).data, eye)


def test_matmul_hand_example():
    out = nx.matmul(t([[1, 2], [3, 4]]), t([[1], [1]]))
    np.testing.assert_array_equal(out.data, [[3], [7]])


def test_matmul_zero_annihilates():
    a = np.random.default_rng(0).normal(size=(3, 4))
    assert not nx.matmul(t(a), t(np.zeros((4, 2)))).data.any()


def test_matmul_shape_mismatch():
    with pytest.raises(ValueError):
        nx.matmul(t(np.ones((2, 3))), t(np.ones((2, 3))))


def test_matmul_gradient_rule():
    rng = np.random.default_rng(1)
    a, b = t(rng.normal(size=(3, 4))), t(rng.normal(size=(4, 2)))
    g = rng.normal(size=(3, 2))
    nx.backward(nx.tsum(nx.mul(nx.matmul(a, b), g)))
    np.testing.assert_allclose(a.grad, g @ b.data.T, rtol=1e-14)
    np.testing.assert_allclose(b.grad, a.data.T @ g, rtol=1e-14)


# -- rmsnorm ---------------------------------------------------------------------------

def test_rmsnorm_constant_vector():
    out = nx.rmsnorm(t([2.0, 2.0, 2.0]), t(np.ones(3)), eps=1e-12)
    np.testing.assert_allclose(out.data, [1, 1, 1], atol=1e-8)


def test_rmsnorm_closed_form():
    out = nx.rmsnorm(t([3.0, 4.0]), t(np.ones(2)), eps=1e-12)
    np.testing.assert_allclose(out.data, np.array([3.0, 4.0]) / math.sqrt(12.5), atol=1e-10)


def test_rmsnorm_zero_input():
    assert not nx.rmsnorm(t(np.zeros(4)), t(np.ones(4)), eps=1e-6).data.any()


def test_rmsnorm_constant_equals_gain():
    gain = np.array([0.5, -1.5, 2.0, 3.25])
    out = nx.rmsnorm(t(np.full(4, 7.0)), t(gain), eps=1e-12)
    np.testing.assert_allclose(out.data, gain, atol=1e-8)


def test_rmsnorm_rejects_bad_eps():
    with pytest.raises(ValueError):
        nx.rmsnorm(t([1.0]), t([1.0]), eps=0.0)


# -- softmax ---------------------------------------------------------------------------------

def test_softmax_symmetric():
    np.testing.assert_array_equal(nx.softmax(t([0.0, 0.0])).data, [0.5, 0.5])


def test_softmax_closed_form():
    e = math.e
    np.testing.assert_allclose(nx.softmax(t([1.0, 0.0])).data, [e / (e + 1), 1 / (e + 1)], rtol=1e-15)


@pytest.mark.parametrize("tau", [0.0, -1.0])
def test_softmax_rejects_temperature(tau):
    with pytest.raises(ValueError):
        nx.softmax(t([1.0, 2.0]), temperature=tau)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 8)),
              elements=st.floats(-50, 50)),
       st.floats(-100, 100))
def test_softmax_sums_to_one_and_shift_invariant(x, c):
    p = nx.softmax(t(x)).data
    np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-12)
    assert (p >= 0).all()
    np.testing.assert_allclose(nx.softmax(t(x + c)).data, p, atol=1e-12)


def test_masked_softmax_zeroes_masked_entries():
    mask = np.array([[True, False, True]])
    p = nx.softmax(t([[1.0, 5.0, 2.0]]), mask=mask).data
    assert p[0, 1] == 0.0
    np.testing.assert_allclose(p.sum(), 1.0, atol=1e-15)


# -- gelu -------------------------------------------------------------------------------------

def test_gelu_examples():
    phi1 = 0.5 * (1 + math.erf(1 / math.sqrt(2)))
    out = nx.gelu(t([0.0, 1.0, 40.0, -40.0])).data
    assert out[0] == 0.0
    assert out[1] == pytest.approx(phi1, abs=1e-15)
    assert out[2] == pytest.approx(40.0, abs=1e-12)
    assert abs(out[3]) < 1e-12


# -- backward ---------------------------------------------------------------------------------

def test_backward_sum_gives_ones():
    x = t(np.arange(5.0))
    nx.backward(nx.tsum(x))
    np.testing.assert_array_equal(x.grad, np.ones(5))


def test_backward_quadratic():
    x = t([1.0, -2.0, 3.0])
    nx.backward(nx.tsum(nx.mul(x, x)))
    np.testing.assert_array_equal(x.grad, 2 * x.data)


def test_backward_rejects_non_scalar():
    with pytest.raises(ValueError):
        nx.backward(nx.mul(t([1.0, 2.0]), 2.0))


def test_backward_twice_rejected():
    x = t([1.0, 2.0])
    loss = nx.tsum(nx.square(x))
    nx.backward(loss)
    with pytest.raises(RuntimeError):
        nx.backward(loss)


def test_shared_leaf_accumulates():
    # a leaf used by two branches receives the sum of both gradients
    x = t([1.0, 2.0])
    nx.backward(nx.add(nx.tsum(nx.mul(x, 3.0)), nx.tsum(nx.square(x))))
    np.testing.assert_allclose(x.grad, 3.0 + 2 * x.data)


def test_diamond_graph_visits_each_node_once():
    x = t([0.5])
    y = nx.exp(x)
    loss = nx.tsum(nx.mul(y, y))  # y feeds both operands
    nx.backward(loss)
    np.testing.assert_allclose(x.grad, 2 * np.exp(2 * 0.5), rtol=1e-14)


def test_no_grad_builds_no_tape():
    x = t([1.0, 2.0])
    with nx.no_grad():
        y = nx.mul(x, 2.0)
    assert not y.requires_grad


# -- finite differences over every op ------------------------------------------------------

rng = np.random.default_rng(123)
_A = rng.normal(size=(3, 4))
_B = rng.normal(size=(4, 5))
_P = rng.uniform(0.5, 2.0, size=(3, 4))
_G = rng.normal(size=4)
_IDX = np.array([2, 0, 2, 1])

OPS = {
    "add": lambda a: nx.add(a, _A[0]),
    "sub": lambda a: nx.sub(_A, a),
    "mul": lambda a: nx.mul(a, a),
    "div": lambda a: nx.div(_A, nx.add(nx.square(a), 1.0)),
    "exp": lambda a: nx.exp(a),
    "log": lambda a: nx.log(nx.add(nx.square(a), 0.5)),
    "square": lambda a: nx.square(a),
    "gelu": lambda a: nx.gelu(a),
    "tmean": lambda a: nx.tmean(a, axis=0),
    "reshape": lambda a: nx.mul(nx.reshape(a, (4, 3)), _A.reshape(4, 3)),
    "transpose": lambda a: nx.mul(nx.transpose(a, (1, 0)), _A.T),
    "getitem": lambda a: a[1:, ::2],
    "concat": lambda a: nx.concat([a, nx.square(a)], axis=0),
    "stack": lambda a: nx.stack([a, nx.exp(a)], axis=1),
    "embedding": lambda a: nx.embedding(a, _IDX),
    "matmul": lambda a: nx.matmul(a, _B),
    "linear": lambda a: nx.linear(a, Tensor(_B), Tensor(_B[0])),
    "rmsnorm": lambda a: nx.rmsnorm(a, Tensor(_G), 1e-6),
    "softmax": lambda a: nx.softmax(a, temperature=0.7),
    "masked_softmax": lambda a: nx.softmax(a, mask=np.array([True, False, True, True])),
    "log_softmax": lambda a: nx.log_softmax(a, temperature=0.3),
    "l2_normalize": lambda a: nx.l2_normalize(a),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradient_matches_central_differences(name):
    x = Tensor(_P.copy(), requires_grad=True, name="x")
    w = np.random.default_rng(len(name)).normal(size=OPS[name](Tensor(_P)).shape)
    res = nx.grad_check(lambda: nx.tsum(nx.mul(OPS[name](x), w)), {"x": x}, h=1e-5, tol=1e-6)
    assert res.passed, res.worst()


def test_grad_check_linear_form_is_exact():
    x = t(rng.normal(size=6))
    c = rng.normal(size=6)
    res = nx.grad_check(lambda: nx.tsum(nx.mul(x, c)), {"x": x})
    assert res.max_rel_error <= 1e-10


def test_grad_check_catches_corrupted_rule():
    def bad_square(x):
        return Tensor.from_op(x.data ** 2, (x,), lambda g: x._accumulate(3.0 * g * x.data))

    x = t([0.3, -1.2, 2.0])
    res = nx.grad_check(lambda: nx.tsum(bad_square(x)), {"x": x})
    assert not res.passed
    assert res.max_rel_error > 0.1


def test_grad_check_validates_step_and_precision():
    x = t([1.0])
    with pytest.raises(ValueError):
        nx.grad_check(lambda: nx.tsum(x), {"x": x}, h=1e-3)
    x32 = Tensor(np.ones(2, dtype=np.float32), requires_grad=True)
    with pytest.raises(ValueError):
        nx.grad_check(lambda: nx.tsum(x32), {"x": x32})


def test_backward_is_bitwise_deterministic():
    from mpformer.objectives import total_loss
    from mpformer.train import grad_check_setup

    grads = []
    for _ in range(2):
        params, cfg, batch = grad_check_setup(seed=3)
        params.zero_grad()
        nx.backward(total_loss(params, cfg, batch).training_loss())
        grads.append({n: p.grad.copy() for n, p in params.items() if p.grad is not None})
    assert grads[0].keys() == grads[1].keys()
    for n in grads[0]:
        assert np.array_equal(grads[0][n], grads[1][n]), n
