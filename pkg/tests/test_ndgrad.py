import math
import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from trajcast import ndgrad as nd
from trajcast.errors import ContractError, DimensionError, TrainingError

TOL = 1e-4


def _p(rng, *shape, lo=-1.0, hi=1.0):
    return nd.parameter(rng.uniform(lo, hi, size=shape))


def _check(fn, *inputs, tol=TOL):
    errs = nd.gradcheck(fn, inputs)
    assert errs, "no differentiable inputs"
    assert max(errs.values()) < tol, errs


# -- one finite-difference check per op -------------------------------------

OPS = {
    "add": (lambda a, b: nd.add(a, b), [(3, 4), (3, 4)]),
    "sub": (lambda a, b: nd.sub(a, b), [(3, 4), (3, 4)]),
    "mul": (lambda a, b: nd.mul(a, b), [(3, 4), (3, 4)]),
    "scale": (lambda a: nd.scale(a, -2.5), [(2, 5)]),
    "shift": (lambda a: nd.shift(a, 0.7), [(2, 5)]),
    "square": (lambda a: nd.square(a), [(4, 3)]),
    "exp": (lambda a: nd.exp(a), [(4, 3)]),
    "sigmoid": (lambda a: nd.sigmoid(a), [(4, 3)]),
    "tanh": (lambda a: nd.tanh(a), [(4, 3)]),
    "matmul": (lambda a, b: nd.matmul(a, b), [(3, 4), (4, 2)]),
    "bias_add": (lambda a, b: nd.bias_add(a, b), [(3, 4), (4,)]),
    "linear": (lambda x, w, b: nd.linear(x, w, b), [(3, 4), (4, 5), (5,)]),
    "mul_col": (lambda x, a: nd.mul_col(x, a), [(3, 4), (3, 1)]),
    "sum": (lambda a: nd.sum(a), [(3, 4)]),
    "mean": (lambda a: nd.mean(a), [(3, 4)]),
    "sum_cols": (lambda a: nd.sum_cols(a), [(3, 4)]),
    "reshape": (lambda a: nd.reshape(a, (6, 2)), [(3, 4)]),
    "concat": (lambda a, b: nd.concat([a, b], axis=1), [(3, 2), (3, 4)]),
    "slice_cols": (lambda a: nd.slice_cols(a, 1, 3), [(3, 4)]),
    "take_rows": (lambda a: nd.take_rows(a, np.array([2, 0, 2, 1])), [(3, 4)]),
    "softmax": (lambda a: nd.softmax(a), [(3, 5)]),
    "operators": (lambda a, b: (a + b) * (a - b) - -a, [(3, 4), (3, 4)]),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_gradcheck_elementwise_and_structural(name):
    fn, shapes = OPS[name]
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    _check(fn, *[_p(rng, *s) for s in shapes])


def test_gradcheck_div_and_log():
    rng = np.random.default_rng(1)
    a = _p(rng, 3, 4)
    b = _p(rng, 3, 4, lo=0.5, hi=2.0)
    _check(nd.div, a, b)
    _check(nd.log, _p(rng, 3, 4, lo=0.3, hi=3.0))


def test_gradcheck_relu_and_clip_away_from_kinks():
    rng = np.random.default_rng(2)
    x = rng.uniform(0.1, 1.0, size=(4, 5)) * rng.choice([-1.0, 1.0], size=(4, 5))
    _check(nd.relu, nd.parameter(x))
    y = rng.choice([-0.9, -0.4, 0.3, 0.8], size=(4, 5)) + rng.uniform(-0.05, 0.05, size=(4, 5))
    _check(lambda t: nd.clip(t, -0.6, 0.6), nd.parameter(y))


def test_gradcheck_embedding():
    rng = np.random.default_rng(3)
    table = _p(rng, 5, 3)
    _check(lambda t: nd.embedding(t, np.array([4, 0, 4, 2])), table)


@pytest.mark.parametrize("stride", [1, 2])
def test_gradcheck_conv2d(stride):
    rng = np.random.default_rng(4 + stride)
    x, w, b = _p(rng, 2, 3, 7, 7), _p(rng, 4, 3, 3, 3), _p(rng, 4)
    _check(lambda x, w, b: nd.conv2d(x, w, b, stride=stride), x, w, b)


def test_gradcheck_maxpool_with_distinct_values():
    rng = np.random.default_rng(6)
    x = rng.permutation(2 * 3 * 6 * 6).reshape(2, 3, 6, 6) / 50.0
    _check(lambda t: nd.maxpool2d(t, 2), nd.parameter(x))


def test_gradcheck_local_response_norm():
    rng = np.random.default_rng(7)
    # large activations so the normaliser is far from its constant
    x = _p(rng, 2, 7, 3, 3, lo=-30.0, hi=30.0)
    _check(lambda t: nd.local_response_norm(t), x)


def test_gradcheck_deep_composition():
    rng = np.random.default_rng(8)
    x, w1, b1, w2 = _p(rng, 5, 4), _p(rng, 4, 6), _p(rng, 6), _p(rng, 6, 1)

    def f(x, w1, b1, w2):
        h = nd.tanh(nd.linear(x, w1, b1))
        z = nd.matmul(h, w2)
        return nd.mean(nd.log(nd.shift(nd.sigmoid(z), 1e-3)))

    _check(f, x, w1, b1, w2)


# -- analytic forward values -------------------------------------------------


def test_forward_values_match_numpy():
    a = np.array([[1.0, -2.0], [0.5, 3.0]])
    t = nd.constant(a)
    assert np.array_equal(nd.relu(t).data, np.maximum(a, 0))
    assert np.allclose(nd.sigmoid(t).data, 1 / (1 + np.exp(-a)), rtol=0, atol=1e-15)
    assert np.allclose(nd.softmax(t).data.sum(axis=1), 1.0)
    assert nd.sum(t).item() == pytest.approx(2.5)
    assert nd.sigmoid(nd.constant(np.zeros((1, 1)))).item() == 0.5


def test_conv2d_matches_direct_loop():
    rng = np.random.default_rng(9)
    x = rng.normal(size=(1, 2, 5, 5))
    w = rng.normal(size=(3, 2, 3, 3))
    out = nd.conv2d(nd.constant(x), nd.constant(w)).data
    ref = np.zeros((1, 3, 3, 3))
    for o in range(3):
        for i in range(3):
            for j in range(3):
                ref[0, o, i, j] = np.sum(x[0, :, i : i + 3, j : j + 3] * w[o])
    assert np.allclose(out, ref, atol=1e-12)


def test_local_response_norm_matches_loop():
    rng = np.random.default_rng(10)
    x = rng.normal(scale=20.0, size=(1, 6, 2, 2))
    out = nd.local_response_norm(nd.constant(x)).data
    ref = np.empty_like(x)
    for c in range(6):
        lo, hi = max(0, c - 2), min(6, c + 3)
        s = (x[0, lo:hi] ** 2).sum(axis=0)
        ref[0, c] = x[0, c] / (2.0 + 1e-4 * s) ** 0.75
    assert np.allclose(out, ref, rtol=1e-12)


def test_maxpool_routes_gradient_to_argmax():
    x = nd.parameter(np.array([[[[1.0, 4.0], [2.0, 3.0]]]]))
    g = nd.backward(nd.sum(nd.maxpool2d(x, 2)))
    assert np.array_equal(g[x], np.array([[[[0.0, 1.0], [0.0, 0.0]]]]))


# -- contracts ---------------------------------------------------------------


def test_no_implicit_broadcasting():
    with pytest.raises(DimensionError):
        nd.add(nd.constant(np.ones((2, 3))), nd.constant(np.ones((1, 3))))
    with pytest.raises(DimensionError):
        nd.matmul(nd.constant(np.ones((2, 3))), nd.constant(np.ones((2, 3))))
    with pytest.raises(DimensionError):
        nd.bias_add(nd.constant(np.ones((2, 3))), nd.constant(np.ones(2)))


def test_backward_requires_scalar():
    with pytest.raises(ContractError):
        nd.backward(nd.parameter(np.ones((2, 2))))


def test_graph_is_topological():
    a = nd.parameter(np.ones((2, 2)))
    b = nd.tanh(a)
    c = nd.sum(nd.mul(b, b))
    nodes = nd.Graph.trace(c).nodes
    pos = {id(n): i for i, n in enumerate(nodes)}
    assert pos[id(a)] < pos[id(b)] < pos[id(c)]


def test_gradient_accumulates_over_reuse():
    a = nd.parameter(np.array([[3.0]]))
    g = nd.backward(nd.sum(nd.add(nd.mul(a, a), a)))
    assert g[a][0, 0] == pytest.approx(7.0)


def test_constants_get_no_gradient():
    a = nd.parameter(np.ones((1, 2)))
    c = nd.constant(np.ones((1, 2)))
    g = nd.backward(nd.sum(nd.mul(a, c)))
    assert c not in g


# -- optimisers --------------------------------------------------------------


def test_sgd_step_is_plain_descent():
    w = nd.parameter(np.array([1.0, -2.0]))
    g = nd.backward(nd.sum(nd.square(w)))
    nd.SGD(0.1).step({"w": w}, g)
    assert np.allclose(w.data, [0.8, -1.6])


def test_rmsprop_first_step_matches_formula():
    w = nd.parameter(np.array([1.0, -2.0]))
    g = nd.backward(nd.sum(nd.square(w)))
    grad = np.array([2.0, -4.0])
    nd.RMSProp(0.01).step({"w": w}, g)
    cache = 0.1 * grad**2
    assert np.allclose(w.data, np.array([1.0, -2.0]) - 0.01 * grad / np.sqrt(cache + 1e-8))


def test_rmsprop_minimises_quadratic():
    w = nd.parameter(np.array([3.0, -1.0]))
    opt = nd.RMSProp(0.05)
    for _ in range(400):
        opt.step({"w": w}, nd.backward(nd.sum(nd.square(w))))
    assert np.abs(w.data).max() < 0.1


def test_nan_gradient_names_parameter():
    w = nd.parameter(np.array([1.0]))
    g = nd.backward(nd.sum(nd.mul(w, nd.constant(np.array([np.nan])))))
    with pytest.raises(TrainingError, match="w"):
        nd.SGD(0.1).step({"w": w}, g)


# -- properties --------------------------------------------------------------


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(0, 2**31 - 1))
def test_softmax_rows_are_distributions(n, m, seed):
    x = np.random.default_rng(seed).normal(scale=10, size=(n, m))
    p = nd.softmax(nd.constant(x)).data
    assert np.all(p >= 0) and np.allclose(p.sum(axis=1), 1.0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_sigmoid_is_stable_for_large_inputs(seed):
    x = np.random.default_rng(seed).uniform(-800, 800, size=(3, 3))
    s = nd.sigmoid(nd.constant(x)).data
    assert np.all(np.isfinite(s)) and np.all((s >= 0) & (s <= 1))


def test_relative_error_is_scale_free():
    a = np.array([1.0, 2.0])
    assert nd.relative_error(a, a) == 0.0
    assert nd.relative_error(1e6 * a, 1e6 * a * (1 + 1e-7)) < 1e-7
    assert math.isclose(nd.relative_error(np.array([1.0]), np.array([-1.0])), 1.0)
