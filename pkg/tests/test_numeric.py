import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate

from marank.numeric import (
    MlpParams,
    ShapeError,
    finite_diff_gradient,
    gaussian_cdf,
    init_mlp,
    make_rng,
    mc_dropout_stats,
    mlp_forward,
    mlp_gradient,
    sub_seed,
)


def rel_err(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b) / np.maximum(1e-8, np.maximum(np.abs(a), np.abs(b)))))


def hand_forward(params, x):
    # straight-line reimplementation used as an independent oracle
    h = list(x)
    for l, (w, b) in enumerate(zip(params.weights, params.biases)):
        out = []
        for row, bias in zip(w, b):
            acc = bias
            for wi, hi in zip(row, h):
                acc += wi * hi
            out.append(acc)
        h = [max(v, 0.0) for v in out] if l < len(params.weights) - 1 else out
    return np.array(h)


def test_zero_network_outputs_zero():
    p = init_mlp([4, 3, 2], make_rng(0)).with_flat(np.zeros(4 * 3 + 3 + 3 * 2 + 2))
    assert np.all(mlp_forward(p, np.array([1.0, -2.0, 3.0, 0.5])) == 0.0)


def test_identity_layer():
    p = MlpParams([np.eye(3)], [np.zeros(3)])
    v = np.array([0.3, -1.2, 4.0])
    np.testing.assert_array_equal(mlp_forward(p, v), v)


def test_forward_matches_hand_rolled_oracle():
    rng = make_rng(11)
    p = init_mlp([2, 3, 1], rng)
    p = p.with_flat(rng.normal(size=p.n_params))
    for _ in range(10):
        x = rng.normal(size=2)
        np.testing.assert_allclose(mlp_forward(p, x), hand_forward(p, x), atol=1e-12)


def test_batched_forward_matches_rows():
    rng = make_rng(3)
    p = init_mlp([5, 4, 2], rng)
    x = rng.normal(size=(7, 5))
    np.testing.assert_allclose(mlp_forward(p, x), np.stack([mlp_forward(p, r) for r in x]))


def test_dimension_mismatch_names_layer():
    p = init_mlp([3, 2, 1], make_rng(0))
    with pytest.raises(ShapeError, match="layer 0"):
        mlp_forward(p, np.ones(4))
    with pytest.raises(ShapeError, match="layer 2"):
        MlpParams([np.ones((2, 3)), np.ones((1, 2)), np.ones((1, 3))], [np.ones(2), np.ones(1), np.ones(1)])


def test_linear_gradient():
    p = MlpParams([np.array([[0.5, -1.0, 2.0]])], [np.array([0.1])])
    x = np.array([1.0, 2.0, 3.0])
    g, gx = mlp_gradient(p, x, np.array([1.0]))
    np.testing.assert_array_equal(g.weights[0], [x])
    np.testing.assert_array_equal(g.biases[0], [1.0])
    np.testing.assert_array_equal(gx, p.weights[0][0])


def test_relu_subgradient_at_zero_is_zero():
    # hidden pre-activation is exactly 0 -> no gradient flows into the first layer
    p = MlpParams([np.array([[1.0, -1.0]]), np.array([[2.0]])], [np.array([0.0]), np.array([0.0])])
    g, gx = mlp_gradient(p, np.array([1.0, 1.0]), np.array([1.0]))
    assert np.all(g.weights[0] == 0.0) and np.all(gx == 0.0)


def test_finite_diff_quadratic_and_constant():
    p = init_mlp([3, 2, 1], make_rng(5))
    g = finite_diff_gradient(lambda q: 0.5 * float(q.flat() @ q.flat()), p)
    np.testing.assert_allclose(g.flat(), p.flat(), atol=1e-8)
    assert np.all(finite_diff_gradient(lambda q: 3.0, p).flat() == 0.0)


@pytest.mark.parametrize("seed", range(100))
def test_gradient_matches_finite_differences(seed):
    rng = make_rng(seed)
    depth = 1 + seed % 3
    sizes = [int(rng.integers(1, 5)) for _ in range(depth + 1)]
    p = init_mlp(sizes, rng)
    p = p.with_flat(rng.normal(size=p.n_params))
    x = rng.normal(size=sizes[0])
    up = rng.normal(size=sizes[-1])
    g, gx = mlp_gradient(p, x, up)
    fd = finite_diff_gradient(lambda q: float(up @ mlp_forward(q, x)), p, h=1e-5)
    assert rel_err(g.flat(), fd.flat()) < 1e-4
    # input gradient via finite differences too
    fdx = np.array([(up @ mlp_forward(p, x + e * 1e-5) - up @ mlp_forward(p, x - e * 1e-5)) / 2e-5
                    for e in np.eye(sizes[0])])
    assert rel_err(gx, fdx) < 1e-4


def test_gradient_with_dropout_masks():
    rng = make_rng(9)
    p = init_mlp([3, 4, 4, 1], rng, dropout=0.3)
    # generic weights keep every pre-activation away from the ReLU kink
    p = p.with_flat(rng.normal(size=p.n_params))
    x = rng.normal(size=(5, 3))
    masks = [np.array(rng.random((5, 4)) > 0.3, dtype=float) for _ in range(2)]
    up = rng.normal(size=(5, 1))
    g, _ = mlp_gradient(p, x, up, masks)
    fd = finite_diff_gradient(lambda q: float(np.sum(up * mlp_forward(q, x, masks))), p)
    assert rel_err(g.flat(), fd.flat()) < 1e-4


def test_gaussian_cdf_values():
    assert gaussian_cdf(0.0, 0.0, 1.0) == 0.5
    assert gaussian_cdf(3.7, 3.7, 0.2) == 0.5
    density = lambda t: math.exp(-t * t / 2) / math.sqrt(2 * math.pi)
    oracle = 0.5 + integrate.quad(density, 0.0, 1.96)[0]
    assert abs(gaussian_cdf(1.96, 0.0, 1.0) - oracle) < 1e-10
    assert abs(gaussian_cdf(1.96, 0, 1) - 0.9750) < 1e-4
    with pytest.raises(ValueError):
        gaussian_cdf(0.0, 0.0, 0.0)


@given(st.floats(-50, 50), st.floats(-5, 5), st.floats(0.01, 10))
def test_gaussian_cdf_symmetry(x, mu, sigma):
    assert abs(gaussian_cdf(x, mu, sigma) + gaussian_cdf(2 * mu - x, mu, sigma) - 1.0) < 1e-12


def test_gaussian_cdf_monotone():
    grid = np.linspace(-10, 10, 2001)
    vals = gaussian_cdf(grid, 0.3, 1.7)
    assert np.all(np.diff(vals) >= 0)
    assert np.all((vals >= 0) & (vals <= 1))


def test_rng_streams():
    a = make_rng(42).normal(size=5)
    np.testing.assert_array_equal(a, make_rng(42).normal(size=5))
    assert not np.array_equal(make_rng(42, 0).normal(size=5), make_rng(42, 1).normal(size=5))
    assert sub_seed(1, 2) == sub_seed(1, 2) != sub_seed(1, 3)


def test_mc_dropout_without_dropout_is_deterministic():
    p = init_mlp([3, 5, 2], make_rng(1))
    x = np.array([0.2, -0.4, 1.0])
    mean, var = mc_dropout_stats(p, x, 10, make_rng(2))
    np.testing.assert_array_equal(mean, mlp_forward(p, x))
    assert np.all(var == 0.0)


def test_mc_dropout_zero_network():
    p = init_mlp([3, 5, 1], make_rng(1), dropout=0.5)
    p = p.with_flat(np.zeros(p.n_params))
    mean, var = mc_dropout_stats(p, np.ones(3), 50, make_rng(0))
    assert mean[0] == 0.0 and var[0] == 0.0


def test_mc_dropout_bernoulli_variance():
    # one hidden unit, h = relu(1 * x) = x, y = 1 * mask * h / (1 - p)
    rate, x = 0.3, 2.0
    p = MlpParams([np.array([[1.0]]), np.array([[1.0]])], [np.zeros(1), np.zeros(1)], [rate])
    n = 10000
    mean, var = mc_dropout_stats(p, np.array([x]), n, make_rng(7))
    keep = 1 - rate
    exact_var = x ** 2 * keep * (1 - keep) / keep ** 2
    # standard error of the sample variance of a two-point variable
    m4 = x ** 4 / keep ** 4 * keep * (1 - keep) * ((1 - keep) ** 3 + keep ** 3)
    se = math.sqrt((m4 - exact_var ** 2) / n)
    assert abs(var[0] - exact_var) < 3 * se
    assert abs(mean[0] - x) < 3 * math.sqrt(exact_var / n)


def test_mc_dropout_mean_approaches_forward_as_rate_vanishes():
    base = init_mlp([4, 8, 1], make_rng(3))
    x = make_rng(4).normal(size=4)
    gaps = []
    for rate in (0.4, 0.1, 0.01):
        mean, _ = mc_dropout_stats(base.with_dropout(rate), x, 4000, make_rng(5))
        gaps.append(abs(mean[0] - mlp_forward(base, x)[0]))
    assert gaps[-1] < gaps[0] and gaps[-1] < 0.02


def test_mc_dropout_needs_two_samples():
    with pytest.raises(ValueError):
        mc_dropout_stats(init_mlp([2, 2, 1], make_rng(0), dropout=0.2), np.ones(2), 1, make_rng(0))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31))
def test_determinism(seed):
    rng_a, rng_b = make_rng(seed), make_rng(seed)
    pa, pb = init_mlp([3, 4, 1], rng_a, dropout=0.2), init_mlp([3, 4, 1], rng_b, dropout=0.2)
    x = np.ones(3)
    assert mc_dropout_stats(pa, x, 5, rng_a)[0].tobytes() == mc_dropout_stats(pb, x, 5, rng_b)[0].tobytes()


def test_serialization_round_trip():
    p = init_mlp([3, 4, 2], make_rng(0), dropout=0.25)
    q = MlpParams.from_dict(p.to_dict())
    np.testing.assert_array_equal(p.flat(), q.flat())
    assert q.dropout == p.dropout and q.n_params == 3 * 4 + 4 + 4 * 2 + 2
