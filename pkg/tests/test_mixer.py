import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from omiga.approximator import Layer, Mlp
from omiga.errors import ShapeError
from omiga.mixer import MixerParams, init_mixer, mix_q, mix_v, weights, weights_backward
from omiga.verification import finite_difference, relative_error


def test_zero_networks():
    m = init_mixer(2, 3, 8, np.random.default_rng(0))
    m = MixerParams(m.w_net.zeros_like(), m.b_net.zeros_like(), 2)
    w, b, _ = weights(m, np.ones((2, 3)))
    assert w.tolist() == [0.0, 0.0] and b == 0.0


def test_absolute_value_transform():
    w_net = Mlp([Layer(np.zeros((2, 2)), np.array([-2.0, 3.0]))])
    b_net = Mlp([Layer(np.zeros((1, 2)), np.array([0.5]))])
    w, b, _ = weights(MixerParams(w_net, b_net, 2), np.ones((2, 1)))
    assert w.tolist() == [2.0, 3.0] and b == 0.5


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), scale=st.floats(1e-3, 1e3))
def test_weights_nonnegative_and_finite(seed, scale):
    rng = np.random.default_rng(seed)
    m = init_mixer(3, 4, 8, rng)
    w, b, _ = weights(m, scale * rng.normal(size=(5, 3, 4)))
    assert np.all(w >= 0) and np.all(np.isfinite(w)) and np.all(np.isfinite(b))


def test_shape_mismatch():
    m = init_mixer(2, 3, 8, np.random.default_rng(0))
    with pytest.raises(ShapeError):
        weights(m, np.ones((2, 4)))
    with pytest.raises(ShapeError):
        mix_q([1.0, 1.0], 0.0, [1.0, 2.0, 3.0])


@pytest.mark.parametrize("w,b,values,expected", [
    ((1, 1), 0, (2, 3), 5.0),
    ((0, 0), 7, (123.0, -4.0), 7.0),
    ((0.5, 2), -1, (4, 1), 3.0),
])
def test_mix_q_examples(w, b, values, expected):
    assert mix_q(w, b, values) == expected


@pytest.mark.parametrize("w,b,values,expected", [((1, 1), 0, (1, 1), 2.0), ((2, 0), 0.5, (1.5, 9), 3.5)])
def test_mix_v_examples(w, b, values, expected):
    assert mix_v(w, b, values) == expected


def test_shared_weights_equal_inputs():
    m = init_mixer(2, 3, 8, np.random.default_rng(1))
    w, b, _ = weights(m, np.random.default_rng(2).normal(size=(2, 3)))
    vals = np.array([0.3, -1.2])
    assert mix_q(w, b, vals) == mix_v(w, b, vals)


def test_batched_mixing():
    w = np.array([[1.0, 2.0], [0.0, 1.0]])
    b = np.array([0.5, -1.0])
    np.testing.assert_array_equal(mix_q(w, b, np.array([[1.0, 1.0], [3.0, 4.0]])), [3.5, 3.0])


def test_local_variant_input_dim():
    m = init_mixer(3, 5, 8, np.random.default_rng(0), local=True)
    assert m.w_net.input_dim == 5 and m.b_net.input_dim == 15
    full = init_mixer(3, 5, 8, np.random.default_rng(0))
    assert full.w_net.input_dim == 15


def test_local_weights_depend_only_on_own_observation():
    m = init_mixer(2, 3, 8, np.random.default_rng(3), local=True)
    rng = np.random.default_rng(4)
    obs = rng.normal(size=(2, 3))
    other = obs.copy()
    other[1] = rng.normal(size=3)
    w1, _, _ = weights(m, obs)
    w2, _, _ = weights(m, other)
    assert w1[0] == w2[0] and w1[1] != w2[1]


def test_monotone_in_local_values():
    m = init_mixer(2, 3, 8, np.random.default_rng(5))
    w, b, _ = weights(m, np.random.default_rng(6).normal(size=(2, 3)))
    q = np.array([0.2, 0.4])
    for i in range(2):
        bumped = q.copy()
        bumped[i] += 1e-3
        assert mix_q(w, b, bumped) >= mix_q(w, b, q)
        np.testing.assert_allclose((mix_q(w, b, bumped) - mix_q(w, b, q)) / 1e-3, w[i], rtol=1e-9)


@pytest.mark.parametrize("local", [False, True])
def test_q_tot_parameter_gradients(local):
    rng = np.random.default_rng(7)
    m = init_mixer(2, 3, 6, rng, local=local)
    obs = rng.normal(size=(4, 2, 3))
    q = rng.normal(size=(4, 2))
    w, b, tape = weights(m, obs)
    gw, gb = weights_backward(m, tape, q, np.ones(4))  # d sum(Q_tot) / d params

    def total(w_net, b_net):
        ww, bb, _ = weights(MixerParams(w_net, b_net, 2, local), obs)
        return float(np.sum(mix_q(ww, bb, q)))

    num_w = finite_difference(lambda th: total(m.w_net.with_theta(th), m.b_net), m.w_net.theta)
    num_b = finite_difference(lambda th: total(m.w_net, m.b_net.with_theta(th)), m.b_net.theta)
    assert relative_error(gw.theta, num_w) <= 1e-4
    assert relative_error(gb.theta, num_b) <= 1e-4
