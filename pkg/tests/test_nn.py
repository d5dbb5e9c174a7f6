import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from gamnav import nn
from gamnav.errors import ConfigError, DimensionError, NumericalError


def make_mlp(sizes, activation="tanh", output_mode="linear", seed=0):
    spec = nn.MlpSpec(sizes, activation, output_mode)
    params = nn.ParamStore()
    nn.init_mlp(params, "m.", spec, np.random.default_rng(seed))
    return spec, params


# ----------------------------------------------------------------- MLP


def test_mlp_zero_weights_give_zero_output():
    spec, params = make_mlp((3, 5, 2))
    for v in params.values.values():
        v.fill(0.0)
    out, _ = nn.mlp_forward(spec, params, np.array([1.0, -2.0, 3.0]), "m.")
    assert np.array_equal(out, np.zeros(2))


def test_identity_relu_layer():
    spec = nn.MlpSpec((2, 2, 2), "relu", "linear")
    params = nn.ParamStore()
    params.add("W0", np.eye(2))
    params.add("b0", np.zeros(2))
    params.add("W1", np.eye(2))
    params.add("b1", np.zeros(2))
    out, _ = nn.mlp_forward(spec, params, np.array([-1.0, 2.0]))
    assert np.array_equal(out, [0.0, 2.0])


def test_mlp_dimension_error_names_layer():
    spec, params = make_mlp((3, 4, 2))
    with pytest.raises(DimensionError, match="layer 0"):
        nn.mlp_forward(spec, params, np.zeros(5), "m.")
    params.values["m.W1"] = np.zeros((7, 2))
    with pytest.raises(DimensionError, match="layer 1"):
        nn.mlp_forward(spec, params, np.zeros(3), "m.")


def test_mlp_spec_validation():
    with pytest.raises(ConfigError):
        nn.MlpSpec((3,))
    with pytest.raises(ConfigError):
        nn.MlpSpec((3, 0, 1))
    with pytest.raises(ConfigError):
        nn.MlpSpec((3, 2), activation="gelu")


def test_glorot_init_bounds():
    spec, params = make_mlp((30, 50, 10))
    lim = math.sqrt(6 / 80)
    assert np.max(np.abs(params["m.W0"])) <= lim
    assert np.all(params["m.b0"] == 0)


@pytest.mark.parametrize("mode", ["linear", "softmax", "sigmoid"])
def test_mlp_gradient_matches_finite_differences(mode):
    spec, params = make_mlp((3, 4, 2), "tanh", mode, seed=1)
    x = np.random.default_rng(2).normal(size=(5, 3))
    w = np.random.default_rng(3).normal(size=(5, 2))

    def loss(p):
        out, tape = nn.mlp_forward(spec, p, x, "m.")
        nn.mlp_backward(spec, p, tape, w, "m.")
        return float(np.sum(out * w))

    assert nn.grad_check(loss, params, 100) <= 1e-4


def test_mlp_input_gradient():
    spec, params = make_mlp((3, 4, 2), "tanh", seed=4)
    x = np.array([0.3, -0.2, 0.5])
    out, tape = nn.mlp_forward(spec, params, x, "m.")
    gx = nn.mlp_backward(spec, params, tape, np.ones(2), "m.")
    h = 1e-6
    for i in range(3):
        e = np.zeros(3)
        e[i] = h
        num = (nn.mlp_forward(spec, params, x + e, "m.")[0].sum() - nn.mlp_forward(spec, params, x - e, "m.")[0].sum()) / (2 * h)
        assert gx[i] == pytest.approx(num, rel=1e-6)


def test_forward_is_deterministic():
    spec, params = make_mlp((3, 4, 2), seed=5)
    x = np.array([0.1, 0.2, 0.3])
    a, _ = nn.mlp_forward(spec, params, x, "m.")
    b, _ = nn.mlp_forward(spec, params, x, "m.")
    assert np.array_equal(a, b)


# ----------------------------------------------------------------- LSTM


def lstm_params(n_in, n_h, seed=0):
    p = nn.ParamStore()
    nn.init_lstm(p, "lstm.", n_in, n_h, np.random.default_rng(seed))
    return p


def test_lstm_zero_params_zero_state():
    p = lstm_params(3, 4)
    for v in p.values.values():
        v.fill(0.0)
    s = nn.lstm_step(p, np.array([1.0, 2.0, -3.0]), nn.LstmState.zeros(4))
    assert np.array_equal(s.hidden, np.zeros(4))
    assert np.array_equal(s.cell, np.zeros(4))


def test_lstm_hidden_stays_bounded():
    p = lstm_params(3, 5, seed=1)
    for v in p.values.values():
        v *= 5.0
    s = nn.LstmState.zeros(5)
    x = np.array([2.0, -1.0, 0.5])
    for _ in range(200):
        s = nn.lstm_step(p, x, s)
        assert np.max(np.abs(s.hidden)) <= 1.0


def test_lstm_dimension_errors():
    p = lstm_params(3, 4)
    with pytest.raises(DimensionError):
        nn.lstm_step(p, np.zeros(2), nn.LstmState.zeros(4))
    with pytest.raises(DimensionError):
        nn.lstm_step(p, np.zeros(3), nn.LstmState.zeros(5))
    with pytest.raises(DimensionError):
        nn.LstmState(np.zeros(3), np.zeros(4))


def test_lstm_three_step_gradient():
    p = lstm_params(3, 4, seed=2)
    xs = np.random.default_rng(3).normal(size=(3, 2, 3))
    w = np.random.default_rng(4).normal(size=(2, 4))

    def loss(params):
        s = nn.LstmState.zeros(4, 2)
        caches = []
        for t in range(3):
            s, c = nn.lstm_forward(params, xs[t], s)
            caches.append(c)
        dh, dc = w.copy(), np.zeros((2, 4))
        for c in reversed(caches):
            _, dh, dc = nn.lstm_backward(params, c, dh, dc)
        return float(np.sum(s.hidden * w))

    assert nn.grad_check(loss, p, 100) <= 1e-4


# ----------------------------------------------------------------- losses


def test_bce_values():
    assert nn.binary_cross_entropy(0.5, 1) == pytest.approx(math.log(2), abs=1e-12)
    assert nn.binary_cross_entropy(0.9, 0) == pytest.approx(-math.log(0.1), abs=1e-12)
    assert nn.binary_cross_entropy(1.0 - 1e-12, 1) < 1e-6
    assert nn.binary_cross_entropy(1.0, 0) == pytest.approx(-math.log(1e-7), rel=1e-6)


def test_bce_rejects_bad_labels():
    with pytest.raises(ConfigError):
        nn.binary_cross_entropy(0.5, 2)


@given(st.floats(1e-6, 1 - 1e-6), st.sampled_from([0, 1]))
def test_bce_nonnegative_and_gradient(p, y):
    assert nn.binary_cross_entropy(p, y) >= 0
    h = 1e-8
    num = (nn.binary_cross_entropy(p + h, y) - nn.binary_cross_entropy(p - h, y)) / (2 * h)
    assert float(nn.binary_cross_entropy_grad(p, y)) == pytest.approx(num, rel=1e-4, abs=1e-4)


def test_softmax_examples():
    assert np.allclose(nn.softmax(np.zeros(4)), 0.25, atol=0)
    assert np.allclose(nn.softmax([math.log(2), 0.0]), [2 / 3, 1 / 3], atol=1e-15)
    out = nn.softmax([1000.0, 0.0])
    assert np.all(np.isfinite(out)) and out[0] == 1.0 and out[1] == pytest.approx(0.0, abs=1e-300)
    with pytest.raises(DimensionError):
        nn.softmax([])


@settings(max_examples=200)
@given(arrays(np.float64, st.integers(1, 12), elements=st.floats(-700, 700)), st.floats(-100, 100))
def test_softmax_sums_to_one_and_shift_invariant(z, c):
    p = nn.softmax(z)
    assert abs(p.sum() - 1.0) <= 1e-12
    assert np.all(p >= 0)
    assert np.allclose(nn.softmax(z + c), p, atol=1e-12, rtol=0)


# ----------------------------------------------------------------- optimizers


def scalar_store(value=1.0, grad=0.0):
    p = nn.ParamStore()
    p.add("w", np.array([value]))
    p.grads["w"][0] = grad
    return p


def test_adam_first_step_magnitude():
    p = scalar_store(1.0, 3.7)
    nn.adam_step(p, 1e-3)
    assert p["w"][0] == pytest.approx(1.0 - 1e-3, abs=1e-10)
    assert p.step == 1


def test_adam_two_steps_monotone():
    p = scalar_store(0.0, -2.0)
    nn.adam_step(p, 1e-2)
    a = p["w"][0]
    nn.adam_step(p, 1e-2)
    assert 0.0 < a < p["w"][0]


@pytest.mark.parametrize("step", [nn.adam_step, nn.rmsprop_step])
def test_zero_grad_is_noop(step):
    p = scalar_store(0.5, 1.0)
    step(p, 0.1)
    before = p["w"].copy()
    p.zero_grad()
    step(p, 0.1)
    assert np.array_equal(p["w"], before)


@pytest.mark.parametrize("step", [nn.adam_step, nn.rmsprop_step])
def test_nonfinite_grad_aborts(step):
    p = scalar_store(0.5, np.nan)
    with pytest.raises(NumericalError, match="'w'"):
        step(p, 0.1)


def test_rmsprop_constant_grad_limit():
    g, lr = 0.3, 2.5e-4
    p = scalar_store(0.0, g)
    prev = 0.0
    for _ in range(3000):
        nn.rmsprop_step(p, lr)
        delta = prev - p["w"][0]
        prev = p["w"][0]
    # accumulator -> g^2, step -> lr * g / (|g| + eps)
    assert delta == pytest.approx(lr * g / (g + 1e-5), rel=1e-9)


def test_rmsprop_decreases_quadratic():
    rng = np.random.default_rng(0)
    A = rng.normal(size=(4, 4))
    A = A @ A.T + np.eye(4)
    p = nn.ParamStore()
    p.add("x", rng.normal(size=4))

    def f(x):
        return 0.5 * x @ A @ x

    start = f(p["x"])
    for _ in range(100):
        p.grads["x"][...] = A @ p["x"]
        nn.rmsprop_step(p, 1e-2)
    assert f(p["x"]) < start


def test_clip_grad_norm():
    p = scalar_store(0.0, 10.0)
    norm = nn.clip_grad_norm(p, 0.5)
    assert norm == 10.0 and p.grads["w"][0] == pytest.approx(0.5)


# ----------------------------------------------------------------- grad_check + checkpoint


def test_grad_check_exact_quadratic():
    p = nn.ParamStore()
    p.add("a", np.random.default_rng(0).normal(size=(6, 5)))

    def loss(params):
        params.grads["a"] += params["a"]
        return 0.5 * float(np.sum(params["a"] ** 2))

    assert nn.grad_check(loss, p, 30) <= 1e-8


def test_grad_check_detects_wrong_gradient():
    p = nn.ParamStore()
    p.add("a", np.ones(5))

    def loss(params):
        params.grads["a"] += 2.0 * params["a"]
        return 0.5 * float(np.sum(params["a"] ** 2))

    assert nn.grad_check(loss, p, 5) > 0.1


def test_checkpoint_roundtrip_bit_exact(tmp_path):
    spec, params = make_mlp((3, 4, 2), seed=9)
    params.grads["m.W0"] += 1.0
    nn.adam_step(params, 1e-3)
    path = tmp_path / "p.ckpt"
    nn.save_checkpoint(params, path)
    raw = path.read_bytes()
    assert raw[:8] == b"GAMCKPT1"
    back = nn.load_checkpoint(path)
    assert back.names() == params.names()
    for n in params.names():
        assert back[n].tobytes() == params[n].tobytes()
    assert back.step == params.step
    assert np.array_equal(back.opt_state["m.W0"]["m"], params.opt_state["m.W0"]["m"])
    assert nn.checkpoint_bytes(back) == raw


def test_checkpoint_rejects_garbage():
    with pytest.raises(ConfigError):
        nn.params_from_bytes(b"NOTACKPT" + bytes(16))
