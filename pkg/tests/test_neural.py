import math

import numpy as np
import pytest

from estoi_sep import neural
from estoi_sep.neural import (AdamState, CheckpointError, DivergenceError, adam_step, backward,
                              clip_global_norm, forward, init_model, load_model, parameter_count,
                              save_model, zero_model)

# 3 x 512 LSTM on 65 bins plus the 512 -> 65 dense head:
# 4*(65*512 + 512*512 + 512) + 2 * 4*(512*512 + 512*512 + 512) + 512*65 + 65
DEFAULT_PARAMETERS = 5415489


def small_model(seed=0, F=6, hidden=(5, 4)):
    return init_model(F, hidden, seed=seed)


def test_zero_model_half_mask(rng):
    Z = rng.uniform(0, 1, (6, 9))
    res = forward(zero_model(6, [4]), Z)
    np.testing.assert_array_equal(res.mask, 0.5)
    np.testing.assert_array_equal(res.est1, Z / 2)
    np.testing.assert_array_equal(res.est2, Z / 2)


def test_mask_range_and_sum(rng):
    model = small_model()
    Z = rng.uniform(0, 3, (2, 6, 20))
    res = forward(model, Z)
    assert np.all((res.mask > 0) & (res.mask < 1))
    np.testing.assert_array_equal(res.est1 + res.est2, Z)
    np.testing.assert_allclose(res.est1, res.mask * Z, rtol=0, atol=np.spacing(Z.max()))
    assert res.tape.length == 20


def test_hand_computed_lstm_step():
    W = np.array([[0.1, -0.2, 0.3, 0.4, -0.5, 0.6, 0.7, -0.8],
                  [0.2, 0.1, -0.1, 0.3, 0.2, -0.4, 0.5, 0.1]])
    U = np.zeros((2, 8))
    b = np.array([0.0, 0.1, 1.0, 1.0, -0.2, 0.0, 0.05, 0.0])
    model = neural.SeparationModel([neural.LstmLayerParams(W, U, b)], np.zeros((2, 2)),
                                   np.zeros(2))
    x = np.array([0.7, -1.3])
    res = forward(model, x[:, None])
    sig = lambda v: 1.0 / (1.0 + math.exp(-v))
    z = x @ W + b
    h = []
    for k in range(2):
        # the forget gate only scales the previous cell state, which is zero here
        i, g, o = sig(z[k]), math.tanh(z[4 + k]), sig(z[6 + k])
        h.append(o * math.tanh(i * g))
    np.testing.assert_allclose(res.tape.hidden[0][0, 0], h, rtol=0, atol=1e-12)


def test_dimension_mismatch(rng):
    with pytest.raises(ValueError, match="65"):
        forward(init_model(65, [4]), rng.uniform(0, 1, (33, 10)))


def test_parameter_count():
    assert parameter_count(65, [512, 512, 512]) == DEFAULT_PARAMETERS
    assert init_model().num_parameters() == DEFAULT_PARAMETERS
    assert small_model().num_parameters() == parameter_count(6, [5, 4])


def test_init_structure():
    model = init_model(6, [4], seed=3)
    layer = model.layers[0]
    np.testing.assert_array_equal(layer.b[4:8], 1.0)
    np.testing.assert_array_equal(np.delete(layer.b, range(4, 8)), 0.0)
    for k in range(4):
        block = layer.U[:, 4 * k:4 * k + 4]
        np.testing.assert_allclose(block.T @ block, np.eye(4), atol=1e-12)
    assert np.all(np.abs(layer.W) <= 1 / np.sqrt(6))


def test_zero_upstream_gives_zero_gradients(rng):
    model = small_model()
    res = forward(model, rng.uniform(0, 1, (6, 7)))
    grads = backward(model, res.tape, np.zeros((6, 7)), np.zeros((6, 7)))
    assert all(not np.any(g) for g in grads.values())


def test_backward_matches_difference(rng):
    model = small_model()
    Z = rng.uniform(0, 1, (2, 6, 5))
    w1, w2 = rng.standard_normal((2, 2, 6, 5))

    def loss(m):
        r = forward(m, Z)
        return float((r.est1 * w1).sum() + (r.est2 * w2).sum())

    res = forward(model, Z)
    grads = backward(model, res.tape, w1, w2)
    h = 1e-6
    for name, p in model.parameters().items():
        idx = tuple(rng.integers(s) for s in p.shape)
        old = p[idx]
        p[idx] = old + h
        up = loss(model)
        p[idx] = old - h
        down = loss(model)
        p[idx] = old
        assert abs((up - down) / (2 * h) - grads[name][idx]) < 1e-7, name


def test_backward_rejects_foreign_tape(rng):
    res = forward(small_model(), rng.uniform(0, 1, (6, 4)))
    with pytest.raises(ValueError):
        backward(init_model(6, [5]), res.tape, np.zeros((6, 4)), np.zeros((6, 4)))


def test_forward_backward_deterministic(rng):
    model = small_model()
    Z = rng.uniform(0, 1, (3, 6, 12))
    g = rng.standard_normal((3, 6, 12))
    a, b = forward(model, Z), forward(model, Z)
    np.testing.assert_array_equal(a.mask, b.mask)
    ga, gb = backward(model, a.tape, g, -g), backward(model, b.tape, g, -g)
    for k in ga:
        np.testing.assert_array_equal(ga[k], gb[k])


def scalar_model(w):
    return neural.SeparationModel([], np.array([[float(w)]]), np.zeros(1))


def test_adam_first_step_is_lr():
    model = scalar_model(1.0)
    state = AdamState.for_model(model)
    adam_step(model, {"dense.W": np.array([[3.0]]), "dense.b": np.zeros(1)}, state)
    assert model.dense_W[0, 0] == pytest.approx(1.0 - 1e-3, rel=1e-9)
    assert state.step == 1


def test_adam_zero_gradient():
    model = scalar_model(2.0)
    state = AdamState.for_model(model)
    adam_step(model, {"dense.W": np.zeros((1, 1)), "dense.b": np.zeros(1)}, state)
    assert model.dense_W[0, 0] == 2.0 and state.step == 1


def test_adam_quadratic():
    # f(w) = |w|^2 from w0 = [1, 1]; learning rate 0.1 (the 1e-3 default moves
    # at most ~0.2 in 200 steps)
    model = neural.SeparationModel([], np.ones((1, 2)), np.zeros(2))
    state = AdamState.for_model(model, learning_rate=0.1)
    for _ in range(200):
        adam_step(model, {"dense.W": 2 * model.dense_W, "dense.b": np.zeros(2)}, state)
    assert np.linalg.norm(model.dense_W) < 0.01


def test_adam_rejects_non_finite():
    model = scalar_model(1.0)
    with pytest.raises(DivergenceError):
        adam_step(model, {"dense.W": np.array([[np.nan]]), "dense.b": np.zeros(1)},
                  AdamState.for_model(model))


def test_clip_global_norm():
    grads = {"a": np.array([3.0]), "b": np.array([4.0])}
    assert clip_global_norm(grads, 1.0) == 5.0
    assert neural.global_norm(grads) == pytest.approx(1.0)
    grads = {"a": np.array([0.3])}
    clip_global_norm(grads, 5.0)
    assert grads["a"][0] == 0.3


def test_checkpoint_round_trip(tmp_path, rng):
    model = small_model()
    model.configs = {"stft": {"hop": 64}, "sequence_length": 256}
    state = AdamState.for_model(model)
    res = forward(model, rng.uniform(0, 1, (6, 5)))
    adam_step(model, backward(model, res.tape, np.ones((6, 5)), np.zeros((6, 5))), state)
    save_model(model, state, tmp_path / "m.ckpt")
    loaded, lstate = load_model(tmp_path / "m.ckpt")
    for k, p in model.parameters().items():
        assert p.tobytes() == loaded.parameters()[k].tobytes()
        assert state.m[k].tobytes() == lstate.m[k].tobytes()
        assert state.v[k].tobytes() == lstate.v[k].tobytes()
    assert lstate.step == 1 and loaded.configs == model.configs
    save_model(model, None, tmp_path / "n.ckpt")
    assert load_model(tmp_path / "n.ckpt")[1] is None


def test_checkpoint_corruption(tmp_path):
    path = tmp_path / "m.ckpt"
    save_model(small_model(), None, path)
    data = path.read_bytes()
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"XXXXXXXX" + data[8:])
    with pytest.raises(CheckpointError, match="magic"):
        load_model(bad)
    bad.write_bytes(data[:-8])
    with pytest.raises(CheckpointError, match="truncated"):
        load_model(bad)
    bad.write_bytes(data + b"\0")
    with pytest.raises(CheckpointError):
        load_model(bad)
    bad.write_bytes(data[:8] + (99).to_bytes(4, "little") + data[12:])
    with pytest.raises(CheckpointError, match="version"):
        load_model(bad)


def test_loaded_model_checks_bins(tmp_path, rng):
    save_model(init_model(65, [3]), None, tmp_path / "m.ckpt")
    model, _ = load_model(tmp_path / "m.ckpt")
    with pytest.raises(ValueError):
        forward(model, rng.uniform(0, 1, (33, 4)))
