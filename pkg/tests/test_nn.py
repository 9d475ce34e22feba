"""Network engine tests: forward/backward correctness against independent
oracles, optimizer steps, and checkpoint round-trips."""
import math

import numpy as np
import pytest

from flsim import nn


def toy_conv_arch():
    return nn.Architecture("t", 12, 3, (
        nn.conv1d(3, 2, padding="same"),
        nn.relu(),
        nn.maxpool1d(2, 2),
        nn.dense(12, 3),
        nn.softmax(),
    ))


def toy_dense_arch():
    return nn.Architecture("t", 6, 3, (
        nn.dense(6, 4),
        nn.relu(),
        nn.dense(4, 3),
        nn.softmax(),
    ))


# ---------------------------------------------------------------------------
# Architectures and parameter counts
# ---------------------------------------------------------------------------

def test_reference_parameter_counts():
    assert nn.cnn().parameter_count() == 1488
    assert nn.two_nn().parameter_count() == 16680
    assert nn.mnist_1fc().parameter_count() == 784 * 10 + 10


def test_shape_mismatch_reports_layer_index():
    with pytest.raises(nn.ShapeError, match="layer 0"):
        nn.Architecture("bad", 8, 3, (nn.dense(7, 3), nn.softmax()))


def test_non_composing_layers_rejected():
    with pytest.raises(nn.ShapeError):
        nn.Architecture("bad", 8, 3, (nn.dense(8, 4), nn.dense(5, 3), nn.softmax()))


def test_forward_wrong_input_width():
    arch = toy_dense_arch()
    params = nn.init_params(arch, 0)
    with pytest.raises(nn.ShapeError):
        nn.forward(arch, params, np.zeros(7))


# ---------------------------------------------------------------------------
# Forward pass
# ---------------------------------------------------------------------------

def test_zero_parameters_give_uniform_output():
    arch = nn.mnist_1fc()
    params = nn.ParamSet([np.zeros((784, 10))], [np.zeros(10)])
    out = nn.forward(arch, params, np.random.default_rng(0).normal(size=784))
    assert np.allclose(out, 0.1, atol=1e-12)


def test_identity_padded_classifier_picks_hot_index():
    arch = nn.mnist_1fc()
    w = np.zeros((784, 10))
    w[:10, :10] = np.eye(10)
    params = nn.ParamSet([w], [np.zeros(10)])
    x = np.zeros(784)
    x[3] = 1.0
    assert nn.forward(arch, params, x).argmax() == 3


def test_softmax_rows_normalized_many_inputs():
    arch = toy_conv_arch()
    for seed in range(20):
        rng = np.random.default_rng(seed)
        params = nn.init_params(arch, seed)
        out = nn.forward(arch, params, rng.normal(size=(8, 12)))
        assert np.all(out >= 0)
        assert np.allclose(out.sum(axis=1), 1.0, atol=1e-9)


def naive_cnn_forward(params, x):
    """Straight-loop reference for the 512-input CNN, no vectorization."""
    w_conv, w_fc = params.weights
    b_conv, b_fc = params.biases
    taps, filters = w_conv.shape
    length = len(x)
    left = (taps - 1) // 2
    padded = np.concatenate([np.zeros(left), x, np.zeros(taps - 1 - left)])
    conv = np.zeros((length, filters))
    for pos in range(length):
        for f in range(filters):
            acc = 0.0
            for tap in range(taps):
                acc += padded[pos + tap] * w_conv[tap, f]
            conv[pos, f] = max(acc + b_conv[f], 0.0)
    pooled = np.zeros((21, filters))
    for p in range(21):
        for f in range(filters):
            pooled[p, f] = max(conv[p * 24 + j, f] for j in range(24))
    logits = pooled.reshape(-1) @ w_fc + b_fc
    exp = np.exp(logits - logits.max())
    return exp / exp.sum()


def test_cnn_forward_matches_naive_loop_oracle():
    arch = nn.cnn()
    params = nn.init_params(arch, 42)
    x = np.random.default_rng(4242).normal(size=512)
    fast = nn.forward(arch, params, x)
    slow = naive_cnn_forward(params, x)
    assert np.abs(fast - slow).max() < 1e-10


# ---------------------------------------------------------------------------
# Cross-entropy
# ---------------------------------------------------------------------------

def test_cross_entropy_uniform_ten_classes():
    assert nn.cross_entropy(np.full(10, 0.1), 4) == pytest.approx(math.log(10), abs=1e-12)


def test_cross_entropy_perfect_prediction():
    probs = np.zeros(5)
    probs[2] = 1.0
    assert nn.cross_entropy(probs, 2) == 0.0


def test_cross_entropy_hand_value():
    assert nn.cross_entropy(np.array([0.7, 0.2, 0.1]), 1) == pytest.approx(
        -math.log(0.2), abs=1e-12)


def test_cross_entropy_zero_probability_clamped():
    probs = np.zeros(4)
    probs[0] = 1.0
    loss = nn.cross_entropy(probs, 3)
    assert math.isfinite(loss)
    assert loss == pytest.approx(-math.log(1e-12))


def test_cross_entropy_batch_is_mean():
    probs = np.array([[0.5, 0.5], [0.9, 0.1]])
    y = np.array([0, 0])
    want = (-math.log(0.5) - math.log(0.9)) / 2
    assert nn.cross_entropy(probs, y) == pytest.approx(want, abs=1e-12)


# ---------------------------------------------------------------------------
# Backward pass
# ---------------------------------------------------------------------------

def finite_difference_check(arch, seed, n=6, h=1e-5, tol=1e-4):
    rng = np.random.default_rng(seed)
    params = nn.init_params(arch, seed)
    X = rng.normal(size=(n, arch.input_dim))
    y = rng.integers(0, arch.num_classes, size=n)
    _, grads = nn.backward(arch, params, X, y)
    for t, (W, B) in enumerate(zip(params.weights, params.biases)):
        for arr, garr in ((W, grads.weights[t]), (B, grads.biases[t])):
            it = np.nditer(arr, flags=["multi_index"])
            for _ in it:
                i = it.multi_index
                orig = arr[i]
                arr[i] = orig + h
                up, _ = nn.backward(arch, params, X, y)
                arr[i] = orig - h
                down, _ = nn.backward(arch, params, X, y)
                arr[i] = orig
                fd = (up - down) / (2 * h)
                rel = abs(garr[i] - fd) / max(abs(fd), abs(garr[i]), 1e-6)
                assert rel <= tol, (arch.name, t, i, garr[i], fd)


@pytest.mark.parametrize("seed", range(10))
def test_gradients_match_finite_differences_dense(seed):
    finite_difference_check(toy_dense_arch(), seed)


@pytest.mark.parametrize("seed", range(10))
def test_gradients_match_finite_differences_conv(seed):
    finite_difference_check(toy_conv_arch(), seed)


def test_gradient_zero_when_predictions_exact():
    # send the hot logit far up so the softmax saturates to a one-hot
    arch = toy_dense_arch()
    params = nn.ParamSet(
        [np.zeros((6, 4)), np.zeros((4, 3))],
        [np.array([50.0, 0.0, 0.0, 0.0]), np.array([50.0, -50.0, -50.0])])
    X = np.zeros((4, 6))
    y = np.zeros(4, dtype=int)
    _, grads = nn.backward(arch, params, X, y)
    total = sum(float(np.abs(g).sum()) for g in grads.weights)
    total += sum(float(np.abs(g).sum()) for g in grads.biases)
    assert total < 1e-9


def test_cnn_gradient_shapes():
    arch = nn.cnn()
    params = nn.init_params(arch, 3)
    rng = np.random.default_rng(5)
    X = rng.normal(size=(5, 512))
    y = rng.integers(0, 8, size=5)
    _, grads = nn.backward(arch, params, X, y)
    assert grads.weights[0].shape == (16, 8)
    assert grads.biases[0].shape == (8,)
    assert grads.weights[1].shape == (168, 8)
    assert grads.biases[1].shape == (8,)


def test_backward_rejects_empty_batch():
    arch = toy_dense_arch()
    params = nn.init_params(arch, 0)
    with pytest.raises(ValueError):
        nn.backward(arch, params, np.zeros((0, 6)), np.zeros(0, dtype=int))


def test_backward_deterministic():
    arch = toy_conv_arch()
    params = nn.init_params(arch, 9)
    rng = np.random.default_rng(10)
    X = rng.normal(size=(5, 12))
    y = rng.integers(0, 3, size=5)
    l1, g1 = nn.backward(arch, params, X, y)
    l2, g2 = nn.backward(arch, params, X, y)
    assert l1 == l2
    for a, b in zip(g1.weights + g1.biases, g2.weights + g2.biases):
        assert np.array_equal(a, b)


def test_evaluate_agrees_with_forward():
    arch = toy_dense_arch()
    params = nn.init_params(arch, 1)
    rng = np.random.default_rng(2)
    X = rng.normal(size=(40, 6))
    y = rng.integers(0, 3, size=40)
    loss, acc = nn.evaluate(arch, params, X, y, chunk=7)
    probs = nn.forward(arch, params, X)
    assert loss == pytest.approx(nn.cross_entropy(probs, y), abs=1e-12)
    assert acc == pytest.approx(float((probs.argmax(axis=1) == y).mean()))


# ---------------------------------------------------------------------------
# Optimizer steps
# ---------------------------------------------------------------------------

def test_sgd_zero_step_is_identity():
    arch = toy_dense_arch()
    params = nn.init_params(arch, 0)
    grads = params.copy()
    out = nn.sgd_step(params, grads, 0.0)
    assert out.distance(params) == 0.0


def test_sgd_scalar_arithmetic():
    params = nn.ParamSet([np.array([[1.0]])], [np.array([0.0])])
    grads = nn.ParamSet([np.array([[0.4]])], [np.array([0.0])])
    out = nn.sgd_step(params, grads, 0.025)
    assert out.weights[0][0, 0] == pytest.approx(0.99, abs=1e-15)


def test_sgd_descends_on_toy_net():
    arch = toy_dense_arch()
    params = nn.init_params(arch, 7)
    rng = np.random.default_rng(8)
    X = rng.normal(size=(12, 6))
    y = rng.integers(0, 3, size=12)
    loss0, grads = nn.backward(arch, params, X, y)
    loss1, _ = nn.backward(arch, nn.sgd_step(params, grads, 1e-3), X, y)
    assert loss1 < loss0


def test_momentum_zero_decay_matches_sgd():
    arch = toy_dense_arch()
    params = nn.init_params(arch, 4)
    rng = np.random.default_rng(5)
    X = rng.normal(size=(6, 6))
    y = rng.integers(0, 3, size=6)
    _, grads = nn.backward(arch, params, X, y)
    plain = nn.sgd_step(params, grads, 0.1)
    with_momentum, _ = nn.momentum_step(params, params.zeros_like(), grads, 0.1, 0.0)
    assert plain.distance(with_momentum) < 1e-15


def test_momentum_velocity_decays_geometrically():
    params = nn.ParamSet([np.array([[0.0]])], [np.array([0.0])])
    velocity = nn.ParamSet([np.array([[1.0]])], [np.array([0.0])])
    zero_grad = params.zeros_like()
    for step in range(1, 5):
        _, velocity = nn.momentum_step(params, velocity, zero_grad, 0.1, 0.5)
        assert velocity.weights[0][0, 0] == pytest.approx(0.5 ** step, abs=1e-15)


def test_momentum_two_steps_constant_gradient():
    g = 0.7
    params = nn.ParamSet([np.array([[0.0]])], [np.array([0.0])])
    grads = nn.ParamSet([np.array([[g]])], [np.array([0.0])])
    velocity = params.zeros_like()
    params, velocity = nn.momentum_step(params, velocity, grads, 1.0, 0.5)
    assert velocity.weights[0][0, 0] == pytest.approx(-g, abs=1e-15)
    params, velocity = nn.momentum_step(params, velocity, grads, 1.0, 0.5)
    assert velocity.weights[0][0, 0] == pytest.approx(-1.5 * g, abs=1e-15)
    assert params.weights[0][0, 0] == pytest.approx(-2.5 * g, abs=1e-15)


def test_momentum_rejects_bad_decay():
    params = nn.ParamSet([np.array([[0.0]])], [np.array([0.0])])
    with pytest.raises(ValueError):
        nn.momentum_step(params, params.zeros_like(), params.zeros_like(), 0.1, 1.0)


# ---------------------------------------------------------------------------
# Parameter container and checkpoints
# ---------------------------------------------------------------------------

def test_parameter_count_invariant_under_updates():
    arch = toy_conv_arch()
    params = nn.init_params(arch, 6)
    count = params.parameter_count()
    rng = np.random.default_rng(7)
    X = rng.normal(size=(5, 12))
    y = rng.integers(0, 3, size=5)
    _, grads = nn.backward(arch, params, X, y)
    assert nn.sgd_step(params, grads, 0.1).parameter_count() == count
    stepped, _ = nn.momentum_step(params, params.zeros_like(), grads, 0.1, 0.5)
    assert stepped.parameter_count() == count


def test_checkpoint_round_trip(tmp_path):
    params = nn.init_params(nn.cnn(), 12)
    path = tmp_path / "model.flw"
    nn.save_checkpoint(params, path)
    loaded = nn.load_checkpoint(path)
    assert params.parameter_count() == loaded.parameter_count()
    for a, b in zip(params.weights + params.biases,
                    loaded.weights + loaded.biases):
        assert np.array_equal(a, b)


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "junk.flw"
    path.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(ValueError, match="magic"):
        nn.load_checkpoint(path)


def test_shared_initialization_is_seed_deterministic():
    a = nn.init_params(nn.two_nn(), 77)
    b = nn.init_params(nn.two_nn(), 77)
    assert a.distance(b) == 0.0
    assert a.max_abs() <= 0.05
