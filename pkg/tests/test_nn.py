import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import poisonlab.nn as nn_mod
from poisonlab.data import Image, generate_synthetic
from poisonlab.nn import (
    Architecture,
    Model,
    TrainConfig,
    backward,
    forward,
    forward_batch,
    grad_check,
    init_model,
    load_model,
    loss,
    mean_loss,
    save_model,
    train,
    train_with_history,
)


def image_from(values):
    arr = np.asarray(values, dtype=float).reshape(len(values), 1, 1)
    return Image(arr)


def hand_model():
    # 4 inputs, one hidden layer of 2, 3 classes; all values chosen by hand
    arch = Architecture(input_dim=4, hidden=(2,), output_dim=3)
    w1 = np.array([[0.1, -0.2], [0.3, 0.4], [-0.5, 0.6], [0.7, -0.8]])
    b1 = np.array([0.05, -0.05])
    w2 = np.array([[1.0, -1.0, 0.5], [0.2, 0.3, -0.4]])
    b2 = np.array([0.1, 0.2, 0.3])
    return Model(arch, [w1, w2], [b1, b2])


def constant_model(probs):
    # zero weights, bias = log(p): softmax returns p for every input
    probs = np.asarray(probs, dtype=float)
    arch = Architecture(input_dim=1, hidden=(), output_dim=len(probs))
    return Model(arch, [np.zeros((1, len(probs)))], [np.log(probs)])


# ---------------------------------------------------------------- forward


def test_forward_hand_oracle():
    # pre-activations: (0.4, -0.25); ReLU keeps (0.4, 0); logits (0.5, -0.2, 0.5)
    model = hand_model()
    x = image_from([0.0, 0.25, 0.5, 0.75])
    probs = forward(model, x)
    exps = [math.exp(v) for v in (0.5, -0.2, 0.5)]
    total = sum(exps)
    expected = [v / total for v in exps]
    assert np.allclose(probs, expected, atol=1e-12)
    assert abs(probs[0] - probs[2]) < 1e-15


def test_forward_uniform_for_zero_model():
    arch = Architecture(input_dim=2, hidden=(3,), output_dim=4)
    model = Model(
        arch,
        [np.zeros((2, 3)), np.zeros((3, 4))],
        [np.zeros(3), np.zeros(4)],
    )
    probs = forward(model, Image(np.full((2, 1, 1), 0.5)))
    assert np.allclose(probs, 0.25, atol=1e-15)


def test_forward_saturates_on_large_logits():
    model = constant_model([0.5, 0.5])
    model.biases[0][:] = [50.0, 0.0]
    probs = forward(model, image_from([0.3]))
    assert probs[0] > 1 - 1e-9
    assert abs(probs.sum() - 1.0) < 1e-12


def test_forward_dimension_mismatch():
    with pytest.raises(ValueError):
        forward(hand_model(), image_from([0.1, 0.2]))


def test_forward_batch_matches_single():
    model = init_model(Architecture(6, (5,), 3), seed=3)
    rng = np.random.default_rng(4)
    x = rng.random((7, 6))
    batch = forward_batch(model, x)
    for i in range(7):
        single = forward(model, Image(x[i].reshape(6, 1, 1)))
        assert np.allclose(batch[i], single, atol=1e-14)


@settings(max_examples=30)
@given(seed=st.integers(0, 2**32), pix=st.integers(0, 2**32))
def test_forward_outputs_probability_simplex(seed, pix):
    model = init_model(Architecture(5, (4,), 3), seed=seed)
    x = Image(np.random.default_rng(pix).random((5, 1, 1)))
    probs = forward(model, x)
    assert np.all(probs > 0)
    assert abs(probs.sum() - 1.0) < 1e-12


# ---------------------------------------------------------------- loss


def test_loss_values():
    assert abs(loss(np.array([0.25, 0.25, 0.25, 0.25]), 2) - math.log(4)) < 1e-12
    assert loss(np.array([0.0, 1.0]), 1) == 0.0
    assert abs(loss(np.array([0.5, 0.5]), 0) - math.log(2)) < 1e-12
    assert loss(np.array([1.0, 0.0]), 1) == math.inf


def test_loss_label_range():
    with pytest.raises(ValueError):
        loss(np.array([0.5, 0.5]), 2)


# ---------------------------------------------------------------- gradients


def test_final_bias_gradient_is_probs_minus_onehot():
    model = hand_model()
    x = image_from([0.0, 0.25, 0.5, 0.75])
    probs = forward(model, x)
    grads = backward(model, x, 1)
    onehot = np.array([0.0, 1.0, 0.0])
    assert np.allclose(grads[-1], probs - onehot, atol=1e-12)


def test_zero_input_zeroes_first_weight_gradient():
    model = hand_model()
    grads = backward(model, image_from([0.0, 0.0, 0.0, 0.0]), 0)
    assert np.all(grads[0] == 0.0)
    assert np.any(grads[1] != 0.0)


def test_grad_check_random_models():
    rng = np.random.default_rng(12)
    for _ in range(5):
        arch = Architecture(4, (5, 3), 3)
        model = init_model(arch, seed=int(rng.integers(2**32)))
        x = Image(rng.random((4, 1, 1)))
        err = grad_check(model, x, int(rng.integers(3)))
        assert err < 1e-4


def test_grad_check_linear_model():
    model = init_model(Architecture(6, (), 3), seed=8)
    x = Image(np.random.default_rng(9).random((6, 1, 1)))
    assert grad_check(model, x, 1) < 1e-7


def test_grad_check_flags_corrupted_gradient(monkeypatch):
    model = init_model(Architecture(4, (3,), 2), seed=5)
    x = Image(np.random.default_rng(6).random((4, 1, 1)))
    true_backward = nn_mod.backward

    def corrupted(model, image, label):
        grads = true_backward(model, image, label)
        grads[0] = grads[0].copy()
        grads[0][0, 0] *= 2.0
        return grads

    monkeypatch.setattr(nn_mod, "backward", corrupted)
    assert grad_check(model, x, 0) >= 0.5


def test_grad_check_eps_validation():
    with pytest.raises(ValueError):
        grad_check(hand_model(), image_from([0.0, 0.0, 0.0, 0.0]), 0, eps=0.0)


# ---------------------------------------------------------------- training


def small_dataset(seed=20):
    return generate_synthetic(3, 30, 8, 0.05, seed=seed)


def test_train_deterministic_bitwise():
    ds = small_dataset()
    arch = Architecture(64, (8,), 3)
    cfg = TrainConfig(epochs=3, batch_size=16, learning_rate=0.1, momentum=0.9, seed=21)
    a = train(ds, arch, cfg)
    b = train(ds, arch, cfg)
    for wa, wb in zip(a.weights, b.weights):
        assert np.array_equal(wa, wb)
    for ba, bb in zip(a.biases, b.biases):
        assert np.array_equal(ba, bb)


def test_train_zero_lr_keeps_init():
    ds = small_dataset()
    arch = Architecture(64, (8,), 3)
    cfg = TrainConfig(epochs=2, batch_size=16, learning_rate=0.0, momentum=0.9, seed=22)
    trained = train(ds, arch, cfg)
    ref = init_model(arch, seed=22)
    for wa, wb in zip(trained.weights, ref.weights):
        assert np.array_equal(wa, wb)


def test_train_reaches_high_accuracy():
    train_ds = generate_synthetic(3, 1000, 16, 0.1, seed=30)
    test_ds = generate_synthetic(3, 100, 16, 0.1, seed=31)
    arch = Architecture(256, (32,), 3)
    cfg = TrainConfig(epochs=5, batch_size=32, learning_rate=0.15, momentum=0.9, seed=32)
    model = train(train_ds, arch, cfg)
    x, y = test_ds.stack()
    preds = forward_batch(model, x).argmax(axis=1)
    assert (preds == y).mean() >= 0.95


def test_train_loss_history_mostly_decreasing():
    ds = generate_synthetic(3, 100, 8, 0.1, seed=40)
    arch = Architecture(64, (16,), 3)
    cfg = TrainConfig(epochs=20, batch_size=32, learning_rate=0.05, momentum=0.9, seed=41)
    model, history = train_with_history(ds, arch, cfg)
    assert len(history) == 20
    violations = sum(1 for a, b in zip(history, history[1:]) if b > a)
    assert violations <= 1
    x, y = ds.stack()
    assert abs(mean_loss(model, x, y) - history[-1]) < 1e-12


def test_train_validation():
    ds = small_dataset()
    arch = Architecture(64, (8,), 3)
    with pytest.raises(ValueError):
        TrainConfig(epochs=0, batch_size=16, learning_rate=0.1, momentum=0.9, seed=0)
    with pytest.raises(ValueError):
        TrainConfig(epochs=1, batch_size=16, learning_rate=0.1, momentum=1.0, seed=0)
    with pytest.raises(ValueError):
        train(ds, Architecture(32, (8,), 3), TrainConfig(1, 16, 0.1, 0.9, 0))
    with pytest.raises(ValueError):
        train(ds, arch, TrainConfig(epochs=1, batch_size=100, learning_rate=0.1, momentum=0.9, seed=0))


# ---------------------------------------------------------------- persistence


def test_model_save_load_round_trip(tmp_path):
    model = init_model(Architecture(10, (7, 4), 3), seed=50)
    path = tmp_path / "m.model"
    save_model(model, path)
    back = load_model(path)
    assert back.arch == model.arch
    for wa, wb in zip(model.weights, back.weights):
        assert np.array_equal(wa, wb)
    for ba, bb in zip(model.biases, back.biases):
        assert np.array_equal(ba, bb)


def test_model_load_rejects_bad_magic(tmp_path):
    path = tmp_path / "m.model"
    save_model(init_model(Architecture(4, (), 2), seed=1), path)
    raw = bytearray(path.read_bytes())
    raw[0] ^= 0xFF
    path.write_bytes(bytes(raw))
    with pytest.raises(ValueError):
        load_model(path)


def test_model_load_rejects_truncation(tmp_path):
    path = tmp_path / "m.model"
    save_model(init_model(Architecture(4, (3,), 2), seed=1), path)
    raw = path.read_bytes()
    path.write_bytes(raw[:-4])
    with pytest.raises(ValueError):
        load_model(path)
