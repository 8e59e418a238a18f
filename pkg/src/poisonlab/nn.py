"""Small fully-connected softmax classifier with analytic gradients, trained by
minibatch SGD with momentum. Pure numpy, float64 throughout, deterministic in
the training seed."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import Dataset, Image, rng_from

MODEL_MAGIC = b"LSBAMODL"
MODEL_VERSION = 1


@dataclass(frozen=True)
class Architecture:
    """Layer widths: input_dim -> hidden[0] -> ... -> output_dim.

    Hidden layers use the rectifier; the output layer is linear into softmax.
    """

    input_dim: int
    hidden: tuple[int, ...]
    output_dim: int

    def __post_init__(self) -> None:
        if self.input_dim < 1 or self.output_dim < 2:
            raise ValueError("need input_dim >= 1 and output_dim >= 2")
        if any(h < 1 for h in self.hidden):
            raise ValueError("hidden widths must be positive")

    @property
    def widths(self) -> tuple[int, ...]:
        return (self.input_dim, *self.hidden, self.output_dim)


@dataclass(eq=False)
class Model:
    """Weights[i] has shape (fan_in, fan_out); activations flow as x @ W + b."""

    arch: Architecture
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def params(self) -> list[np.ndarray]:
        """Parameter tensors in a fixed order: W0, b0, W1, b1, ..."""
        out: list[np.ndarray] = []
        for w, b in zip(self.weights, self.biases):
            out.append(w)
            out.append(b)
        return out

    def copy(self) -> "Model":
        return Model(self.arch, [w.copy() for w in self.weights], [b.copy() for b in self.biases])


def init_model(arch: Architecture, seed: int) -> Model:
    """Uniform init in [-1/sqrt(fan_in), 1/sqrt(fan_in)] for weights and biases."""
    rng = rng_from(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(arch.widths[:-1], arch.widths[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(rng.uniform(-bound, bound, size=fan_out))
    return Model(arch, weights, biases)


def _forward_batch(model: Model, x: np.ndarray) -> np.ndarray:
    """Class probabilities for a (B, input_dim) batch, via max-shifted softmax."""
    a = x
    last = len(model.weights) - 1
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        z = a @ w + b
        a = np.maximum(z, 0.0) if i < last else z
    logits = a - a.max(axis=1, keepdims=True)
    e = np.exp(logits)
    return e / e.sum(axis=1, keepdims=True)


def forward(model: Model, image: Image) -> np.ndarray:
    """Probability vector over classes for one image."""
    x = image.flat
    if x.size != model.arch.input_dim:
        raise ValueError(f"image has {x.size} pixels, model expects {model.arch.input_dim}")
    return _forward_batch(model, x[None, :])[0]


def forward_batch(model: Model, x: np.ndarray) -> np.ndarray:
    """Batched :func:`forward` on pre-flattened rows."""
    if x.ndim != 2 or x.shape[1] != model.arch.input_dim:
        raise ValueError(f"batch shape {x.shape} does not match input_dim {model.arch.input_dim}")
    return _forward_batch(model, x)


def loss(probabilities: np.ndarray, label: int) -> float:
    """Cross-entropy -log p[label]; infinity when that probability is zero."""
    p = np.asarray(probabilities, dtype=np.float64)
    if not 0 <= label < p.size:
        raise ValueError(f"label {label} outside [0, {p.size})")
    value = float(p[label])
    if value <= 0.0:
        return float("inf")
    return float(-np.log(value))


def _forward_cached(model: Model, x: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
    # activations[i] is the input to layer i; probs are the softmax output
    activations = [x]
    a = x
    last = len(model.weights) - 1
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        z = a @ w + b
        a = np.maximum(z, 0.0) if i < last else z
        activations.append(a)
    logits = a - a.max(axis=1, keepdims=True)
    e = np.exp(logits)
    probs = e / e.sum(axis=1, keepdims=True)
    return probs, activations


def _backward_batch(
    model: Model, x: np.ndarray, labels: np.ndarray
) -> tuple[list[np.ndarray], np.ndarray]:
    """Gradients of mean cross-entropy over the batch, plus d(loss)/d(input).

    Softmax + cross-entropy collapse to probs - onehot at the output;
    the rectifier gate is (activation > 0), zero at exactly zero.
    """
    batch = x.shape[0]
    probs, activations = _forward_cached(model, x)
    delta = probs.copy()
    delta[np.arange(batch), labels] -= 1.0
    delta /= batch

    grads: list[np.ndarray] = [None] * (2 * len(model.weights))  # type: ignore[list-item]
    for i in range(len(model.weights) - 1, -1, -1):
        grads[2 * i] = activations[i].T @ delta
        grads[2 * i + 1] = delta.sum(axis=0)
        back = delta @ model.weights[i].T
        if i > 0:
            back = back * (activations[i] > 0.0)
        delta = back
    return grads, delta


def backward(model: Model, image: Image, label: int) -> list[np.ndarray]:
    """Analytic cross-entropy gradients for one example, ordered like params()."""
    if not 0 <= label < model.arch.output_dim:
        raise ValueError(f"label {label} outside [0, {model.arch.output_dim})")
    x = image.flat[None, :]
    grads, _ = _backward_batch(model, x, np.array([label]))
    return grads


def ce_with_input_gradient(
    model: Model, x: np.ndarray, label: int
) -> tuple[float, np.ndarray]:
    """Mean cross-entropy of a batch against one fixed label, and its gradient
    with respect to the batch inputs. Used by trigger reverse-engineering."""
    labels = np.full(x.shape[0], label, dtype=np.int64)
    probs, _ = _forward_cached(model, x)
    p = np.clip(probs[:, label], 1e-300, None)
    ce = float(-np.log(p).mean())
    _, dx = _backward_batch(model, x, labels)
    return ce, dx


def grad_check(model: Model, image: Image, label: int, eps: float = 1e-5) -> float:
    """Max relative error between analytic and central finite-difference
    gradients over every parameter entry.

    Relative error is |a - b| / max(|a|, |b|, 1e-8).
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    analytic = backward(model, image, label)
    probe = model.copy()
    params = probe.params()
    x = image.flat[None, :]
    worst = 0.0
    for tensor, grad in zip(params, analytic):
        flat = tensor.reshape(-1)
        gflat = grad.reshape(-1)
        for j in range(flat.size):
            saved = flat[j]
            flat[j] = saved + eps
            up = loss(_forward_batch(probe, x)[0], label)
            flat[j] = saved - eps
            down = loss(_forward_batch(probe, x)[0], label)
            flat[j] = saved
            numeric = (up - down) / (2.0 * eps)
            a, b = gflat[j], numeric
            err = abs(a - b) / max(abs(a), abs(b), 1e-8)
            worst = max(worst, err)
    return worst


@dataclass(frozen=True)
class TrainConfig:
    epochs: int
    batch_size: int
    learning_rate: float
    momentum: float
    seed: int

    def __post_init__(self) -> None:
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        # zero learning rate is allowed: train() then returns the init unchanged
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be nonnegative")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")


def mean_loss(model: Model, x: np.ndarray, labels: np.ndarray) -> float:
    """Mean cross-entropy of a flattened batch against integer labels."""
    probs = _forward_batch(model, x)
    picked = np.clip(probs[np.arange(x.shape[0]), labels], 1e-300, None)
    return float(-np.log(picked).mean())


def train_with_history(
    dataset: Dataset, arch: Architecture, config: TrainConfig
) -> tuple[Model, list[float]]:
    """Minibatch SGD with classical momentum on mean cross-entropy.

    One fresh shuffle per epoch; a trailing short batch is kept. Deterministic:
    config.seed drives both the init and the shuffles. The history holds the
    full-dataset mean loss after each epoch.
    """
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    if arch.output_dim != dataset.class_count:
        raise ValueError(
            f"architecture has {arch.output_dim} outputs, dataset has {dataset.class_count} classes"
        )
    x, y = dataset.stack()
    if x.shape[1] != arch.input_dim:
        raise ValueError(f"dataset flattens to {x.shape[1]} pixels, arch expects {arch.input_dim}")
    if config.batch_size > len(dataset):
        raise ValueError("batch_size exceeds dataset size")

    rng = rng_from(config.seed)
    model = init_model(arch, config.seed)
    velocity = [np.zeros_like(p) for p in model.params()]
    params = model.params()
    n = len(dataset)
    history = []
    for _ in range(config.epochs):
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            batch = order[start : start + config.batch_size]
            grads, _ = _backward_batch(model, x[batch], y[batch])
            for v, p, g in zip(velocity, params, grads):
                v *= config.momentum
                v += g
                p -= config.learning_rate * v
        history.append(mean_loss(model, x, y))
    return model, history


def train(dataset: Dataset, arch: Architecture, config: TrainConfig) -> Model:
    """:func:`train_with_history` without the per-epoch loss curve."""
    return train_with_history(dataset, arch, config)[0]


def save_model(model: Model, path: str | Path) -> None:
    """Binary format: magic, version, layer count, widths, then parameter
    tensors in params() order as little-endian float64."""
    parts = [MODEL_MAGIC, struct.pack("<I", MODEL_VERSION)]
    widths = model.arch.widths
    parts.append(struct.pack("<I", len(widths)))
    parts.append(struct.pack(f"<{len(widths)}I", *widths))
    for tensor in model.params():
        parts.append(tensor.astype("<f8").tobytes())
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(b"".join(parts))


def load_model(path: str | Path) -> Model:
    data = Path(path).read_bytes()
    if data[:8] != MODEL_MAGIC:
        raise ValueError("not a model file (bad magic)")
    version = struct.unpack_from("<I", data, 8)[0]
    if version != MODEL_VERSION:
        raise ValueError(f"unsupported model version {version}")
    (count,) = struct.unpack_from("<I", data, 12)
    widths = struct.unpack_from(f"<{count}I", data, 16)
    offset = 16 + 4 * count
    arch = Architecture(widths[0], tuple(widths[1:-1]), widths[-1])
    weights, biases = [], []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        w = np.frombuffer(data, dtype="<f8", count=fan_in * fan_out, offset=offset)
        offset += 8 * fan_in * fan_out
        b = np.frombuffer(data, dtype="<f8", count=fan_out, offset=offset)
        offset += 8 * fan_out
        weights.append(w.reshape(fan_in, fan_out).copy())
        biases.append(b.copy())
    if offset != len(data):
        raise ValueError("model file has trailing or missing bytes")
    return Model(arch, weights, biases)
