"""Small 8-bit quantized dense classifier.

Weights live as int8 two's-complement integers with one real scale per
layer; biases stay real and are never protected. Everything runs in float64
numpy so forward passes and gradients are bit-reproducible on one machine.
"""
from __future__ import annotations

import base64
import copy
import json
from dataclasses import dataclass, field
from decimal import Decimal
from pathlib import Path

import numpy as np

MODEL_MAGIC = "radarlab-qmodel"
MODEL_VERSION = 1
DATASET_MAGIC = "# radarlab-dataset v1"


class ModelFormatError(ValueError):
    """Raised for malformed model or dataset files."""


@dataclass
class QuantizedTensor:
    values: np.ndarray  # int8, already shaped
    scale: float

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.dtype != np.int8:
            v = np.asarray(self.values, dtype=np.int64)
            if v.size and (v.min() < -128 or v.max() > 127):
                raise ValueError("values outside the 8-bit range [-128, 127]")
            self.values = v.astype(np.int8)
        if not self.scale > 0:
            raise ValueError(f"scale must be positive, got {self.scale}")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def size(self) -> int:
        return self.values.size

    def dequantize(self) -> np.ndarray:
        return self.values.astype(np.float64) * self.scale


def _round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def quantize(w, bits: int = 8) -> QuantizedTensor:
    """Symmetric per-tensor linear quantization.

    scale = max|w| / (2**(bits-1) - 1), round half away from zero, clamp to
    the signed range. An all-zero tensor gets scale 1.
    """
    if bits != 8:
        raise ValueError("only 8-bit quantization is supported")
    w = np.asarray(w, dtype=np.float64)
    if not np.all(np.isfinite(w)):
        raise ValueError("cannot quantize non-finite values")
    qmax = 2 ** (bits - 1) - 1
    peak = float(np.max(np.abs(w))) if w.size else 0.0
    scale = peak / qmax if peak > 0 else 1.0
    q = np.clip(_round_half_away(w / scale), -qmax - 1, qmax)
    return QuantizedTensor(q.astype(np.int8), scale)


@dataclass
class DenseLayer:
    weights: QuantizedTensor  # shape (out_features, in_features)
    bias: np.ndarray
    kind: str = "dense"

    @property
    def in_features(self) -> int:
        return self.weights.shape[1]

    @property
    def out_features(self) -> int:
        return self.weights.shape[0]


@dataclass
class QuantizedModel:
    layers: list[DenseLayer]
    baseline_accuracy: float | None = None

    def __post_init__(self):
        for i, layer in enumerate(self.layers):
            if layer.weights.values.ndim != 2:
                raise ValueError(f"layer {i}: dense weights must be 2-D")
            if layer.bias.shape != (layer.out_features,):
                raise ValueError(f"layer {i}: bias shape {layer.bias.shape} "
                                 f"does not match {layer.out_features} outputs")
        for i in range(len(self.layers) - 1):
            if self.layers[i].out_features != self.layers[i + 1].in_features:
                raise ValueError(
                    f"layer {i} emits {self.layers[i].out_features} features "
                    f"but layer {i + 1} expects {self.layers[i + 1].in_features}")

    @property
    def layer_sizes(self) -> list[int]:
        return [layer.weights.size for layer in self.layers]

    @property
    def n_classes(self) -> int:
        return self.layers[-1].out_features

    def copy(self) -> QuantizedModel:
        return copy.deepcopy(self)

    def int_weights(self, layer: int) -> np.ndarray:
        """Flat int8 view of one layer's weights (writes go through)."""
        return self.layers[layer].weights.values.reshape(-1)

    def same_architecture(self, other: QuantizedModel) -> bool:
        return [l.weights.shape for l in self.layers] == [l.weights.shape for l in other.layers]


@dataclass
class Dataset:
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    n_classes: int = field(default=0)

    def __post_init__(self):
        self.y_train = np.asarray(self.y_train, dtype=np.int64)
        self.y_test = np.asarray(self.y_test, dtype=np.int64)
        if not self.n_classes:
            self.n_classes = int(max(self.y_train.max(initial=0), self.y_test.max(initial=0))) + 1
        for y in (self.y_train, self.y_test):
            if y.size and (y.min() < 0 or y.max() >= self.n_classes):
                raise ValueError("label index outside [0, n_classes)")

    def split(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        if name == "train":
            return self.x_train, self.y_train
        if name == "test":
            return self.x_test, self.y_test
        raise ValueError(f"unknown split {name!r}")


def gaussian_clusters(n_classes: int = 4, n_features: int = 64, n_train: int = 2000,
                      n_test: int = 1000, spread: float = 1.0, separation: float = 1.0,
                      seed: int = 0) -> Dataset:
    """Isotropic Gaussian blobs around random class centres."""
    rng = np.random.default_rng(seed)
    centres = rng.normal(0.0, separation, size=(n_classes, n_features))

    def draw(n):
        y = np.arange(n) % n_classes
        rng.shuffle(y)
        x = centres[y] + rng.normal(0.0, spread, size=(n, n_features))
        return x, y

    x_tr, y_tr = draw(n_train)
    x_te, y_te = draw(n_test)
    return Dataset(x_tr, y_tr, x_te, y_te, n_classes)


def digits_dataset(n_train: int = 1200, seed: int = 0) -> Dataset:
    """8x8 handwritten digits (1797 images, 10 classes), pixels scaled to [0, 1].

    One fixed shuffle, first ``n_train`` rows for training, the rest for test.
    """
    from sklearn.datasets import load_digits

    d = load_digits()
    order = np.random.default_rng(seed).permutation(len(d.target))
    x, y = d.data[order] / 16.0, d.target[order]
    if not 0 < n_train < len(y):
        raise ValueError(f"n_train must be in (0, {len(y)})")
    return Dataset(x[:n_train], y[:n_train], x[n_train:], y[n_train:], 10)


def random_labels(dataset: Dataset, seed: int = 0) -> Dataset:
    rng = np.random.default_rng(seed)
    k = dataset.n_classes
    return Dataset(dataset.x_train, rng.integers(0, k, len(dataset.y_train)),
                   dataset.x_test, rng.integers(0, k, len(dataset.y_test)), k)


# -- forward / backward ------------------------------------------------------

def _check_input(model: QuantizedModel, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != model.layers[0].in_features:
        raise ValueError(f"input shape {x.shape} does not match first layer "
                         f"width {model.layers[0].in_features}")
    return x


def forward(model: QuantizedModel, x) -> np.ndarray:
    h = _check_input(model, x)
    last = len(model.layers) - 1
    for i, layer in enumerate(model.layers):
        h = h @ layer.weights.dequantize().T + layer.bias
        if i < last:
            h = np.maximum(h, 0.0)
    return h


def _log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> float:
    lp = _log_softmax(logits)
    return float(-lp[np.arange(len(labels)), labels].mean())


def loss(model: QuantizedModel, x, labels) -> float:
    return cross_entropy(forward(model, x), np.asarray(labels))


def _backprop(weights: list[np.ndarray], biases: list[np.ndarray], x: np.ndarray,
              labels: np.ndarray):
    acts = [x]
    h = x
    last = len(weights) - 1
    for i, (w, b) in enumerate(zip(weights, biases)):
        h = h @ w.T + b
        if i < last:
            h = np.maximum(h, 0.0)
        acts.append(h)
    lp = _log_softmax(acts[-1])
    n = len(labels)
    value = float(-lp[np.arange(n), labels].mean())
    delta = np.exp(lp)
    delta[np.arange(n), labels] -= 1.0
    delta /= n
    gw, gb = [None] * len(weights), [None] * len(weights)
    for i in range(last, -1, -1):
        gw[i] = delta.T @ acts[i]
        gb[i] = delta.sum(axis=0)
        if i > 0:
            delta = (delta @ weights[i]) * (acts[i] > 0)
    return value, gw, gb


def loss_and_grad(model: QuantizedModel, x, labels) -> tuple[float, list[np.ndarray]]:
    """Mean cross-entropy and its gradient w.r.t. each dequantized weight matrix.

    Multiply a layer's gradient by its scale to get the gradient w.r.t. the
    integer weights.
    """
    x = _check_input(model, x)
    labels = np.asarray(labels, dtype=np.int64)
    if len(labels) == 0 or len(labels) != len(x):
        raise ValueError("batch must be nonempty and match label count")
    ws = [layer.weights.dequantize() for layer in model.layers]
    bs = [layer.bias for layer in model.layers]
    value, gw, _ = _backprop(ws, bs, x, labels)
    return value, gw


def predict(model: QuantizedModel, x) -> np.ndarray:
    # np.argmax returns the first maximum, i.e. lowest class index on ties
    return np.argmax(forward(model, x), axis=1)


def accuracy(model: QuantizedModel, x, labels) -> float:
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise ValueError("empty split")
    return float(np.mean(predict(model, x) == labels))


# -- bit mutation -------------------------------------------------------------

def bit_of(value: int, bit: int) -> int:
    return (int(value) & 0xFF) >> bit & 1


def toggled(value: int, bit: int) -> int:
    """The int8 value obtained by toggling one bit of ``value``."""
    u = (int(value) & 0xFF) ^ (1 << bit)
    return u - 256 if u >= 128 else u


def flip_bit(model: QuantizedModel, layer: int, flat_index: int, bit_position: int) -> str:
    """Toggle one weight bit in place; returns the direction, "0->1" or "1->0"."""
    if not 0 <= bit_position <= 7:
        raise IndexError(f"bit position {bit_position} outside [0, 7]")
    if not 0 <= layer < len(model.layers):
        raise IndexError(f"layer {layer} out of range")
    flat = model.int_weights(layer)
    if not 0 <= flat_index < flat.size:
        raise IndexError(f"index {flat_index} out of range for layer {layer} ({flat.size} weights)")
    old = int(flat[flat_index])
    flat[flat_index] = toggled(old, bit_position)
    return "1->0" if bit_of(old, bit_position) else "0->1"


# -- training -----------------------------------------------------------------

def train_float(dataset: Dataset, hidden=(32, 16), epochs: int = 60, batch_size: int = 64,
                lr: float = 1e-2, weight_decay: float = 1e-4, l1: float = 0.0, seed: int = 0):
    """Adam on float weights. Returns (weights, biases) lists."""
    rng = np.random.default_rng(seed)
    dims = [dataset.x_train.shape[1], *hidden, dataset.n_classes]
    ws = [rng.normal(0.0, np.sqrt(2.0 / a), size=(b, a)) for a, b in zip(dims[:-1], dims[1:])]
    bs = [np.zeros(b) for b in dims[1:]]
    params = ws + bs
    m = [np.zeros_like(p) for p in params]
    v = [np.zeros_like(p) for p in params]
    b1, b2, eps = 0.9, 0.999, 1e-8
    x, y = dataset.x_train, dataset.y_train
    t = 0
    for _ in range(epochs):
        order = rng.permutation(len(y))
        for start in range(0, len(y), batch_size):
            idx = order[start:start + batch_size]
            value, gw, gb = _backprop(ws, bs, x[idx], y[idx])
            if not np.isfinite(value):
                raise FloatingPointError(f"training diverged at step {t} (loss={value})")
            grads = [g + weight_decay * w + l1 * np.sign(w) for g, w in zip(gw, ws)] + gb
            t += 1
            for p, g, mi, vi in zip(params, grads, m, v):
                mi *= b1
                mi += (1 - b1) * g
                vi *= b2
                vi += (1 - b2) * g * g
                p -= lr * (mi / (1 - b1 ** t)) / (np.sqrt(vi / (1 - b2 ** t)) + eps)
    return ws, bs


def train_tiny(dataset: Dataset, hidden=(32, 16), epochs: int = 60, batch_size: int = 64,
               lr: float = 1e-2, weight_decay: float = 1e-4, l1: float = 0.0,
               seed: int = 0) -> QuantizedModel:
    """Train in float, quantize once, record clean test accuracy."""
    if dataset.n_classes < 2:
        raise ValueError("need at least two classes")
    ws, bs = train_float(dataset, hidden, epochs, batch_size, lr, weight_decay, l1, seed)
    model = QuantizedModel([DenseLayer(quantize(w), b.copy()) for w, b in zip(ws, bs)])
    model.baseline_accuracy = accuracy(model, dataset.x_test, dataset.y_test)
    return model


# -- file formats -------------------------------------------------------------

def model_to_dict(model: QuantizedModel) -> dict:
    return {
        "magic": MODEL_MAGIC,
        "version": MODEL_VERSION,
        "baseline_accuracy": model.baseline_accuracy,
        "layers": [
            {
                "kind": layer.kind,
                "shape": list(layer.weights.shape),
                "scale": repr(float(layer.weights.scale)),
                "weights": base64.b64encode(layer.weights.values.tobytes(order="C")).decode("ascii"),
                "bias": [repr(float(b)) for b in layer.bias],
            }
            for layer in model.layers
        ],
    }


def model_from_dict(d: dict) -> QuantizedModel:
    if d.get("magic") != MODEL_MAGIC:
        raise ModelFormatError(f"not a model file (magic {d.get('magic')!r})")
    if d.get("version") != MODEL_VERSION:
        raise ModelFormatError(f"unsupported model version {d.get('version')!r}")
    layers = []
    for i, rec in enumerate(d["layers"]):
        shape = tuple(rec["shape"])
        raw = base64.b64decode(rec["weights"])
        if len(raw) != int(np.prod(shape)):
            raise ModelFormatError(f"layer {i}: {len(raw)} weight bytes for shape {shape}")
        q = np.frombuffer(raw, dtype=np.int8).reshape(shape).copy()
        scale = float(Decimal(rec["scale"]))
        bias = np.array([float(Decimal(b)) for b in rec["bias"]])
        layers.append(DenseLayer(QuantizedTensor(q, scale), bias, rec.get("kind", "dense")))
    return QuantizedModel(layers, d.get("baseline_accuracy"))


def load_json(path, what: str) -> dict:
    text = Path(path).read_text()
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ModelFormatError(f"{path}: malformed {what} at byte offset {exc.pos}: {exc.msg}") from exc


def save_model(model: QuantizedModel, path) -> None:
    Path(path).write_text(json.dumps(model_to_dict(model), indent=1))


def load_model(path) -> QuantizedModel:
    d = load_json(path, "model file")
    try:
        return model_from_dict(d)
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, ModelFormatError):
            raise ModelFormatError(f"{path}: {exc}") from exc
        raise ModelFormatError(f"{path}: malformed model file: {exc!r}") from exc


def save_dataset_csv(dataset: Dataset, path) -> None:
    """Write train rows then test rows; a leading ``split`` column tags each."""
    with open(path, "w") as fh:
        fh.write(f"{DATASET_MAGIC} n_classes={dataset.n_classes}\n")
        for split in ("train", "test"):
            x, y = dataset.split(split)
            for row, label in zip(x, y):
                fh.write(split + "," + ",".join(repr(float(v)) for v in row) + f",{int(label)}\n")


def load_dataset_csv(path, test_fraction: float = 0.3, seed: int = 0) -> Dataset:
    """Read a dataset CSV, label in the last column.

    Files written by :func:`save_dataset_csv` carry their own split column.
    Plain feature/label CSVs are split randomly with ``test_fraction``.
    """
    lines = Path(path).read_text().splitlines()
    n_classes = 0
    offset = 0
    if lines and lines[0].startswith("#"):
        header = lines[0]
        if header.startswith(DATASET_MAGIC):
            for tok in header[len(DATASET_MAGIC):].split():
                if tok.startswith("n_classes="):
                    n_classes = int(tok.split("=", 1)[1])
        elif header.startswith("# radarlab-dataset"):
            raise ModelFormatError(f"{path}: unsupported dataset header {header!r}")
        lines = lines[1:]
        offset = 1
    rows, splits = [], []
    for lineno, line in enumerate(lines, start=1 + offset):
        if not line.strip():
            continue
        cells = line.split(",")
        if cells[0] in ("train", "test"):
            splits.append(cells[0])
            cells = cells[1:]
        try:
            rows.append([float(c) for c in cells])
        except ValueError as exc:
            raise ModelFormatError(f"{path}: line {lineno}: {exc}") from exc
    if not rows or len({len(r) for r in rows}) != 1:
        raise ModelFormatError(f"{path}: empty file or ragged rows")
    data = np.array(rows)
    x, y = data[:, :-1], data[:, -1].astype(np.int64)
    if splits and len(splits) == len(rows):
        tr = np.array([s == "train" for s in splits])
    else:
        rng = np.random.default_rng(seed)
        tr = np.ones(len(y), dtype=bool)
        tr[rng.permutation(len(y))[:int(round(test_fraction * len(y)))]] = False
    return Dataset(x[tr], y[tr], x[~tr], y[~tr], n_classes)
