"""Small dense-network engine: forward pass, cross-entropy losses and exact
(per-sample) gradients for ReLU MLP classifiers, all in float64."""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .exceptions import DomainError, NumericError, ShapeError


class Activation(enum.IntEnum):
    IDENTITY = 0
    RELU = 1


@dataclass(frozen=True)
class DenseLayer:
    weights: np.ndarray
    bias: np.ndarray
    activation: Activation = Activation.RELU

    def __post_init__(self):
        w = np.array(self.weights, dtype=np.float64)
        b = np.array(self.bias, dtype=np.float64).reshape(-1)
        if w.ndim != 2:
            raise ShapeError(f"weights must be 2-D, got shape {w.shape}")
        if b.shape[0] != w.shape[0]:
            raise ShapeError(f"bias length {b.shape[0]} != weight rows {w.shape[0]}")
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
            raise NumericError("non-finite layer parameters")
        w.setflags(write=False)
        b.setflags(write=False)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "bias", b)
        object.__setattr__(self, "activation", Activation(self.activation))

    @property
    def n_in(self) -> int:
        return self.weights.shape[1]

    @property
    def n_out(self) -> int:
        return self.weights.shape[0]

    def replace(self, weights=None, bias=None, activation=None) -> "DenseLayer":
        return DenseLayer(
            self.weights if weights is None else weights,
            self.bias if bias is None else bias,
            self.activation if activation is None else activation,
        )


@dataclass(frozen=True)
class ModelParams:
    """Ordered dense layers; ``layers[:split_index]`` is the feature
    extractor, the rest is the classifier head."""

    layers: tuple[DenseLayer, ...]
    split_index: int = 1

    def __post_init__(self):
        layers = tuple(self.layers)
        object.__setattr__(self, "layers", layers)
        if not layers:
            raise ShapeError("model needs at least one layer")
        for i in range(1, len(layers)):
            if layers[i].n_in != layers[i - 1].n_out:
                raise ShapeError(
                    f"layer {i} expects {layers[i].n_in} inputs, "
                    f"layer {i - 1} produces {layers[i - 1].n_out}"
                )
        if len(layers) > 1 and not 1 <= self.split_index < len(layers):
            raise ShapeError(f"split_index {self.split_index} out of range")

    def __len__(self) -> int:
        return len(self.layers)

    def __iter__(self) -> Iterator[DenseLayer]:
        return iter(self.layers)

    @property
    def n_in(self) -> int:
        return self.layers[0].n_in

    @property
    def n_classes(self) -> int:
        return self.layers[-1].n_out

    def shapes(self) -> tuple:
        """Architecture fingerprint: per-layer (rows, cols, activation)."""
        return tuple((l.n_out, l.n_in, int(l.activation)) for l in self.layers)

    def with_layer(self, index: int, layer: DenseLayer) -> "ModelParams":
        layers = list(self.layers)
        layers[index] = layer
        return ModelParams(tuple(layers), self.split_index)

    def flat(self) -> np.ndarray:
        return np.concatenate([np.concatenate([l.weights.ravel(), l.bias]) for l in self.layers])

    def digest(self) -> str:
        import hashlib

        return hashlib.sha256(self.flat().tobytes()).hexdigest()[:16]

    def apply_update(self, grads: "GradientSet", step: float) -> "ModelParams":
        """Return ``self - step * grads``; raises NumericError on overflow."""
        out = []
        for i, (layer, gw, gb) in enumerate(zip(self.layers, grads.weights, grads.biases)):
            w = layer.weights - step * gw
            b = layer.bias - step * gb
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise NumericError(f"non-finite parameters in layer {i}", layer=i)
            out.append(DenseLayer(w, b, layer.activation))
        return ModelParams(tuple(out), self.split_index)


@dataclass(frozen=True)
class GradientSet:
    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]

    def __add__(self, other: "GradientSet") -> "GradientSet":
        return GradientSet(
            tuple(a + b for a, b in zip(self.weights, other.weights)),
            tuple(a + b for a, b in zip(self.biases, other.biases)),
        )

    def scale(self, c: float) -> "GradientSet":
        return GradientSet(tuple(c * w for w in self.weights), tuple(c * b for b in self.biases))

    def flat(self) -> np.ndarray:
        return np.concatenate([np.concatenate([w.ravel(), b]) for w, b in zip(self.weights, self.biases)])

    def norm(self) -> float:
        return float(np.linalg.norm(self.flat()))


@dataclass(frozen=True)
class LabeledDataset:
    features: np.ndarray
    labels: np.ndarray
    n_classes: int | None = field(default=None, compare=False)

    def __post_init__(self):
        x = np.array(self.features, dtype=np.float64)
        if x.ndim == 1:
            x = x.reshape(1, -1) if x.size else x.reshape(0, 0)
        y = np.array(self.labels, dtype=np.int64).reshape(-1)
        if x.shape[0] != y.shape[0]:
            raise ShapeError(f"{x.shape[0]} feature rows but {y.shape[0]} labels")
        if not np.all(np.isfinite(x)):
            raise NumericError("non-finite feature entries")
        if y.size and y.min() < 0:
            raise DomainError("labels must be non-negative")
        x.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "labels", y)

    def __len__(self) -> int:
        return self.labels.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, indices: Sequence[int]) -> "LabeledDataset":
        idx = np.asarray(indices, dtype=np.int64)
        return LabeledDataset(self.features[idx], self.labels[idx], self.n_classes)

    def concat(self, other: "LabeledDataset") -> "LabeledDataset":
        return LabeledDataset(
            np.vstack([self.features, other.features]),
            np.concatenate([self.labels, other.labels]),
            self.n_classes,
        )


# --------------------------------------------------------------------------
# construction


def init_model(sizes: Sequence[int], split_index: int = 1, seed: int = 0) -> ModelParams:
    """Fan-in uniform init, ReLU on every layer except the last."""
    rng = np.random.default_rng(seed)
    layers = []
    for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        bound = 1.0 / np.sqrt(n_in)
        act = Activation.IDENTITY if i == len(sizes) - 2 else Activation.RELU
        layers.append(
            DenseLayer(rng.uniform(-bound, bound, (n_out, n_in)), rng.uniform(-bound, bound, n_out), act)
        )
    return ModelParams(tuple(layers), split_index)


def desk_model(n_in: int, n_classes: int, head_width: int = 16, seed: int = 0) -> ModelParams:
    """Reference network: n_in -> 32 -> 16 (feature extractor) -> head_width -> n_classes."""
    return init_model([n_in, 32, 16, head_width, n_classes], split_index=2, seed=seed)


# --------------------------------------------------------------------------
# forward / backward


def _as_batch(model: ModelParams, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != model.n_in:
        raise ShapeError(f"input width {x.shape[-1]} does not match model input {model.n_in}")
    return x


def _forward_cache(model: ModelParams, x: np.ndarray):
    """Layer inputs and pre-activations for a batch."""
    inputs, pre = [], []
    a = x
    for layer in model.layers:
        inputs.append(a)
        z = a @ layer.weights.T + layer.bias
        pre.append(z)
        a = np.maximum(z, 0.0) if layer.activation == Activation.RELU else z
    return inputs, pre, a


def forward(model: ModelParams, x) -> np.ndarray:
    """Logits for one input vector (1-D result) or a batch (2-D)."""
    arr = np.asarray(x, dtype=np.float64)
    out = _forward_cache(model, _as_batch(model, arr))[2]
    return out[0] if arr.ndim == 1 else out


def layer_inputs(model: ModelParams, x, layer: int) -> np.ndarray:
    """Activations entering ``layer`` for a batch (the embedding when
    ``layer == split_index``)."""
    a = _as_batch(model, x)
    for l in model.layers[:layer]:
        a = a @ l.weights.T + l.bias
        if l.activation == Activation.RELU:
            a = np.maximum(a, 0.0)
    return a


def pre_activations(model: ModelParams, x, layer: int) -> np.ndarray:
    l = model.layers[layer]
    return layer_inputs(model, x, layer) @ l.weights.T + l.bias


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    m = logits.max(axis=1, keepdims=True)
    shifted = logits - m
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def _check_labels(model: ModelParams, data: LabeledDataset):
    if len(data) == 0:
        raise DomainError("dataset is empty")
    if data.features.shape[1] != model.n_in:
        raise ShapeError(f"feature width {data.features.shape[1]} != model input {model.n_in}")
    if data.labels.max() >= model.n_classes:
        raise DomainError(f"label {data.labels.max()} outside [0, {model.n_classes})")


def per_sample_losses(model: ModelParams, data: LabeledDataset) -> np.ndarray:
    _check_labels(model, data)
    logits = forward(model, data.features)
    logp = _log_softmax(logits)
    losses = -logp[np.arange(len(data)), data.labels]
    # log-sum-exp can return -0.0 or a hair below zero
    return np.maximum(losses, 0.0)


def _output_deltas(model: ModelParams, data: LabeledDataset, sample_weight=None):
    """Per-sample dL/d(pre-activation) for every layer, plus layer inputs."""
    inputs, pre, logits = _forward_cache(model, data.features)
    p = np.exp(_log_softmax(logits))
    delta = p
    delta[np.arange(len(data)), data.labels] -= 1.0
    if sample_weight is not None:
        delta *= np.asarray(sample_weight, dtype=np.float64).reshape(-1, 1)
    deltas = [None] * len(model.layers)
    for i in range(len(model.layers) - 1, -1, -1):
        layer = model.layers[i]
        if layer.activation == Activation.RELU:
            delta = delta * (pre[i] > 0.0)
        deltas[i] = delta
        if i:
            delta = delta @ layer.weights
    return inputs, deltas


def batch_gradient(model: ModelParams, batch: LabeledDataset, sample_weight=None) -> GradientSet:
    """Gradient of the summed cross-entropy over ``batch``, optionally with
    one weight per sample (negative weights ascend that sample's loss)."""
    _check_labels(model, batch)
    if sample_weight is not None and np.shape(sample_weight) != (len(batch),):
        raise ShapeError("sample_weight needs one entry per sample")
    inputs, deltas = _output_deltas(model, batch, sample_weight)
    return GradientSet(
        tuple(d.T @ a for d, a in zip(deltas, inputs)),
        tuple(d.sum(axis=0) for d in deltas),
    )


def per_sample_grad_norms(model: ModelParams, data: LabeledDataset) -> np.ndarray:
    """L2 norm of each single-sample gradient over all parameters.

    The weight gradient of one sample is an outer product, so its squared
    Frobenius norm factors as ``|delta|^2 * |input|^2``."""
    _check_labels(model, data)
    inputs, deltas = _output_deltas(model, data)
    sq = np.zeros(len(data))
    for d, a in zip(deltas, inputs):
        dd = np.einsum("ij,ij->i", d, d)
        sq += dd * (np.einsum("ij,ij->i", a, a) + 1.0)
    return np.sqrt(sq)


def local_train(
    model: ModelParams,
    data: LabeledDataset,
    steps: int,
    batch_size: int,
    lr: float,
    seed: int = 0,
) -> ModelParams:
    """Plain mini-batch SGD on the mean loss; batches drawn from a seeded
    permutation that is refreshed each epoch."""
    if steps < 1 or batch_size < 1:
        raise DomainError("steps and batch_size must be >= 1")
    if lr < 0:
        raise DomainError("lr must be non-negative")
    if len(data) == 0:
        raise DomainError("dataset is empty")
    rng = np.random.default_rng(seed)
    bs = min(batch_size, len(data))
    order = rng.permutation(len(data))
    pos = 0
    for _ in range(steps):
        if pos + bs > len(data):
            order = rng.permutation(len(data))
            pos = 0
        batch = data.subset(order[pos : pos + bs])
        pos += bs
        model = model.apply_update(batch_gradient(model, batch), lr / bs)
    return model


def accuracy(model: ModelParams, data: LabeledDataset) -> float:
    return float(np.mean(np.argmax(forward(model, data.features), axis=1) == data.labels))


# --------------------------------------------------------------------------
# checkpoint format: b"GIA1", u32 layers, u32 split, then per layer
# u32 rows, u32 cols, u8 activation, f64 weights (row-major), f64 biases

MAGIC = b"GIA1"


def dumps(model: ModelParams) -> bytes:
    parts = [MAGIC, struct.pack("<II", len(model.layers), model.split_index)]
    for layer in model.layers:
        parts.append(struct.pack("<IIB", layer.n_out, layer.n_in, int(layer.activation)))
        parts.append(np.ascontiguousarray(layer.weights, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(layer.bias, dtype="<f8").tobytes())
    return b"".join(parts)


def loads(buf: bytes) -> ModelParams:
    if buf[:4] != MAGIC:
        raise ShapeError("not a GIA1 checkpoint")
    try:
        n_layers, split = struct.unpack_from("<II", buf, 4)
        off = 12
        layers = []
        for _ in range(n_layers):
            rows, cols, act = struct.unpack_from("<IIB", buf, off)
            off += 9
            w = np.frombuffer(buf, dtype="<f8", count=rows * cols, offset=off).reshape(rows, cols)
            off += 8 * rows * cols
            b = np.frombuffer(buf, dtype="<f8", count=rows, offset=off)
            off += 8 * rows
            layers.append(DenseLayer(w.astype(np.float64), b.astype(np.float64), Activation(act)))
    except (struct.error, ValueError) as exc:
        raise ShapeError(f"truncated or corrupt checkpoint: {exc}") from exc
    if off != len(buf):
        raise ShapeError(f"{len(buf) - off} trailing bytes in checkpoint")
    return ModelParams(tuple(layers), split)


def save_checkpoint(model: ModelParams, path) -> None:
    Path(path).write_bytes(dumps(model))


def load_checkpoint(path) -> ModelParams:
    return loads(Path(path).read_bytes())
