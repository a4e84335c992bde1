"""Layered dense model with exact per-layer gradients.

The simulator treats a layer as the unit of selection: each layer owns a
weight matrix and a bias vector, and backprop returns one gradient block per
layer so callers can mask, accumulate, and aggregate them independently.
Everything is float64. Models are immutable after construction (parameter
arrays are marked read-only) and updates return new models, so clients can
train concurrently on clones without sharing mutable state.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .rng import child_rng

KIND_AFFINE = "affine"
KIND_AFFINE_TANH = "affine+tanh"
LAYER_KINDS = (KIND_AFFINE, KIND_AFFINE_TANH)


class ConfigError(ValueError):
    """Invalid model or experiment configuration."""


@dataclass(frozen=True)
class LayerSpec:
    """One dense layer: y = x @ W.T + b, optionally followed by tanh."""

    kind: str
    input_dim: int
    output_dim: int
    trainable: bool = True

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ConfigError(f"unknown layer kind {self.kind!r}, expected one of {LAYER_KINDS}")
        if self.input_dim < 1 or self.output_dim < 1:
            raise ConfigError(f"layer dims must be positive, got {self.input_dim}x{self.output_dim}")

    @property
    def param_count(self) -> int:
        return self.output_dim * (self.input_dim + 1)


def validate_chain(specs) -> None:
    if not specs:
        raise ConfigError("a model needs at least one layer")
    for k in range(len(specs) - 1):
        if specs[k].output_dim != specs[k + 1].input_dim:
            raise ConfigError(
                f"dims chain broken at layer {k}: output_dim {specs[k].output_dim} "
                f"!= layer {k + 1} input_dim {specs[k + 1].input_dim}"
            )


@dataclass(frozen=True)
class Batch:
    """A batch of inputs with integer class labels."""

    inputs: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        inputs = np.asarray(self.inputs, dtype=np.float64)
        labels = np.asarray(self.labels)
        if inputs.ndim != 2 or inputs.shape[0] < 1:
            raise ConfigError(f"batch inputs must be (batch_size>=1, dim), got {inputs.shape}")
        if labels.shape != (inputs.shape[0],):
            raise ConfigError(f"labels shape {labels.shape} does not match batch size {inputs.shape[0]}")
        if not np.issubdtype(labels.dtype, np.integer):
            raise ConfigError("labels must be integer class ids")
        object.__setattr__(self, "inputs", inputs)
        object.__setattr__(self, "labels", labels.astype(np.int64))

    @property
    def size(self) -> int:
        return self.inputs.shape[0]


class LayeredModel:
    """Ordered dense layers with addressable per-layer parameter blocks."""

    __slots__ = ("specs", "weights", "biases")

    def __init__(self, specs, weights, biases):
        specs = tuple(specs)
        validate_chain(specs)
        if len(weights) != len(specs) or len(biases) != len(specs):
            raise ConfigError("one weight matrix and one bias vector per layer required")
        ws, bs = [], []
        for k, spec in enumerate(specs):
            w = np.asarray(weights[k], dtype=np.float64)
            b = np.asarray(biases[k], dtype=np.float64)
            if w.shape != (spec.output_dim, spec.input_dim):
                raise ConfigError(f"layer {k} weight shape {w.shape} != {(spec.output_dim, spec.input_dim)}")
            if b.shape != (spec.output_dim,):
                raise ConfigError(f"layer {k} bias shape {b.shape} != {(spec.output_dim,)}")
            w.setflags(write=False)
            b.setflags(write=False)
            ws.append(w)
            bs.append(b)
        object.__setattr__(self, "specs", specs)
        object.__setattr__(self, "weights", ws)
        object.__setattr__(self, "biases", bs)

    def __setattr__(self, name, value):
        raise AttributeError("LayeredModel is immutable")

    @property
    def num_layers(self) -> int:
        return len(self.specs)

    @property
    def tunable_layers(self) -> tuple:
        """Indices of trainable layers: the selectable set, in order."""
        return tuple(k for k, s in enumerate(self.specs) if s.trainable)

    @property
    def num_tunable(self) -> int:
        return len(self.tunable_layers)

    @property
    def total_params(self) -> int:
        return sum(s.param_count for s in self.specs)

    @property
    def input_dim(self) -> int:
        return self.specs[0].input_dim

    @property
    def num_classes(self) -> int:
        return self.specs[-1].output_dim

    def layer_norm(self, k: int) -> float:
        """Euclidean norm of layer k's full parameter block (weights + bias)."""
        w, b = self.weights[k], self.biases[k]
        return math.sqrt(float(np.dot(w.ravel(), w.ravel())) + float(np.dot(b, b)))

    def params_bytes(self) -> bytes:
        """Flat little-endian float64 snapshot, layer-major (W then b per layer)."""
        chunks = []
        for w, b in zip(self.weights, self.biases):
            chunks.append(np.ascontiguousarray(w, dtype="<f8").tobytes())
            chunks.append(np.ascontiguousarray(b, dtype="<f8").tobytes())
        return b"".join(chunks)

    @classmethod
    def from_bytes(cls, specs, raw: bytes) -> "LayeredModel":
        specs = tuple(specs)
        flat = np.frombuffer(raw, dtype="<f8")
        expected = sum(s.param_count for s in specs)
        if flat.size != expected:
            raise ConfigError(f"snapshot holds {flat.size} values, model needs {expected}")
        ws, bs, pos = [], [], 0
        for s in specs:
            n_w = s.output_dim * s.input_dim
            ws.append(flat[pos:pos + n_w].reshape(s.output_dim, s.input_dim).copy())
            pos += n_w
            bs.append(flat[pos:pos + s.output_dim].copy())
            pos += s.output_dim
        return cls(specs, ws, bs)


def init_model(specs, seed: int, scheme: str = "glorot") -> LayeredModel:
    """Build a model with deterministic parameters for a given seed.

    scheme "glorot" draws uniform(-a, a) with a = sqrt(6 / (fan_in + fan_out));
    scheme "identity" sets square weight matrices to I and biases to zero.
    """
    specs = tuple(specs)
    validate_chain(specs)
    ws, bs = [], []
    if scheme == "glorot":
        rng = child_rng(seed, "init")
        for s in specs:
            a = math.sqrt(6.0 / (s.input_dim + s.output_dim))
            ws.append(rng.uniform(-a, a, size=(s.output_dim, s.input_dim)))
            bs.append(np.zeros(s.output_dim))
    elif scheme == "identity":
        for k, s in enumerate(specs):
            if s.input_dim != s.output_dim:
                raise ConfigError(f"identity init needs square layers, layer {k} is {s.input_dim}x{s.output_dim}")
            ws.append(np.eye(s.output_dim))
            bs.append(np.zeros(s.output_dim))
    else:
        raise ConfigError(f"unknown init scheme {scheme!r}")
    return LayeredModel(specs, ws, bs)


class GradientVector:
    """Per-layer gradient blocks mirroring a model's parameter shapes.

    Caches the Euclidean norm of every layer block (weights and bias
    concatenated) at construction.
    """

    __slots__ = ("d_weights", "d_biases", "layer_norms")

    def __init__(self, d_weights, d_biases):
        if len(d_weights) != len(d_biases):
            raise ConfigError("one weight block and one bias block per layer required")
        self.d_weights = [np.asarray(w, dtype=np.float64) for w in d_weights]
        self.d_biases = [np.asarray(b, dtype=np.float64) for b in d_biases]
        self.layer_norms = np.array(
            [
                math.sqrt(float(np.dot(w.ravel(), w.ravel())) + float(np.dot(b, b)))
                for w, b in zip(self.d_weights, self.d_biases)
            ]
        )

    @classmethod
    def zeros_like(cls, model: LayeredModel) -> "GradientVector":
        return cls(
            [np.zeros_like(w) for w in model.weights],
            [np.zeros_like(b) for b in model.biases],
        )

    @property
    def num_layers(self) -> int:
        return len(self.d_weights)

    def block_elements(self, k: int) -> np.ndarray:
        """Layer k's gradient entries as one flat vector (weights then bias)."""
        return np.concatenate([self.d_weights[k].ravel(), self.d_biases[k]])

    def total_norm(self) -> float:
        return math.sqrt(float(np.sum(self.layer_norms ** 2)))

    def masked(self, mask, layer_indices) -> "GradientVector":
        """Zero every block except the selected ones among layer_indices."""
        mask = np.asarray(mask)
        if mask.shape != (len(layer_indices),):
            raise ConfigError(f"mask length {mask.shape} != number of selectable layers {len(layer_indices)}")
        ws = [np.zeros_like(w) for w in self.d_weights]
        bs = [np.zeros_like(b) for b in self.d_biases]
        for j, layer in enumerate(layer_indices):
            if mask[j]:
                ws[layer] = self.d_weights[layer]
                bs[layer] = self.d_biases[layer]
        return GradientVector(ws, bs)


def _check_batch(model: LayeredModel, batch: Batch) -> None:
    if batch.inputs.shape[1] != model.input_dim:
        raise ConfigError(f"batch dim {batch.inputs.shape[1]} != model input dim {model.input_dim}")
    if batch.labels.min() < 0 or batch.labels.max() >= model.num_classes:
        raise ConfigError(f"labels outside [0, {model.num_classes})")


def _activations(model: LayeredModel, inputs: np.ndarray):
    acts = [inputs]
    x = inputs
    for spec, w, b in zip(model.specs, model.weights, model.biases):
        x = x @ w.T + b
        if spec.kind == KIND_AFFINE_TANH:
            x = np.tanh(x)
        acts.append(x)
    return acts


def _softmax_and_loss(logits: np.ndarray, labels: np.ndarray):
    shift = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shift)
    total = exp.sum(axis=1, keepdims=True)
    probs = exp / total
    log_probs = shift - np.log(total)
    loss = float(-log_probs[np.arange(labels.size), labels].mean())
    return probs, loss


def forward(model: LayeredModel, batch: Batch):
    """Run the model on a batch; returns (logits, mean cross-entropy loss)."""
    _check_batch(model, batch)
    logits = _activations(model, batch.inputs)[-1]
    _, loss = _softmax_and_loss(logits, batch.labels)
    return logits, loss


def backward(model: LayeredModel, batch: Batch) -> GradientVector:
    """Exact analytic gradient of the batch loss for every layer.

    All layers get a block, trainable or not; masking is the caller's job.
    """
    _check_batch(model, batch)
    acts = _activations(model, batch.inputs)
    probs, _ = _softmax_and_loss(acts[-1], batch.labels)
    batch_size = batch.size

    grad = probs
    grad[np.arange(batch_size), batch.labels] -= 1.0
    grad /= batch_size

    d_weights = [None] * model.num_layers
    d_biases = [None] * model.num_layers
    for k in range(model.num_layers - 1, -1, -1):
        out = acts[k + 1]
        if model.specs[k].kind == KIND_AFFINE_TANH:
            grad = grad * (1.0 - out * out)
        d_weights[k] = grad.T @ acts[k]
        d_biases[k] = grad.sum(axis=0)
        if k > 0:
            grad = grad @ model.weights[k]
    return GradientVector(d_weights, d_biases)


def apply_masked_update(model: LayeredModel, update: GradientVector, mask, eta: float) -> LayeredModel:
    """Return a model with selected layers stepped by -eta * block.

    Layers whose mask bit is 0 (and non-trainable layers) keep their exact
    parameter arrays, so they stay byte-identical to the input model.
    """
    if eta < 0:
        raise ConfigError(f"eta must be non-negative, got {eta}")
    tunable = model.tunable_layers
    mask = np.asarray(mask)
    if mask.shape != (len(tunable),):
        raise ConfigError(f"mask length {mask.shape} != number of selectable layers {len(tunable)}")
    if update.num_layers != model.num_layers:
        raise ConfigError("update does not match the model's layer count")

    ws = list(model.weights)
    bs = list(model.biases)
    for j, layer in enumerate(tunable):
        if mask[j]:
            if update.d_weights[layer].shape != ws[layer].shape:
                raise ConfigError(f"update block {layer} shape mismatch")
            ws[layer] = ws[layer] - eta * update.d_weights[layer]
            bs[layer] = bs[layer] - eta * update.d_biases[layer]
    return LayeredModel(model.specs, ws, bs)


def mlp_specs(layer_dims, hidden_kind: str = KIND_AFFINE_TANH, frozen_layers=()) -> tuple:
    """Specs for a plain MLP: hidden layers of hidden_kind, affine output."""
    if len(layer_dims) < 2:
        raise ConfigError("layer_dims needs at least input and output sizes")
    frozen = set(frozen_layers)
    bad = frozen - set(range(len(layer_dims) - 1))
    if bad:
        raise ConfigError(f"frozen layer indices {sorted(bad)} out of range")
    specs = []
    for k in range(len(layer_dims) - 1):
        kind = hidden_kind if k < len(layer_dims) - 2 else KIND_AFFINE
        specs.append(
            LayerSpec(kind=kind, input_dim=layer_dims[k], output_dim=layer_dims[k + 1], trainable=k not in frozen)
        )
    if not any(s.trainable for s in specs):
        warnings.warn("model has no trainable layers; nothing can be selected")
    return tuple(specs)
