"""Small dense-network engine: forward pass, exact backprop and plain SGD.

All parameters of a :class:`DenseNet` live in one contiguous float64 vector.
Per-layer weight and bias arrays are views into that vector, so flattening is
a copy and perturbing a net is a single vector addition.  The layout is
layer-major; inside a layer the weight matrix comes first (row-major,
shape ``[out, in]``) followed by the bias.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Sequence

import numpy as np

from .errors import ConfigError, InputError, NumericError, UsageError


class Activation(str, Enum):
    RELU = "relu"
    IDENTITY = "identity"


@dataclass
class Layer:
    weight: np.ndarray
    bias: np.ndarray
    activation: Activation

    @property
    def in_size(self) -> int:
        return self.weight.shape[1]

    @property
    def out_size(self) -> int:
        return self.weight.shape[0]


def _bind(buffer: np.ndarray, sizes: Sequence[int], activations: Sequence[Activation]) -> list[Layer]:
    layers = []
    offset = 0
    for fan_in, fan_out, act in zip(sizes[:-1], sizes[1:], activations):
        w = buffer[offset : offset + fan_in * fan_out].reshape(fan_out, fan_in)
        offset += fan_in * fan_out
        b = buffer[offset : offset + fan_out]
        offset += fan_out
        layers.append(Layer(w, b, Activation(act)))
    return layers


def _count(sizes: Sequence[int]) -> int:
    return sum(a * b + b for a, b in zip(sizes[:-1], sizes[1:]))


class DenseNet:
    """A chain of fully connected layers.

    ``sizes`` lists the width of every interface, so a net with sizes
    ``(4, 3, 2)`` has two layers (4->3 and 3->2).  ``activations`` holds one
    tag per layer.
    """

    def __init__(
        self,
        sizes: Sequence[int],
        activations: Sequence[Activation | str],
        params: np.ndarray | None = None,
    ):
        sizes = tuple(int(s) for s in sizes)
        if len(sizes) < 2 or any(s < 1 for s in sizes):
            raise ConfigError(f"layer sizes must list at least two positive widths, got {sizes}")
        if len(activations) != len(sizes) - 1:
            raise ConfigError(
                f"need {len(sizes) - 1} activation tags for sizes {sizes}, got {len(activations)}"
            )
        self.sizes = sizes
        self.activations = tuple(Activation(a) for a in activations)
        n = _count(sizes)
        if params is None:
            self.params = np.zeros(n)
        else:
            params = np.asarray(params, dtype=np.float64)
            if params.shape != (n,):
                raise UsageError(f"expected {n} parameters, got shape {params.shape}")
            self.params = params.copy()
        self.layers = _bind(self.params, self.sizes, self.activations)
        # bumped on every in-place parameter change; tapes remember it
        self.version = 0

    @classmethod
    def from_layers(cls, layers: Sequence[tuple[np.ndarray, np.ndarray, Activation | str]]) -> "DenseNet":
        """Build a net from explicit ``(weight, bias, activation)`` triples."""
        if not layers:
            raise ConfigError("a net needs at least one layer")
        sizes = [np.asarray(layers[0][0]).shape[1]]
        for k, (w, b, _) in enumerate(layers):
            w = np.asarray(w, dtype=np.float64)
            b = np.asarray(b, dtype=np.float64)
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ConfigError(f"layer {k}: weight {w.shape} and bias {b.shape} disagree")
            if w.shape[1] != sizes[-1]:
                raise ConfigError(
                    f"layer {k} expects input size {w.shape[1]} but previous layer emits {sizes[-1]}"
                )
            sizes.append(w.shape[0])
        net = cls(sizes, [act for _, _, act in layers])
        for layer, (w, b, _) in zip(net.layers, layers):
            layer.weight[...] = w
            layer.bias[...] = b
        net._check_finite()
        return net

    @property
    def param_count(self) -> int:
        return self.params.size

    @property
    def in_size(self) -> int:
        return self.sizes[0]

    @property
    def out_size(self) -> int:
        return self.sizes[-1]

    def copy(self) -> "DenseNet":
        return DenseNet(self.sizes, self.activations, self.params)

    def flatten(self) -> np.ndarray:
        return self.params.copy()

    def unflatten(self, values: np.ndarray) -> "DenseNet":
        """Return a net with this topology and the given flat parameters."""
        return DenseNet(self.sizes, self.activations, values)

    def set_flat(self, values: np.ndarray) -> None:
        values = np.asarray(values, dtype=np.float64)
        if values.shape != self.params.shape:
            raise UsageError(f"expected {self.param_count} parameters, got shape {values.shape}")
        self.params[...] = values
        self.version += 1

    def _check_finite(self) -> None:
        if not np.isfinite(self.params).all():
            raise NumericError("non-finite parameter value")

    def __repr__(self) -> str:
        acts = ",".join(a.value for a in self.activations)
        return f"DenseNet(sizes={self.sizes}, activations=[{acts}])"


def init_dense_net(
    sizes: Sequence[int],
    activations: Sequence[Activation | str],
    rng: np.random.Generator,
) -> DenseNet:
    """Glorot-uniform weights, zero biases, drawn layer by layer from ``rng``."""
    net = DenseNet(sizes, activations)
    for layer in net.layers:
        limit = np.sqrt(6.0 / (layer.in_size + layer.out_size))
        layer.weight[...] = rng.uniform(-limit, limit, size=layer.weight.shape)
    return net


def mlp(sizes: Sequence[int], rng: np.random.Generator, final_activation: Activation | str = "identity") -> DenseNet:
    """ReLU hidden layers with a configurable activation on the last layer."""
    acts = [Activation.RELU] * (len(sizes) - 2) + [Activation(final_activation)]
    return init_dense_net(sizes, acts, rng)


@dataclass
class Tape:
    """Activation record of one forward call."""

    net_id: int
    version: int
    inputs: list[np.ndarray]
    pre_activations: list[np.ndarray]
    squeeze: bool


@dataclass
class GradientBundle:
    param_grad: np.ndarray
    input_grad: np.ndarray


def forward(net: DenseNet, x: np.ndarray) -> tuple[np.ndarray, Tape]:
    """Run ``x`` (a vector or a batch of row vectors) through ``net``."""
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    a = x[None, :] if squeeze else x
    if a.ndim != 2 or a.shape[1] != net.in_size:
        raise ConfigError(f"input of shape {x.shape} does not fit a net expecting {net.in_size} features")
    inputs, pres = [], []
    with np.errstate(over="ignore", invalid="ignore"):
        for layer in net.layers:
            inputs.append(a)
            z = a @ layer.weight.T + layer.bias
            pres.append(z)
            a = np.maximum(z, 0.0) if layer.activation is Activation.RELU else z
    if not np.isfinite(a).all():
        raise NumericError("non-finite network output")
    tape = Tape(id(net), net.version, inputs, pres, squeeze)
    return (a[0] if squeeze else a), tape


def predict(net: DenseNet, x: np.ndarray) -> np.ndarray:
    return forward(net, x)[0]


def backward(net: DenseNet, tape: Tape, output_grad: np.ndarray) -> GradientBundle:
    """Reverse-mode derivatives of ``<output_grad, net(x)>``.

    For a batch the parameter gradient is summed over rows, so passing the
    gradient of a batch-mean loss yields the gradient of that mean.
    """
    if tape.net_id != id(net) or tape.version != net.version:
        raise UsageError("activation tape does not belong to the current state of this net")
    g = np.asarray(output_grad, dtype=np.float64)
    if tape.squeeze:
        g = g[None, :]
    expected = tape.pre_activations[-1].shape
    if g.shape != expected:
        raise UsageError(f"output_grad shape {np.shape(output_grad)} does not match net output {expected}")

    param_grad = np.zeros(net.param_count)
    grad_layers = _bind(param_grad, net.sizes, net.activations)
    for k in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[k]
        if layer.activation is Activation.RELU:
            g = g * (tape.pre_activations[k] > 0.0)
        grad_layers[k].weight[...] = g.T @ tape.inputs[k]
        grad_layers[k].bias[...] = g.sum(axis=0)
        g = g @ layer.weight
    input_grad = g[0] if tape.squeeze else g
    return GradientBundle(param_grad, input_grad)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits: np.ndarray, label) -> tuple[float, np.ndarray]:
    """Cross-entropy of softmax(logits) against an integer label.

    With a ``[B, C]`` batch and ``B`` labels the loss is the batch mean and the
    gradient is scaled by ``1/B`` accordingly.
    """
    logits = np.asarray(logits, dtype=np.float64)
    batched = logits.ndim == 2
    z = logits if batched else logits[None, :]
    labels = np.atleast_1d(np.asarray(label))
    n_classes = z.shape[1]
    if labels.shape != (z.shape[0],) or not np.issubdtype(labels.dtype, np.integer):
        raise InputError(f"labels {label!r} do not match logits of shape {logits.shape}")
    if labels.min() < 0 or labels.max() >= n_classes:
        raise InputError(f"label out of range [0, {n_classes})")
    with np.errstate(over="ignore"):
        # an overflow here means a probability that is exactly zero anyway
        shifted = z - z.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    total = e.sum(axis=1)
    rows = np.arange(z.shape[0])
    losses = np.log(total) - shifted[rows, labels]
    grad = e / total[:, None]
    grad[rows, labels] -= 1.0
    if batched:
        return float(losses.mean()), grad / z.shape[0]
    return float(losses[0]), grad[0]


def sgd_step(net: DenseNet, grad: np.ndarray, eta: float) -> DenseNet:
    """In-place ``w <- w - eta * grad``; returns ``net`` for chaining."""
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != net.params.shape:
        raise UsageError(f"gradient of shape {grad.shape} does not match {net.param_count} parameters")
    if eta < 0:
        raise UsageError(f"learning rate must be non-negative, got {eta}")
    if eta == 0:
        return net
    net.params -= eta * grad
    net.version += 1
    net._check_finite()
    return net


def perturb(net: DenseNet, direction: np.ndarray, mu: float) -> DenseNet:
    """A copy of ``net`` with parameters ``w + mu * direction``."""
    direction = np.asarray(direction, dtype=np.float64)
    if direction.shape != net.params.shape:
        raise UsageError(
            f"direction of shape {direction.shape} does not match {net.param_count} parameters"
        )
    return DenseNet(net.sizes, net.activations, net.params + mu * direction)
