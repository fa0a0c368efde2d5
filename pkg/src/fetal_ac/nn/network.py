"""Layer stacks, parameter containers and the softmax cross-entropy loss."""
from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from ..errors import DimensionError, NumericError, ParameterError
from .layers import Dense, Dropout, Layer, LayerSpec, make_layer, output_shape


def shape_trace(in_shape: tuple, specs: list[LayerSpec]) -> list[tuple]:
    """Per-layer output shapes (batch axis excluded) for a stack of specs."""
    shapes, cur = [], tuple(in_shape)
    for spec in specs:
        cur = output_shape(spec, cur)
        shapes.append(cur)
    return shapes


class Sequential:
    """An ordered stack of layers with a fixed input shape."""

    def __init__(self, in_shape: tuple, specs: list[LayerSpec], dtype=np.float32, prefix: str = ""):
        self.in_shape = tuple(in_shape)
        self.specs = list(specs)
        self.dtype = dtype
        self.layers: list[Layer] = []
        cur = self.in_shape
        for i, spec in enumerate(self.specs):
            layer = make_layer(spec, cur, dtype)
            layer.name = f"{prefix}{i}"
            self.layers.append(layer)
            cur = output_shape(spec, cur)
        self.out_shape = cur

    def insert_dropout(self, after: int, rate: float, rng) -> None:
        """Place a dropout layer right after layer index ``after``."""
        d = Dropout(rate, rng)
        d.name = f"{self.layers[after].name}.dropout"
        self.layers.insert(after + 1, d)

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        for layer in self.layers:
            x = layer.forward(x, train)
        return x

    def backward(self, dout: np.ndarray) -> np.ndarray:
        for layer in reversed(self.layers):
            dout = layer.backward(dout)
        return dout

    def named_params(self) -> "OrderedDict[str, np.ndarray]":
        out = OrderedDict()
        for layer in self.layers:
            for k, v in layer.params.items():
                out[f"{layer.name}.{k}"] = v
        return out

    def named_grads(self) -> "OrderedDict[str, np.ndarray]":
        out = OrderedDict()
        for layer in self.layers:
            for k, v in layer.grads.items():
                out[f"{layer.name}.{k}"] = v
        return out


def init_gaussian(params: dict[str, np.ndarray], rng: np.random.Generator, std: float = 0.01) -> None:
    """Zero-mean Gaussian weights, zero biases; draws happen in dict order."""
    for name, p in params.items():
        if name.endswith(".b"):
            p[...] = 0
        else:
            p[...] = rng.normal(0.0, std, size=p.shape)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits: np.ndarray, label) -> tuple[float, np.ndarray]:
    """Mean cross-entropy of softmax(logits) against integer labels.

    Accepts a single logit vector with a scalar label, or an ``(N, K)`` batch
    with ``N`` labels. The returned gradient is with respect to the logits
    (``softmax - one_hot``, divided by ``N`` for batches).
    """
    logits = np.asarray(logits)
    if not np.all(np.isfinite(logits)):
        raise NumericError("non-finite logits")
    single = logits.ndim == 1
    z = logits[None] if single else logits
    labels = np.atleast_1d(np.asarray(label, dtype=np.int64))
    k = z.shape[1]
    if labels.shape[0] != z.shape[0]:
        raise DimensionError("one label per logit row required")
    if np.any(labels < 0) or np.any(labels >= k):
        raise ParameterError(f"label out of range for {k} classes")
    shifted = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=1))
    logp = shifted[np.arange(len(labels)), labels] - logsum
    loss = float(-logp.mean())
    grad = softmax(z)
    grad[np.arange(len(labels)), labels] -= 1
    if single:
        return loss, grad[0]
    return loss, grad / z.shape[0]


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


@dataclass
class NetParams:
    """Named parameter arrays (shared with the layers) plus optimizer state."""

    arrays: "OrderedDict[str, np.ndarray]"
    adam: AdamState = field(default_factory=AdamState)
    rng_seed: int = 0

    def copy_arrays(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, v.copy()) for k, v in self.arrays.items())

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for k, v in self.arrays.items():
            if k not in arrays:
                raise DimensionError(f"missing parameter {k}")
            if arrays[k].shape != v.shape:
                raise DimensionError(f"{k}: shape {arrays[k].shape} != {v.shape}")
            v[...] = arrays[k]


def fc_forward(x: np.ndarray, weights: np.ndarray, bias: np.ndarray, activation: str = "none") -> np.ndarray:
    """Stand-alone ``activation(W x + b)`` with ``weights`` of shape ``(out, in)``."""
    x = np.asarray(x).ravel()
    if weights.ndim != 2 or weights.shape[1] != x.shape[0]:
        raise DimensionError(f"weight matrix {weights.shape} incompatible with input {x.shape}")
    if bias.shape != (weights.shape[0],):
        raise DimensionError("bias length must equal output length")
    z = weights @ x + bias
    return np.maximum(z, 0) if activation == "relu" else z


def conv_forward(x: np.ndarray, spec: LayerSpec, weights: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Single-image convolution: ``x`` is (H, W, C), ``weights`` (fh, fw, C, K)."""
    layer = make_layer(spec, x.shape, x.dtype)
    layer.params["W"][...] = weights
    layer.params["b"][...] = bias
    return layer.forward(x[None])[0]


def maxpool_forward(x: np.ndarray, spec: LayerSpec) -> np.ndarray:
    layer = make_layer(spec, x.shape)
    return layer.forward(x[None])[0]


__all__ = [
    "AdamState",
    "Dense",
    "NetParams",
    "Sequential",
    "conv_forward",
    "fc_forward",
    "init_gaussian",
    "maxpool_forward",
    "shape_trace",
    "softmax",
    "softmax_cross_entropy",
]
