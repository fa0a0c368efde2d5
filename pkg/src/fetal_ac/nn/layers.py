"""Layer implementations operating on NHWC batches.

A single feature map (``Tensor3``) is an ``(H, W, C)`` array; layers work on
batches ``(N, H, W, C)`` so inference over many pixels is one call.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import DimensionError, ParameterError, StateError

CONV = "conv"
MAXPOOL = "maxpool"
FC = "fully-connected"


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    filter_h: int = 1
    filter_w: int = 1
    stride: int = 1
    out_channels: int = 0
    activation: str = "none"
    pool_rounding: str = "floor"

    def __post_init__(self):
        if self.kind not in (CONV, MAXPOOL, FC):
            raise ParameterError(f"unknown layer kind {self.kind!r}")
        if self.activation not in ("relu", "none"):
            raise ParameterError(f"unknown activation {self.activation!r}")
        if self.pool_rounding not in ("floor", "ceil"):
            raise ParameterError(f"unknown pool rounding {self.pool_rounding!r}")
        if self.kind in (CONV, FC) and self.out_channels < 1:
            raise ParameterError(f"{self.kind} requires out_channels >= 1")
        if self.kind == MAXPOOL and self.stride < 1:
            raise ParameterError("maxpool requires stride >= 1")
        if self.kind == CONV and self.stride != 1:
            raise ParameterError("conv layers use stride 1")

    @classmethod
    def conv(cls, size: int, out_channels: int, activation: str = "relu") -> "LayerSpec":
        return cls(CONV, size, size, 1, out_channels, activation)

    @classmethod
    def pool(cls, size: int, stride: int, rounding: str = "floor") -> "LayerSpec":
        return cls(MAXPOOL, size, size, stride, 0, "none", rounding)

    @classmethod
    def fc(cls, out: int, activation: str = "relu") -> "LayerSpec":
        return cls(FC, 1, 1, 1, out, activation)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "filter_h": self.filter_h,
            "filter_w": self.filter_w,
            "stride": self.stride,
            "out_channels": self.out_channels,
            "activation": self.activation,
            "pool_rounding": self.pool_rounding,
        }


def pool_out_dim(n: int, window: int, stride: int, rounding: str) -> int:
    if window > n:
        raise DimensionError(f"pool window {window} exceeds input extent {n}")
    if rounding == "ceil":
        out = int(math.ceil((n - window) / stride)) + 1
        # last window must start inside the input
        if (out - 1) * stride >= n:
            out -= 1
        return out
    return (n - window) // stride + 1


def output_shape(spec: LayerSpec, in_shape: tuple) -> tuple:
    """Shape arithmetic for one layer; ``in_shape`` excludes the batch axis."""
    if spec.kind == FC:
        return (spec.out_channels,)
    h, w, c = in_shape
    if spec.kind == CONV:
        if spec.filter_h > h or spec.filter_w > w:
            raise DimensionError(
                f"filter {spec.filter_h}x{spec.filter_w} larger than input {h}x{w}"
            )
        return (h - spec.filter_h + 1, w - spec.filter_w + 1, spec.out_channels)
    return (
        pool_out_dim(h, spec.filter_h, spec.stride, spec.pool_rounding),
        pool_out_dim(w, spec.filter_w, spec.stride, spec.pool_rounding),
        c,
    )


class Layer:
    """Base class. ``params`` and ``grads`` map short names to arrays."""

    name = ""

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self._cache = None

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        raise NotImplementedError

    def backward(self, dout: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def _need_cache(self):
        if self._cache is None:
            raise StateError(f"{type(self).__name__}.backward called before forward")
        return self._cache

    def zero_grad(self):
        for k, p in self.params.items():
            self.grads[k] = np.zeros_like(p)


def _relu_fwd(z: np.ndarray, activation: str):
    if activation == "relu":
        mask = z > 0
        return z * mask, mask
    return z, None


class Conv2D(Layer):
    """Valid (unpadded) stride-1 convolution with optional fused ReLU."""

    def __init__(self, in_channels: int, spec: LayerSpec, dtype=np.float32):
        super().__init__()
        self.spec = spec
        self.in_channels = in_channels
        fh, fw, k = spec.filter_h, spec.filter_w, spec.out_channels
        self.params = {
            "W": np.zeros((fh, fw, in_channels, k), dtype=dtype),
            "b": np.zeros((k,), dtype=dtype),
        }
        self.zero_grad()

    def forward(self, x, train=False):
        if x.ndim != 4 or x.shape[3] != self.in_channels:
            raise DimensionError(
                f"conv expects (N, H, W, {self.in_channels}), got {x.shape}"
            )
        fh, fw = self.spec.filter_h, self.spec.filter_w
        n, h, w, c = x.shape
        if fh > h or fw > w:
            raise DimensionError(f"filter {fh}x{fw} larger than input {h}x{w}")
        ho, wo = h - fh + 1, w - fw + 1
        win = sliding_window_view(x, (fh, fw), axis=(1, 2))  # N,Ho,Wo,C,fh,fw
        cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(n * ho * wo, fh * fw * c)
        wmat = self.params["W"].reshape(fh * fw * c, -1)
        z = cols @ wmat + self.params["b"]
        out, mask = _relu_fwd(z, self.spec.activation)
        self._cache = (x.shape, cols, mask)
        return out.reshape(n, ho, wo, -1)

    def backward(self, dout):
        xshape, cols, mask = self._need_cache()
        n, h, w, c = xshape
        fh, fw = self.spec.filter_h, self.spec.filter_w
        ho, wo = h - fh + 1, w - fw + 1
        dz = dout.reshape(n * ho * wo, -1)
        if mask is not None:
            dz = dz * mask
        wmat = self.params["W"].reshape(fh * fw * c, -1)
        self.grads["W"] = (cols.T @ dz).reshape(self.params["W"].shape)
        self.grads["b"] = dz.sum(axis=0)
        dcols = (dz @ wmat.T).reshape(n, ho, wo, fh, fw, c)
        dx = np.zeros(xshape, dtype=dout.dtype)
        for i in range(fh):
            for j in range(fw):
                dx[:, i : i + ho, j : j + wo, :] += dcols[:, :, :, i, j, :]
        return dx


class MaxPool2D(Layer):
    """Max pooling; ``ceil`` rounding pads the trailing edge with -inf."""

    def __init__(self, spec: LayerSpec):
        super().__init__()
        self.spec = spec

    def forward(self, x, train=False):
        if x.ndim != 4:
            raise DimensionError(f"maxpool expects (N, H, W, C), got {x.shape}")
        kh, kw, s = self.spec.filter_h, self.spec.filter_w, self.spec.stride
        n, h, w, c = x.shape
        ho = pool_out_dim(h, kh, s, self.spec.pool_rounding)
        wo = pool_out_dim(w, kw, s, self.spec.pool_rounding)
        hp, wp = (ho - 1) * s + kh, (wo - 1) * s + kw
        if hp > h or wp > w:
            xp = np.full((n, max(hp, h), max(wp, w), c), -np.inf, dtype=x.dtype)
            xp[:, :h, :w] = x
        else:
            xp = x
        win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, : (ho - 1) * s + 1 : s, : (wo - 1) * s + 1 : s]
        win = win.reshape(n, ho, wo, c, kh * kw)
        am = win.argmax(axis=-1)
        out = np.take_along_axis(win, am[..., None], axis=-1)[..., 0]
        self._cache = (x.shape, xp.shape, am)
        return out

    def argmax_indices(self) -> np.ndarray:
        """Flat indices into the (unpadded) input of each output's maximum."""
        xshape, xpshape, am = self._need_cache()
        n, h, w, c = xshape
        kw, s = self.spec.filter_w, self.spec.stride
        _, ho, wo, _ = am.shape
        oy = np.arange(ho)[None, :, None, None]
        ox = np.arange(wo)[None, None, :, None]
        r = oy * s + am // kw
        col = ox * s + am % kw
        nn_ = np.arange(n)[:, None, None, None]
        cc = np.arange(c)[None, None, None, :]
        return ((nn_ * h + r) * w + col) * c + cc

    def backward(self, dout):
        xshape, _, _ = self._need_cache()
        flat = self.argmax_indices().ravel()
        size = int(np.prod(xshape))
        dx = np.bincount(flat, weights=dout.ravel().astype(np.float64), minlength=size)
        return dx.astype(dout.dtype).reshape(xshape)


class Dense(Layer):
    """Fully connected layer; flattens (N, H, W, C) inputs in row-major order."""

    def __init__(self, n_in: int, spec: LayerSpec, dtype=np.float32):
        super().__init__()
        self.spec = spec
        self.n_in = n_in
        self.params = {
            "W": np.zeros((n_in, spec.out_channels), dtype=dtype),
            "b": np.zeros((spec.out_channels,), dtype=dtype),
        }
        self.zero_grad()

    def forward(self, x, train=False):
        xshape = x.shape
        x2 = x.reshape(xshape[0], -1)
        if x2.shape[1] != self.n_in:
            raise DimensionError(f"fc expects {self.n_in} inputs, got {x2.shape[1]}")
        z = x2 @ self.params["W"] + self.params["b"]
        out, mask = _relu_fwd(z, self.spec.activation)
        self._cache = (xshape, x2, mask)
        return out

    def backward(self, dout):
        xshape, x2, mask = self._need_cache()
        dz = dout * mask if mask is not None else dout
        self.grads["W"] = x2.T @ dz
        self.grads["b"] = dz.sum(axis=0)
        return (dz @ self.params["W"].T).reshape(xshape)


def dropout(x: np.ndarray, rate: float, mode: str, rng: np.random.Generator | None = None):
    """Inverted dropout. Returns ``(output, scale_mask)``; the mask is None in eval mode."""
    if not 0.0 <= rate < 1.0:
        raise ParameterError(f"dropout rate must be in [0, 1), got {rate}")
    if mode not in ("train", "eval"):
        raise ParameterError(f"dropout mode must be 'train' or 'eval', got {mode!r}")
    if mode == "eval" or rate == 0.0:
        return x, None
    if rng is None:
        raise ParameterError("train-mode dropout needs an rng")
    keep = rng.random(x.shape) >= rate
    mask = keep.astype(x.dtype) / np.asarray(1.0 - rate, dtype=x.dtype)
    return x * mask, mask


class Dropout(Layer):
    def __init__(self, rate: float, rng: np.random.Generator | None = None):
        super().__init__()
        if not 0.0 <= rate < 1.0:
            raise ParameterError(f"dropout rate must be in [0, 1), got {rate}")
        self.rate = rate
        self.rng = rng

    def forward(self, x, train=False):
        out, mask = dropout(x, self.rate, "train" if train else "eval", self.rng)
        self._cache = (mask,)
        return out

    def backward(self, dout):
        (mask,) = self._need_cache()
        return dout if mask is None else dout * mask


def make_layer(spec: LayerSpec, in_shape: tuple, dtype=np.float32) -> Layer:
    if spec.kind == CONV:
        if len(in_shape) != 3:
            raise DimensionError("conv layer needs an (H, W, C) input")
        return Conv2D(in_shape[2], spec, dtype)
    if spec.kind == MAXPOOL:
        return MaxPool2D(spec)
    return Dense(int(np.prod(in_shape)), spec, dtype)
