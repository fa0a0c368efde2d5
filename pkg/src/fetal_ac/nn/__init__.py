"""Minimal numpy neural-network engine: conv, max-pool, dense, dropout, Adam."""
from .gradcheck import check_gradients, numeric_gradient, relative_error
from .layers import (
    CONV,
    FC,
    MAXPOOL,
    Conv2D,
    Dense,
    Dropout,
    LayerSpec,
    MaxPool2D,
    dropout,
    output_shape,
    pool_out_dim,
)
from .network import (
    AdamState,
    NetParams,
    Sequential,
    conv_forward,
    fc_forward,
    init_gaussian,
    maxpool_forward,
    shape_trace,
    softmax,
    softmax_cross_entropy,
)
from .optim import AdamConfig, adam_step
from .weights import load_weights, save_weights

__all__ = [
    "CONV",
    "FC",
    "MAXPOOL",
    "AdamConfig",
    "AdamState",
    "Conv2D",
    "Dense",
    "Dropout",
    "LayerSpec",
    "MaxPool2D",
    "NetParams",
    "Sequential",
    "adam_step",
    "check_gradients",
    "conv_forward",
    "dropout",
    "fc_forward",
    "init_gaussian",
    "load_weights",
    "maxpool_forward",
    "numeric_gradient",
    "output_shape",
    "pool_out_dim",
    "relative_error",
    "save_weights",
    "shape_trace",
    "softmax",
    "softmax_cross_entropy",
]
