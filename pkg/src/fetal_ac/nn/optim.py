from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ParameterError
from .network import AdamState, NetParams


@dataclass(frozen=True)
class AdamConfig:
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    def __post_init__(self):
        if not 0 < self.beta1 < 1 or not 0 < self.beta2 < 1:
            raise ParameterError("beta1 and beta2 must lie in (0, 1)")
        if self.epsilon <= 0:
            raise ParameterError("epsilon must be positive")
        if self.learning_rate <= 0:
            raise ParameterError("learning_rate must be positive")


def adam_step(params: NetParams, grads: dict[str, np.ndarray], cfg: AdamConfig) -> NetParams:
    """One bias-corrected Adam update, applied in place to ``params.arrays``."""
    state: AdamState = params.adam
    state.t += 1
    bc1 = 1.0 - cfg.beta1**state.t
    bc2 = 1.0 - cfg.beta2**state.t
    for name, p in params.arrays.items():
        g = grads[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * (g * g)
        p -= (cfg.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + cfg.epsilon)).astype(p.dtype)
    return params
