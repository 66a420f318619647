"""He initialization and the Adam update rule."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .layers import Conv2D, Conv3D, Dense, Layer, ShapeMismatch


def he_init(shape, fan_in: int, rng) -> np.ndarray:
    """Gaussian weights with variance 2/fan_in."""
    if fan_in < 1:
        raise ValueError(f"fan_in must be >= 1, got {fan_in}")
    return rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)


def fan_in_of(layer: Layer) -> int:
    if isinstance(layer, Dense):
        return layer.in_features
    if isinstance(layer, Conv2D):
        return layer.in_channels * layer.kh * layer.kw
    if isinstance(layer, Conv3D):
        return layer.in_channels * layer.kz * layer.ky * layer.kx
    raise ValueError(f"no fan-in for layer {type(layer).__name__}")


@dataclass
class AdamConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(w, g, state, t: int, cfg: AdamConfig):
    """One Adam update with bias correction.

    state is (m, v) or None for a fresh parameter; returns (w_new, (m, v)).
    """
    if t < 1:
        raise ValueError(f"step index must be >= 1, got {t}")
    if w.shape != g.shape:
        raise ShapeMismatch(f"adam: weight {w.shape} vs grad {g.shape}")
    if state is None:
        m = np.zeros_like(w, dtype=np.float32)
        v = np.zeros_like(w, dtype=np.float32)
    else:
        m, v = state
    m = cfg.beta1 * m + (1 - cfg.beta1) * g
    v = cfg.beta2 * v + (1 - cfg.beta2) * (g * g)
    m_hat = m / (1 - cfg.beta1**t)
    v_hat = v / (1 - cfg.beta2**t)
    w_new = w - cfg.lr * m_hat / (np.sqrt(v_hat) + cfg.eps)
    return w_new.astype(w.dtype), (m, v)


class Adam:
    """Stateful wrapper applying adam_step across a model's parameters."""

    def __init__(self, cfg: AdamConfig):
        self.cfg = cfg
        self.state: dict[str, tuple] = {}
        self.t = 0

    def step(self, parameters, grads_of):
        """parameters: list of (name, layer, key); grads_of(name, layer, key)
        must return the gradient array."""
        self.t += 1
        for name, layer, key in parameters:
            g = grads_of(name, layer, key)
            w_new, st = adam_step(
                layer.params[key], g, self.state.get(name), self.t, self.cfg
            )
            layer.params[key] = w_new
            self.state[name] = st
