"""Central finite-difference verification of layer backward passes."""

from __future__ import annotations

import numpy as np

from .layers import Dropout, Layer


def _loss_and_analytic(layer: Layer, x: np.ndarray, proj: np.ndarray, seed: int):
    if isinstance(layer, Dropout):
        layer.rng = np.random.default_rng(seed)
    out = layer.forward(x, train=True)
    loss = float((out * proj).sum())
    dx = layer.backward(proj.astype(out.dtype))
    return loss, dx


def _loss_only(layer: Layer, x: np.ndarray, proj: np.ndarray, seed: int) -> float:
    if isinstance(layer, Dropout):
        layer.rng = np.random.default_rng(seed)
    out = layer.forward(x, train=True)
    layer.cache = None
    return float((out * proj).sum())


def _numeric_grad(layer, x, proj, seed, arr, eps):
    num = np.zeros_like(arr, dtype=np.float64)
    flat = arr.reshape(-1)
    nflat = num.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        lp = _loss_only(layer, x, proj, seed)
        flat[i] = orig - eps
        lm = _loss_only(layer, x, proj, seed)
        flat[i] = orig
        nflat[i] = (lp - lm) / (2 * eps)
    return num


def _rel_error(a, b):
    scale = max(np.abs(a).max(initial=0), np.abs(b).max(initial=0), 1e-8)
    return float(np.abs(a - b).max(initial=0) / scale)


def check_layer(layer: Layer, x: np.ndarray, rng, eps: float = 1e-6) -> dict:
    """Compare analytic gradients to central differences.

    Returns a dict of relative errors: {"x": e, "<param>": e, ...}.
    Run in float64 mode (layer built with dtype=np.float64, x float64).
    """
    seed = int(rng.integers(0, 2**31))
    out = layer.forward(x, train=True)
    layer.cache = None
    proj = rng.standard_normal(out.shape)
    _, dx = _loss_and_analytic(layer, x, proj, seed)
    errors = {}
    num_dx = _numeric_grad(layer, x, proj, seed, x, eps)
    errors["x"] = _rel_error(dx, num_dx)
    for name, arr in layer.params.items():
        _, _ = _loss_and_analytic(layer, x, proj, seed)
        analytic = layer.grads[name].copy()
        numeric = _numeric_grad(layer, x, proj, seed, arr, eps)
        errors[name] = _rel_error(analytic, numeric)
    return errors
