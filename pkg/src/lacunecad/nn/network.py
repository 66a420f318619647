"""Sequential network container and the classification loss."""

from __future__ import annotations

import numpy as np

from .layers import Dropout, Layer, Softmax, ShapeMismatch, build_layer
from .optim import he_init, fan_in_of


class Sequential:
    """Plain layer stack. The final layer may be a Softmax; training runs on
    logits with a fused softmax cross-entropy."""

    def __init__(self, layers: list[Layer]):
        self.layers = layers

    @classmethod
    def from_specs(cls, specs: list[dict], rng=None, dtype=np.float32) -> "Sequential":
        net = cls([build_layer(s, dtype=dtype) for s in specs])
        if rng is not None:
            net.init_weights(rng)
        return net

    def specs(self) -> list[dict]:
        return [l.spec() for l in self.layers]

    def init_weights(self, rng) -> None:
        for layer in self.layers:
            if "W" in layer.params:
                w = layer.params["W"]
                layer.params["W"] = he_init(w.shape, fan_in_of(layer), rng).astype(
                    w.dtype
                )

    def reseed(self, seed: int) -> None:
        ss = np.random.SeedSequence(seed)
        children = ss.spawn(len(self.layers))
        for layer, child in zip(self.layers, children):
            if isinstance(layer, Dropout):
                layer.rng = np.random.default_rng(child)

    def forward(self, x, train=False):
        for i, layer in enumerate(self.layers):
            try:
                x = layer.forward(x, train=train)
            except ShapeMismatch as e:
                raise ShapeMismatch(f"layer {i} ({layer.spec()['kind']}): {e}") from None
        return x

    def forward_logits(self, x, train=False):
        layers = self.layers
        if layers and isinstance(layers[-1], Softmax):
            layers = layers[:-1]
        for i, layer in enumerate(layers):
            try:
                x = layer.forward(x, train=train)
            except ShapeMismatch as e:
                raise ShapeMismatch(f"layer {i} ({layer.spec()['kind']}): {e}") from None
        return x

    def backward(self, dlogits):
        layers = self.layers
        if layers and isinstance(layers[-1], Softmax):
            layers = layers[:-1]
        d = dlogits
        for layer in reversed(layers):
            d = layer.backward(d)
        return d

    def predict_proba(self, x):
        logits = self.forward_logits(x, train=False)
        return softmax(logits)

    # --- parameter plumbing -------------------------------------------------

    def parameters(self):
        """Flat list of (name, layer, param_key) for learnable params."""
        out = []
        for i, layer in enumerate(self.layers):
            for key in layer.params:
                out.append((f"{i}.{key}", layer, key))
        return out

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {}
        for i, layer in enumerate(self.layers):
            for key, arr in layer.state_arrays().items():
                out[f"{i}.{key}"] = arr.copy()
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for i, layer in enumerate(self.layers):
            arrays = {
                key: state[f"{i}.{key}"]
                for key in layer.state_arrays()
                if f"{i}.{key}" in state
            }
            if isinstance(layer, type(layer)):
                for key, arr in arrays.items():
                    if key in layer.params:
                        layer.params[key] = arr.astype(layer.params[key].dtype).copy()
                    elif hasattr(layer, key):
                        setattr(layer, key, arr.astype(getattr(layer, key).dtype).copy())


def softmax(logits):
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits, labels):
    """Mean categorical cross-entropy over the batch.

    Returns (loss, dlogits) with dlogits already averaged over the batch.
    Labels are integer class indices.
    """
    n = logits.shape[0]
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    log_p = shifted[np.arange(n), labels] - log_z
    loss = -log_p.mean()
    p = np.exp(shifted - log_z[:, None])
    dlogits = p
    dlogits[np.arange(n), labels] -= 1.0
    dlogits /= n
    return float(loss), dlogits.astype(logits.dtype)
