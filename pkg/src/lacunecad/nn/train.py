"""Generic mini-batch training loop with Adam, lr decay, and early stopping.

Works for any model exposing ``forward_logits(inputs, train)``,
``backward(dlogits)``, ``parameters()`` and ``state_dict``/``load_state_dict``;
both the sequential patch network and the multi-stream fusion network qualify.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .network import softmax_cross_entropy
from .optim import Adam, AdamConfig


class TrainingDiverged(Exception):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 128
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    l2_lambda: float = 0.0
    lr_decay_factor: float = 1.0
    max_epochs: int = 10
    seed: int = 0
    # early stop: epochs without val-accuracy improvement; None disables
    patience: int | None = None
    # optional caps so huge augmented datasets can train on a time budget
    steps_per_epoch: int | None = None
    val_batches: int | None = None

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        if self.lr_decay_factor < 1:
            raise ValueError("lr_decay_factor must be >= 1")


class ArrayDataset:
    """In-memory dataset of (inputs, labels); inputs may be a tuple of arrays."""

    def __init__(self, inputs, labels):
        self.inputs = inputs if isinstance(inputs, tuple) else (inputs,)
        self.labels = np.asarray(labels)
        self.n = len(self.labels)
        for a in self.inputs:
            assert len(a) == self.n

    def __len__(self):
        return self.n

    def batches(self, batch_size, rng=None):
        order = np.arange(self.n)
        if rng is not None:
            rng.shuffle(order)
        for i in range(0, self.n, batch_size):
            sel = order[i : i + batch_size]
            xs = tuple(a[sel] for a in self.inputs)
            yield xs if len(xs) > 1 else xs[0], self.labels[sel]


def _evaluate(model, dataset, batch_size, max_batches=None):
    correct = 0
    total = 0
    loss_sum = 0.0
    for bi, (inputs, labels) in enumerate(dataset.batches(batch_size)):
        if max_batches is not None and bi >= max_batches:
            break
        logits = model.forward_logits(inputs, train=False)
        loss, _ = softmax_cross_entropy(logits, labels)
        loss_sum += loss * len(labels)
        correct += int((logits.argmax(axis=1) == labels).sum())
        total += len(labels)
    if total == 0:
        raise ValueError("empty dataset")
    return loss_sum / total, correct / total


def train(model, train_data, cfg: TrainConfig, val_data=None):
    """Train and return (history, best_state) where best_state is the
    state dict of the epoch with the best validation accuracy (training
    accuracy when no validation set is given). The model is left holding
    the best weights."""
    if len(train_data) == 0:
        raise ValueError("empty dataset")
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed))
    model.reseed(cfg.seed)
    lr = cfg.lr
    adam = Adam(AdamConfig(lr=lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps))
    params = model.parameters()

    def grads_of(name, layer, key):
        g = layer.grads[key]
        if key == "W" and cfg.l2_lambda > 0:
            g = g + cfg.l2_lambda * layer.params[key]
        return g

    history = []
    best_metric = -np.inf
    best_state = None
    prev_train_acc = None
    stale = 0
    for epoch in range(cfg.max_epochs):
        adam.cfg.lr = lr
        loss_sum = 0.0
        correct = 0
        total = 0
        for step, (inputs, labels) in enumerate(
            train_data.batches(cfg.batch_size, rng)
        ):
            if cfg.steps_per_epoch is not None and step >= cfg.steps_per_epoch:
                break
            logits = model.forward_logits(inputs, train=True)
            loss, dlogits = softmax_cross_entropy(logits, labels)
            if not np.isfinite(loss):
                raise TrainingDiverged(
                    f"non-finite loss {loss} at epoch {epoch} step {step}"
                )
            model.backward(dlogits)
            adam.step(params, grads_of)
            loss_sum += loss * len(labels)
            correct += int((logits.argmax(axis=1) == labels).sum())
            total += len(labels)
        train_loss = loss_sum / total
        train_acc = correct / total
        if val_data is not None:
            val_loss, val_acc = _evaluate(
                model, val_data, cfg.batch_size, cfg.val_batches
            )
        else:
            val_loss, val_acc = train_loss, train_acc
        history.append(
            {
                "epoch": epoch,
                "loss": train_loss,
                "train_acc": train_acc,
                "val_loss": val_loss,
                "val_acc": val_acc,
                "lr": lr,
            }
        )
        if val_acc > best_metric:
            best_metric = val_acc
            best_state = model.state_dict()
            stale = 0
        else:
            stale += 1
        if cfg.patience is not None and stale > cfg.patience:
            break
        # decay applied whenever epoch training accuracy drops
        if prev_train_acc is not None and train_acc < prev_train_acc:
            lr /= cfg.lr_decay_factor
        prev_train_acc = train_acc
    model.load_state_dict(best_state)
    return history, best_state
