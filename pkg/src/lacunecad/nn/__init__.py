"""Self-contained neural-network engine on dense numpy arrays.

Layers implement forward/backward explicitly; optimization is Adam with
bias correction; a 64-bit mode exists for finite-difference verification.
"""

from .layers import (
    BatchNorm,
    Conv2D,
    Conv3D,
    Dense,
    Dropout,
    Flatten,
    Layer,
    MaxPool2D,
    MaxPool3D,
    ReLU,
    Softmax,
    build_layer,
)
from .network import Sequential, softmax_cross_entropy
from .optim import Adam, adam_step, he_init
from .train import TrainConfig, TrainingDiverged, train
from .bundle import ModelBundle, FORMAT_TAG
