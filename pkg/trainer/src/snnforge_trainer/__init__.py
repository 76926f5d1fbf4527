"""Training and export side of the snnforge toolkit.

Trains small reference CNNs (biases, batch-norm, max-pooling, softmax) on
MNIST-format IDX data and exports the weights to the ASNN container consumed
by the snnforge simulator.
"""

from .export import UnsupportedLayer, export_asnn
from .model import DigitCNN
from .train import TrainConfig, evaluate, train

__all__ = [
    "DigitCNN",
    "TrainConfig",
    "UnsupportedLayer",
    "evaluate",
    "export_asnn",
    "train",
]
