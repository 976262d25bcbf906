"""Deep learning benchmark toolkit.

A numpy CNN engine with hand-written backward passes, a mini-batch SGD
trainer with per-epoch timing, a deterministic simulator of distributed
data-parallel SGD, selective-search region proposals and the standard and
region-search inference workflows.
"""

from .architectures import ARCHITECTURES, build_architecture
from .graph import LayerSpec, NetworkGraph, count_layers, forward, loss_and_gradients, param_count
from .serialization import deserialize, serialize, serialized_size
from .trainer import TrainConfig, TrainReport, fine_tune, train

__all__ = [
    "ARCHITECTURES",
    "LayerSpec",
    "NetworkGraph",
    "TrainConfig",
    "TrainReport",
    "build_architecture",
    "count_layers",
    "deserialize",
    "fine_tune",
    "forward",
    "loss_and_gradients",
    "param_count",
    "serialize",
    "serialized_size",
    "train",
]

__version__ = "0.1.0"
