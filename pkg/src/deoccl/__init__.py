"""Attention-guided encoder-decoder for removing head-mounted-display
occlusion from face images."""

from .network import NetworkConfig, generator_forward, init_network
from .training import TrainConfig, default_schedule, new_state

__version__ = "0.1.0"

__all__ = [
    "NetworkConfig",
    "TrainConfig",
    "default_schedule",
    "generator_forward",
    "init_network",
    "new_state",
    "__version__",
]
