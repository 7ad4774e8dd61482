"""Layer stacks, parameter containers and checkpoints."""

from .layers import (
    LayerSpec,
    Network,
    NetworkParams,
    NetworkSpec,
    autoencoder_specs,
    init_params,
    standard_specs,
)

__all__ = [
    "LayerSpec",
    "Network",
    "NetworkParams",
    "NetworkSpec",
    "autoencoder_specs",
    "init_params",
    "standard_specs",
]
