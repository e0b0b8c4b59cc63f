"""Switch-configurable recurrent/residual/attention U-Net segmentation toolkit."""

from .network import (
    MODEL_NAMES,
    Network,
    SwitchConfig,
    build_network,
    count_parameters,
    load_weights,
    named_config,
    save_weights,
)
from .tensor import Parameter, Tape, Tensor, backward, precision

__version__ = "0.1.0"
