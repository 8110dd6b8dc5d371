from .layers import (
    ConfigError,
    LayerParams,
    causal_mask,
    conv_forward,
    dense_forward,
    depthwise_forward,
    layer_norm_forward,
    mha_forward,
    positional_encoding,
    scale_bias_forward,
    sepconv_forward,
    softmax_xent,
)
from .optim import OptimState, optim_step
from .tensor import DimensionError, GraphStateError, Tensor

__all__ = [
    "ConfigError",
    "DimensionError",
    "GraphStateError",
    "LayerParams",
    "OptimState",
    "Tensor",
    "causal_mask",
    "conv_forward",
    "dense_forward",
    "depthwise_forward",
    "layer_norm_forward",
    "mha_forward",
    "optim_step",
    "positional_encoding",
    "scale_bias_forward",
    "sepconv_forward",
    "softmax_xent",
]
