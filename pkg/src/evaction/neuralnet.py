"""Alias of :mod:`evaction.nn`, plus the checkpoint helpers."""

from .nn import *  # noqa: F401,F403
from .nn import __all__ as _nn_all
from .nn.checkpoint import CheckpointError, dumps, load, loads, save
from .nn.layers import LAYER_KINDS

__all__ = [*_nn_all, "CheckpointError", "LAYER_KINDS", "dumps", "load", "loads", "save"]
