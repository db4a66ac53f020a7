"""From-scratch network stack: autodiff tape, two-branch model, training.

No external ML framework: :mod:`pointmaps.nn.tape` provides reverse-mode
differentiation over a small fixed operator set, :mod:`pointmaps.nn.model`
builds the conditioned two-branch transformer on top of it,
:mod:`pointmaps.nn.synth` generates consistent synthetic training pairs
and :mod:`pointmaps.nn.train` runs SGD training and subset evaluation.
"""

from .tape import Tensor, concat
from .model import AuxBatch, NetConfig, PairNet, ParameterStore, patchify, sincos_position_code

__all__ = [
    "AuxBatch",
    "NetConfig",
    "PairNet",
    "ParameterStore",
    "Tensor",
    "concat",
    "patchify",
    "sincos_position_code",
]
