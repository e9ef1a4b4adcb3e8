"""Desk-scale latent image animator.

Motion between two frames is a path in latent space, written as a
magnitude-weighted sum of orthonormal learned directions; a flow generator
decodes the moved code into warps of the source's multi-scale features.
"""
from .lmd import absolute_transfer, compose_path, orthonormalize, relative_transfer
from .nets import Animator, NetConfig
from .trainer import TrainConfig, TrainState, load_checkpoint, save_checkpoint, train

__version__ = "0.1.0"

__all__ = [
    "Animator",
    "NetConfig",
    "TrainConfig",
    "TrainState",
    "absolute_transfer",
    "compose_path",
    "load_checkpoint",
    "orthonormalize",
    "relative_transfer",
    "save_checkpoint",
    "train",
]
