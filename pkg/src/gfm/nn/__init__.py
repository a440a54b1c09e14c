"""Minimal deterministic NumPy network core: layers, losses, AdamW, schedule."""

from .checkpoint import load_checkpoint, read_checkpoint, save_checkpoint
from .layers import (Block, ConvTranspose2d, LayerNorm, Linear, Mlp, MultiHeadAttention,
                     PatchEmbed3d, gelu, gelu_backward, layer_norm, layer_norm_backward, softmax,
                     softmax_backward)
from .losses import dice_loss, masked_mae, masked_mse, masked_rmse, weighted_cross_entropy
from .optim import LrSchedule, adamw_step, one_cycle_lr
from .params import Param, ParamStore, trunc_normal

__all__ = [
    "Block", "ConvTranspose2d", "LayerNorm", "Linear", "LrSchedule", "Mlp", "MultiHeadAttention",
    "Param", "ParamStore", "PatchEmbed3d", "adamw_step", "dice_loss", "gelu", "gelu_backward",
    "layer_norm", "layer_norm_backward", "load_checkpoint", "masked_mae", "masked_mse",
    "masked_rmse", "one_cycle_lr", "read_checkpoint", "save_checkpoint", "softmax",
    "softmax_backward", "trunc_normal", "weighted_cross_entropy",
]
