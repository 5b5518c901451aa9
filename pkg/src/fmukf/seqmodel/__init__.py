"""Decoder-only sequence model of dynamics and its training recipe."""

from .features import NormStats, decode_states, encode_features, encode_states, fit_norm_stats, pad_and_mask
from .loss import huber, normalized_loss, normalized_loss_grad
from .model import SeqModel, SeqModelConfig, depatch, load_model, patch, save_model

__all__ = [
    "NormStats", "fit_norm_stats", "encode_features", "encode_states", "decode_states",
    "pad_and_mask", "huber", "normalized_loss", "normalized_loss_grad",
    "SeqModel", "SeqModelConfig", "patch", "depatch", "save_model", "load_model",
]
