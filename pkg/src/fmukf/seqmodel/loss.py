"""Huber loss normalized per feature by the target's mean absolute step change.

For target/prediction sequences of length L with features j::

    scale_j = 1/(L-1) * sum_{k=0}^{L-2} |t[k+1, j] - t[k, j]|
    loss    = 1/L * sum_{k=1}^{L-1} sum_j huber((t[k, j] - y[k, j]) / scale_j)

The step k = 0 is excluded from the sum while the 1/L factor is kept.
NumPy versions carry an explicit gradient; the torch version is used for
training and must agree with them.
"""

from __future__ import annotations

import numpy as np
import torch

from ..errors import DegenerateFeature

SCALE_FLOOR = 1e-12


def huber(x, delta: float = 1.0):
    x = np.asarray(x, dtype=float)
    a = np.abs(x)
    return np.where(a < delta, 0.5 * x ** 2, delta * (a - 0.5 * delta))


def huber_grad(x, delta: float = 1.0):
    x = np.asarray(x, dtype=float)
    return np.where(np.abs(x) < delta, x, delta * np.sign(x))


def step_scale(target) -> np.ndarray:
    t = np.asarray(target, dtype=float)
    if t.shape[-2] < 2:
        raise ValueError("sequences need at least 2 steps")
    scale = np.mean(np.abs(np.diff(t, axis=-2)), axis=-2)
    if np.any(scale < SCALE_FLOOR):
        raise DegenerateFeature("a target feature is constant over the sequence")
    return scale


def normalized_loss(pred, target, delta: float = 1.0) -> float:
    """Loss of one (L, d) sequence pair, or the batch mean over leading axes."""
    pred = np.asarray(pred, dtype=float)
    target = np.asarray(target, dtype=float)
    if pred.shape != target.shape:
        raise ValueError("pred and target must be aligned")
    L = target.shape[-2]
    scale = step_scale(target)[..., None, :]
    z = (target - pred)[..., 1:, :] / scale
    per_seq = huber(z, delta).sum(axis=(-2, -1)) / L
    return float(np.mean(per_seq))


def normalized_loss_grad(pred, target, delta: float = 1.0) -> np.ndarray:
    """Analytic gradient of :func:`normalized_loss` with respect to ``pred``."""
    pred = np.asarray(pred, dtype=float)
    target = np.asarray(target, dtype=float)
    L = target.shape[-2]
    n_seq = int(np.prod(target.shape[:-2])) if target.ndim > 2 else 1
    scale = step_scale(target)[..., None, :]
    z = (target - pred)[..., 1:, :] / scale
    g = np.zeros_like(pred)
    g[..., 1:, :] = -huber_grad(z, delta) / scale / L / n_seq
    return g


def huber_torch(x: torch.Tensor, delta: float = 1.0) -> torch.Tensor:
    a = x.abs()
    return torch.where(a < delta, 0.5 * x * x, delta * (a - 0.5 * delta))


def normalized_loss_torch(pred: torch.Tensor, target: torch.Tensor, delta: float = 1.0,
                          reduce: bool = True) -> torch.Tensor:
    """Batched loss for (B, L, d) tensors; per-sequence values when ``reduce`` is False."""
    L = target.shape[-2]
    scale = (target[..., 1:, :] - target[..., :-1, :]).abs().mean(dim=-2, keepdim=True)
    if torch.any(scale < SCALE_FLOOR):
        raise DegenerateFeature("a target feature is constant over the sequence")
    z = (target - pred)[..., 1:, :] / scale
    per_seq = huber_torch(z, delta).sum(dim=(-2, -1)) / L
    return per_seq.mean() if reduce else per_seq
