"""Masked long-horizon training of the dynamics model and horizon-1 inference."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from ..errors import NonFiniteLoss, TrajectoryTooShort
from .features import NormStats, decode_states, encode_controls, encode_features, encode_states, fit_norm_stats, pad_and_mask
from .loss import normalized_loss_torch
from .model import SeqModel, SeqModelConfig, save_model

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    context_range: tuple = (64, 84)
    # input noise std as a fraction of each feature's training std
    noise_x: float = 0.01
    noise_u: float = 0.01
    lr: float = 1e-3
    warmup_epochs: int = 60
    decay_factor: float = 0.774
    decay_every: int = 50
    clip_norm: float = 1.0
    batch_schedule: dict = field(default_factory=lambda: {0: 256, 40: 2048, 800: 4096})
    micro_batch: int = 256
    epochs: int = 1000
    windows_per_trajectory: int = 1
    val_fraction: float = 0.1
    # share of samples trained without state masking (0 = pure MLHP)
    teacher_forcing_fraction: float = 0.0
    seed: int = 0

    def __post_init__(self):
        self.batch_schedule = {int(k): int(v) for k, v in self.batch_schedule.items()}
        self.context_range = tuple(self.context_range)

    def validate(self, max_sequence_length: int) -> None:
        lo, hi = self.context_range
        if not (1 <= lo <= hi <= max_sequence_length - 1):
            raise ValueError("context range must lie within [1, max_sequence_length - 1]")

    @classmethod
    def desk(cls, **kw) -> "TrainConfig":
        opts = dict(epochs=50, batch_schedule={0: 32, 40: 64}, micro_batch=32,
                    windows_per_trajectory=1)
        opts.update(kw)
        return cls(**opts)


def learning_rate(epoch: int, cfg: TrainConfig) -> float:
    """Flat during warm-up, then multiplied by ``decay_factor`` every ``decay_every`` epochs."""
    if epoch < cfg.warmup_epochs:
        return cfg.lr
    return cfg.lr * cfg.decay_factor ** ((epoch - cfg.warmup_epochs) // cfg.decay_every)


def effective_batch(epoch: int, cfg: TrainConfig) -> int:
    size = None
    for start in sorted(cfg.batch_schedule):
        if epoch >= start:
            size = cfg.batch_schedule[start]
    return size


def mlhp_batch(states: Sequence[np.ndarray], controls: Sequence[np.ndarray], stats: NormStats,
               seq_len: int, rng: np.random.Generator, contexts: Sequence[int] | None = None,
               context_range: tuple = (64, 84), noise_x: float = 0.0, noise_u: float = 0.0,
               starts: Sequence[int] | None = None):
    """Assemble encoded MLHP inputs and targets.

    For each trajectory a window of ``seq_len + 1`` states is cut; inputs
    ``a_k`` carry (noisy) state and control for ``k < L_context`` and only
    the (noisy) control afterwards; targets are the encoded next states.
    Returns ``(inputs (B, L, in), targets (B, L, out), contexts)``.
    """
    B = len(states)
    if contexts is None:
        lo, hi = context_range
        contexts = rng.integers(lo, hi + 1, size=B)
    inputs, targets = [], []
    for i in range(B):
        s, u = np.asarray(states[i]), np.asarray(controls[i])
        if len(s) < seq_len + 1:
            raise TrajectoryTooShort(f"trajectory of {len(s)} steps, need {seq_len + 1}")
        if contexts[i] > seq_len:
            raise ValueError("context longer than the window")
        start = (int(rng.integers(len(s) - seq_len)) if starts is None else int(starts[i]))
        xs = encode_states(s[start:start + seq_len + 1], stats)
        us = encode_controls(u[start:start + seq_len], stats)
        xin = xs[:-1].copy()
        if noise_x:
            xin += noise_x * rng.standard_normal(xin.shape)
        if noise_u:
            us = us + noise_u * rng.standard_normal(us.shape)
        xin[int(contexts[i]):] = 0.0
        inputs.append(np.concatenate([xin, us], axis=-1))
        targets.append(xs[1:])
    return np.stack(inputs), np.stack(targets), np.asarray(contexts)


def _split_ids(ids, val_fraction, seed):
    ids = sorted(set(ids))
    if len(ids) < 2 or val_fraction <= 0:
        return ids, []
    rng = np.random.default_rng([seed, 99])
    perm = list(rng.permutation(ids))
    n_val = max(1, int(round(val_fraction * len(ids))))
    return sorted(perm[n_val:]), sorted(perm[:n_val])


def _set_seed(seed):
    torch.manual_seed(seed)
    np.random.seed(seed % (2 ** 32))


@dataclass
class TrainResult:
    model: torch.nn.Module
    history: list
    initial_val_loss: float
    final_val_loss: float


def fit(model: torch.nn.Module, sample: Callable, n_train: int, cfg: TrainConfig,
        val_batch: Callable | None = None, epoch_callback: Callable | None = None) -> TrainResult:
    """Generic optimization loop shared by the dynamics and end-to-end models.

    ``sample(indices, rng)`` returns ``(inputs, targets)`` arrays for the
    given training sample indices; ``val_batch()`` returns a fixed
    validation batch.  Gradients of micro-batches are accumulated until the
    scheduled effective batch is reached, clipped to ``clip_norm`` and
    applied with Adam at the scheduled learning rate.
    """
    _set_seed(cfg.seed)
    model.float()
    rng = np.random.default_rng([cfg.seed, 2024])
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)

    def val_loss():
        if val_batch is None:
            return float("nan")
        model.eval()
        xb, yb = val_batch()
        with torch.no_grad():
            out = model(torch.as_tensor(xb, dtype=torch.float32))
            loss = normalized_loss_torch(out, torch.as_tensor(yb, dtype=torch.float32))
        return float(loss)

    initial = val_loss()
    history = []
    for epoch in range(cfg.epochs):
        t0 = time.time()
        lr = learning_rate(epoch, cfg)
        for g in opt.param_groups:
            g["lr"] = lr
        eff = effective_batch(epoch, cfg)
        order = np.concatenate([rng.permutation(n_train) for _ in range(cfg.windows_per_trajectory)])
        model.train()
        opt.zero_grad(set_to_none=True)
        acc = 0
        losses = []
        for start in range(0, len(order), cfg.micro_batch):
            idx = order[start:start + cfg.micro_batch]
            xb, yb = sample(idx, rng)
            out = model(torch.as_tensor(xb, dtype=torch.float32))
            loss = normalized_loss_torch(out, torch.as_tensor(yb, dtype=torch.float32))
            if not torch.isfinite(loss):
                raise NonFiniteLoss(f"non-finite loss in epoch {epoch}", idx.tolist())
            (loss * len(idx) / eff).backward()
            losses.append(loss.item())
            acc += len(idx)
            if acc >= eff or start + cfg.micro_batch >= len(order):
                # a trailing partial batch is rescaled to a full-batch mean
                if acc < eff:
                    for p in model.parameters():
                        if p.grad is not None:
                            p.grad.mul_(eff / acc)
                torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.clip_norm)
                opt.step()
                opt.zero_grad(set_to_none=True)
                acc = 0
        vl = val_loss()
        rec = {"epoch": epoch, "lr": lr, "effective_batch": eff,
               "train_loss": float(np.mean(losses)), "val_loss": vl,
               "seconds": time.time() - t0}
        history.append(rec)
        log.info("epoch %d lr %.2e batch %d train %.4f val %.4f", epoch, lr, eff,
                 rec["train_loss"], vl)
        if epoch_callback is not None:
            epoch_callback(rec)
    model.eval()
    final = history[-1]["val_loss"] if history else initial
    return TrainResult(model, history, initial, final)


def train_on_arrays(states: Sequence[np.ndarray], controls: Sequence[np.ndarray],
                    model_cfg: SeqModelConfig, train_cfg: TrainConfig,
                    val_states: Sequence[np.ndarray] | None = None,
                    val_controls: Sequence[np.ndarray] | None = None,
                    stats: NormStats | None = None, angle_idx=None) -> TrainResult:
    """Train a dynamics model on in-memory trajectories."""
    train_cfg.validate(model_cfg.max_sequence_length)
    states = [np.asarray(s, dtype=float) for s in states]
    controls = [np.asarray(u, dtype=float) for u in controls]
    if stats is None:
        kw = {} if angle_idx is None else {"angle_idx": angle_idx}
        stats = fit_norm_stats(np.concatenate(states), np.concatenate(controls), **kw)
    L = model_cfg.max_sequence_length
    _set_seed(train_cfg.seed)
    model = SeqModel(model_cfg, stats)
    lo, hi = train_cfg.context_range
    p = model_cfg.patch_size

    def sample(idx, rng):
        ctx = rng.integers(lo, hi + 1, size=len(idx))
        if train_cfg.teacher_forcing_fraction:
            tf = rng.random(len(idx)) < train_cfg.teacher_forcing_fraction
            ctx = np.where(tf, L, ctx)
        xb, yb, _ = mlhp_batch([states[i] for i in idx], [controls[i] for i in idx], stats, L,
                               rng, contexts=ctx, noise_x=train_cfg.noise_x,
                               noise_u=train_cfg.noise_u)
        r = rng.integers(p, size=len(idx))
        for b in range(len(idx)):
            xb[b, :r[b]] = 0.0
        return xb, yb

    val = None
    if val_states:
        vrng = np.random.default_rng([train_cfg.seed, 7])
        vx, vy, _ = mlhp_batch(val_states, val_controls, stats, L, vrng,
                               contexts=np.full(len(val_states), lo))
        val = lambda: (vx, vy)  # noqa: E731
    return fit(model, sample, len(states), train_cfg, val)


def train(manifest, model_cfg: SeqModelConfig, train_cfg: TrainConfig,
          out_dir=None) -> TrainResult:
    """Train on the manifest's training split and optionally write the artifact.

    A ``val_fraction`` share of the training instances is held out for the
    validation loss; test instances are never touched.
    """
    manifest.check_split()
    tr_ids, val_ids = _split_ids(manifest.train_ids, train_cfg.val_fraction, train_cfg.seed)
    tr_ids, val_ids = [int(i) for i in tr_ids], [int(i) for i in val_ids]
    if not tr_ids:
        raise ValueError("training split is empty")
    tr = [manifest.load(r) for r in manifest.records_for(tr_ids)]
    va = [manifest.load(r) for r in manifest.records_for(val_ids)]
    stats = fit_norm_stats(np.concatenate([t.states for t in tr]),
                           np.concatenate([t.controls for t in tr]))
    res = train_on_arrays([t.states for t in tr], [t.controls for t in tr], model_cfg,
                          train_cfg, [t.states for t in va] or None,
                          [t.controls for t in va] or None, stats=stats)
    if out_dir is not None:
        save_model(res.model, out_dir, {"kind": "dynamics", "train": asdict(train_cfg),
                                        "train_ids": tr_ids, "val_ids": val_ids,
                                        "dt": manifest.dt})
        Path(out_dir, "history.json").write_text(json.dumps(res.history, indent=1))
    return res


# ------------------------------------------------------------------ inference

def predict_next(model: SeqModel, states, controls, dtype=torch.float64) -> np.ndarray:
    """Next-state prediction from a state/control history.

    ``states`` is (T, d) or (B, T, d) and ``controls`` (T, du) or (B, T, du);
    the last row of each history is the current state and the control
    applied to it.  Runs teacher-forced (no masking) in eval mode.
    """
    states = np.asarray(states, dtype=float)
    controls = np.asarray(controls, dtype=float)
    single = states.ndim == 2
    if single:
        states, controls = states[None], controls[None]
    if controls.shape[:-1] != states.shape[:-1]:
        controls = np.broadcast_to(controls, states.shape[:-1] + controls.shape[-1:])
    stats = model.stats
    feats = pad_and_mask(encode_features(states, controls, stats), model.config.patch_size)
    was_training = model.training
    model.eval()
    param = next(model.parameters())
    if param.dtype != dtype:
        model.to(dtype)
    with torch.no_grad():
        out = model(torch.as_tensor(feats, dtype=dtype))[:, -1].cpu().numpy()
    if was_training:
        model.train()
    pred = decode_states(out, stats)
    return pred[0] if single else pred
