"""Patched decoder-only transformer.

Input (B, L, in_dim) is cut into L/p non-overlapping patches, each patch is
embedded by a residual block, a learnable positional encoding is added, a
stack of causal self-attention layers runs over the tokens and an output
residual block maps each token back to p steps of ``out_dim`` features.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from ..errors import SequenceTooLong
from .features import NormStats


@dataclass
class SeqModelConfig:
    input_dim: int
    output_dim: int
    patch_size: int = 2
    embed_dim: int = 128
    n_layers: int = 8
    n_heads: int = 32
    mlp_width: int = 1024
    residual_block_width: int = 1024
    dropout: float = 0.01
    max_sequence_length: int = 384

    def __post_init__(self):
        if self.max_sequence_length % self.patch_size:
            raise ValueError("max_sequence_length must be divisible by patch_size")
        if self.embed_dim % self.n_heads:
            raise ValueError("embed_dim must be divisible by n_heads")

    @classmethod
    def full(cls, input_dim: int = 14, output_dim: int = 12) -> "SeqModelConfig":
        return cls(input_dim, output_dim)

    @classmethod
    def desk(cls, input_dim: int = 14, output_dim: int = 12, **kw) -> "SeqModelConfig":
        opts = dict(patch_size=2, embed_dim=64, n_layers=2, n_heads=4, mlp_width=256,
                    residual_block_width=256, dropout=0.01, max_sequence_length=192)
        opts.update(kw)
        return cls(input_dim, output_dim, **opts)


def patch(seq: torch.Tensor, p: int) -> torch.Tensor:
    """(B, L, d) -> (B, L/p, p*d)."""
    B, L, d = seq.shape
    return seq.reshape(B, L // p, p * d)


def depatch(tokens: torch.Tensor, p: int) -> torch.Tensor:
    """(B, T, p*d) -> (B, T*p, d)."""
    B, T, pd = tokens.shape
    return tokens.reshape(B, T * p, pd // p)


class ResidualBlock(nn.Module):
    def __init__(self, in_dim: int, hidden: int, out_dim: int, dropout: float = 0.0):
        super().__init__()
        self.hidden = nn.Linear(in_dim, hidden)
        self.out = nn.Linear(hidden, out_dim)
        self.skip = nn.Linear(in_dim, out_dim)
        self.act = nn.SiLU()
        self.drop = nn.Dropout(dropout)

    def forward(self, x):
        return self.drop(self.out(self.act(self.hidden(x)))) + self.skip(x)


class SeqModel(nn.Module):
    def __init__(self, config: SeqModelConfig, stats: NormStats | None = None):
        super().__init__()
        c = config
        self.config = c
        self.stats = stats
        p = c.patch_size
        self.embed = ResidualBlock(p * c.input_dim, c.residual_block_width, c.embed_dim, c.dropout)
        self.pos = nn.Parameter(torch.zeros(1, c.max_sequence_length // p, c.embed_dim))
        nn.init.normal_(self.pos, std=0.02)
        layer = nn.TransformerEncoderLayer(c.embed_dim, c.n_heads, c.mlp_width, c.dropout,
                                           activation="gelu", batch_first=True, norm_first=True)
        self.layers = nn.TransformerEncoder(layer, c.n_layers, enable_nested_tensor=False)
        self.norm = nn.LayerNorm(c.embed_dim)
        self.project = ResidualBlock(c.embed_dim, c.residual_block_width, p * c.output_dim,
                                     c.dropout)

    @property
    def n_parameters(self) -> int:
        return sum(t.numel() for t in self.parameters())

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        c = self.config
        B, L, _ = x.shape
        if L > c.max_sequence_length:
            raise SequenceTooLong(f"sequence of {L} steps exceeds {c.max_sequence_length}")
        if L % c.patch_size:
            raise ValueError(f"sequence length {L} is not a multiple of {c.patch_size}")
        T = L // c.patch_size
        h = self.embed(patch(x, c.patch_size)) + self.pos[:, :T]
        mask = nn.Transformer.generate_square_subsequent_mask(T, device=x.device, dtype=h.dtype)
        h = self.layers(h, mask=mask, is_causal=True)
        return depatch(self.project(self.norm(h)), c.patch_size)


# ------------------------------------------------------------------ artifact

_WEIGHTS_MAGIC = b"FMW1"


def _write_weights(path: Path, state: dict) -> None:
    with open(path, "wb") as f:
        f.write(_WEIGHTS_MAGIC)
        f.write(struct.pack("<I", len(state)))
        for name, t in state.items():
            arr = np.ascontiguousarray(t.detach().cpu().numpy(), dtype="<f4")
            raw = name.encode()
            f.write(struct.pack("<H", len(raw)))
            f.write(raw)
            f.write(struct.pack("<B", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes())


def _read_weights(path: Path) -> dict:
    buf = Path(path).read_bytes()
    if buf[:4] != _WEIGHTS_MAGIC:
        raise ValueError(f"{path}: not a weights file")
    (count,) = struct.unpack_from("<I", buf, 4)
    off = 8
    out = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<H", buf, off)
        off += 2
        name = buf[off:off + n].decode()
        off += n
        (ndim,) = struct.unpack_from("<B", buf, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", buf, off)
        off += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(buf, dtype="<f4", count=size, offset=off).reshape(shape)
        off += 4 * size
        out[name] = torch.from_numpy(arr.copy())
    return out


def save_model(model: SeqModel, out_dir, extra: dict | None = None) -> Path:
    """Write ``config.json``, ``norm_stats.json`` and ``weights.bin``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    meta = {"model": asdict(model.config), "n_parameters": model.n_parameters}
    meta.update(extra or {})
    (out / "config.json").write_text(json.dumps(meta, indent=1))
    if model.stats is not None:
        model.stats.save(out / "norm_stats.json")
    _write_weights(out / "weights.bin", model.state_dict())
    return out


def load_model(model_dir, cls=SeqModel) -> SeqModel:
    d = Path(model_dir)
    meta = json.loads((d / "config.json").read_text())
    cfg = SeqModelConfig(**meta["model"])
    stats = NormStats.load(d / "norm_stats.json") if (d / "norm_stats.json").exists() else None
    model = cls(cfg, stats)
    model.load_state_dict(_read_weights(d / "weights.bin"))
    model.meta = meta
    model.eval()
    return model
