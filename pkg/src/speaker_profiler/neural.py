"""Trainable building blocks shared by the three model stages.

Everything runs in float64 on CPU so that finite-difference gradient checks
hold at tight tolerances. Forward passes are deterministic given parameters
and inputs (dropout only fires in training mode).
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np
import torch
from torch import nn

DTYPE = torch.float64


@dataclass
class EncoderConfig:
    vocab_size: int = 0  # 0 = fill in from the built vocabulary
    embed_dim: int = 32
    hidden_dim: int = 32
    num_layers: int = 1
    num_heads: int = 2
    dropout_rate: float = 0.0
    max_sequence_length: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.embed_dim <= 0 or self.hidden_dim <= 0:
            raise ValueError("dimensions must be positive")
        if self.num_layers <= 0 or self.num_heads <= 0:
            raise ValueError("layer and head counts must be positive")
        if self.embed_dim % self.num_heads != 0:
            raise ValueError("embed_dim must be divisible by num_heads")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must be in [0, 1)")
        if self.max_sequence_length <= 0:
            raise ValueError("max_sequence_length must be positive")

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> "EncoderConfig":
        return cls(**obj)


def seed_all(seed: int) -> None:
    torch.manual_seed(seed)
    np.random.seed(seed % 2**32)


def init_parameters(module: nn.Module, seed: int) -> None:
    """Uniform fan-in-scaled init, reproducible from the seed alone."""
    gen = torch.Generator().manual_seed(seed)
    for _, param in sorted(module.named_parameters()):
        fan_in = param.shape[-1] if param.dim() >= 2 else max(param.shape[0], 1)
        bound = 1.0 / math.sqrt(fan_in)
        with torch.no_grad():
            param.uniform_(-bound, bound, generator=gen)


class AdditiveAttention(nn.Module):
    """Single-hidden-layer additive attention over a key/value list."""

    def __init__(self, query_dim: int, key_dim: int, attn_dim: int | None = None):
        super().__init__()
        attn_dim = attn_dim or key_dim
        self.query_proj = nn.Linear(query_dim, attn_dim, dtype=DTYPE)
        self.key_proj = nn.Linear(key_dim, attn_dim, bias=False, dtype=DTYPE)
        self.score = nn.Linear(attn_dim, 1, bias=False, dtype=DTYPE)

    def forward(self, query, keys, values, mask=None):
        """query [d_q], keys [L, d_k], values [L, d_v] -> (context [d_v], weights [L])."""
        if keys.shape[0] != values.shape[0]:
            raise ValueError("keys and values must have equal length")
        if query.shape[-1] != self.query_proj.in_features:
            raise ValueError("query dimension mismatch")
        scores = self.score(torch.tanh(self.query_proj(query) + self.key_proj(keys))).squeeze(-1)
        if mask is not None:
            mask = torch.as_tensor(mask, dtype=torch.bool)
            if not bool(mask.any()):
                raise ValueError("attention requires at least one unmasked position")
            scores = scores.masked_fill(~mask, float("-inf"))
        weights = torch.softmax(scores, dim=-1)
        context = weights @ values
        return context, weights


class BiGRU(nn.Module):
    """Bidirectional single-layer GRU over a [L, input_dim] sequence."""

    def __init__(self, input_dim: int, hidden_dim: int):
        super().__init__()
        self.hidden_dim = hidden_dim
        self.gru = nn.GRU(input_dim, hidden_dim, bidirectional=True, dtype=DTYPE)

    def forward(self, seq):
        """seq [L, input_dim] -> (states [L, 2*hidden], summary [2*hidden]).

        The summary concatenates the final forward state (last position) and
        the final backward state (first position).
        """
        if seq.dim() != 2 or seq.shape[0] < 1:
            raise ValueError("BiGRU needs a non-empty [L, input_dim] sequence")
        states, _ = self.gru(seq.unsqueeze(1))
        states = states.squeeze(1)
        summary = torch.cat([states[-1, : self.hidden_dim], states[0, self.hidden_dim:]])
        return states, summary


class MultiHeadAttention(nn.Module):
    """Scaled dot-product attention, usable for self- or cross-attention."""

    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        if dim % num_heads != 0:
            raise ValueError("dim must be divisible by num_heads")
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.q_proj = nn.Linear(dim, dim, dtype=DTYPE)
        self.k_proj = nn.Linear(dim, dim, dtype=DTYPE)
        self.v_proj = nn.Linear(dim, dim, dtype=DTYPE)
        self.out = nn.Linear(dim, dim, dtype=DTYPE)

    def forward(self, queries, keys_values, key_mask=None, causal=False):
        lq, dim = queries.shape
        lk = keys_values.shape[0]
        q = self.q_proj(queries).view(lq, self.num_heads, self.head_dim).transpose(0, 1)
        k = self.k_proj(keys_values).view(lk, self.num_heads, self.head_dim).transpose(0, 1)
        v = self.v_proj(keys_values).view(lk, self.num_heads, self.head_dim).transpose(0, 1)
        scores = q @ k.transpose(-2, -1) / math.sqrt(self.head_dim)  # [H, Lq, Lk]
        if key_mask is not None:
            scores = scores.masked_fill(~key_mask.view(1, 1, lk), float("-inf"))
        if causal:
            future = torch.triu(torch.ones(lq, lk, dtype=torch.bool), diagonal=1)
            scores = scores.masked_fill(future.view(1, lq, lk), float("-inf"))
        attn = torch.softmax(scores, dim=-1)
        mixed = (attn @ v).transpose(0, 1).reshape(lq, dim)
        return self.out(mixed)


class TransformerEncoderLayer(nn.Module):
    def __init__(self, dim: int, num_heads: int, dropout: float = 0.0):
        super().__init__()
        self.attn = MultiHeadAttention(dim, num_heads)
        self.norm1 = nn.LayerNorm(dim, dtype=DTYPE)
        self.norm2 = nn.LayerNorm(dim, dtype=DTYPE)
        self.ffn = nn.Sequential(
            nn.Linear(dim, 4 * dim, dtype=DTYPE),
            nn.GELU(),
            nn.Linear(4 * dim, dim, dtype=DTYPE),
        )
        self.dropout = nn.Dropout(dropout)

    def forward(self, x, key_mask=None):
        normed = self.norm1(x)
        x = x + self.dropout(self.attn(normed, normed, key_mask=key_mask))
        x = x + self.dropout(self.ffn(self.norm2(x)))
        return x


class TransformerEncoder(nn.Module):
    """Pre-norm transformer encoder over a [L, dim] sequence.

    With ``use_positional=False`` the module is permutation-equivariant.
    Masked positions are excluded as attention keys and zeroed on output.
    """

    def __init__(self, dim: int, num_heads: int, num_layers: int,
                 max_len: int, use_positional: bool = True, dropout: float = 0.0):
        super().__init__()
        self.use_positional = use_positional
        self.max_len = max_len
        self.positional = nn.Embedding(max_len, dim, dtype=DTYPE)
        self.layers = nn.ModuleList(
            TransformerEncoderLayer(dim, num_heads, dropout) for _ in range(num_layers)
        )
        self.final_norm = nn.LayerNorm(dim, dtype=DTYPE)

    def forward(self, seq, mask=None):
        if seq.dim() != 2 or seq.shape[0] < 1:
            raise ValueError("encoder needs a non-empty [L, dim] sequence")
        length = seq.shape[0]
        if length > self.max_len:
            raise ValueError(f"sequence length {length} exceeds maximum {self.max_len}")
        if mask is not None:
            mask = torch.as_tensor(mask, dtype=torch.bool)
            if not bool(mask.any()):
                raise ValueError("encoder requires at least one unmasked position")
        x = seq
        if self.use_positional:
            x = x + self.positional(torch.arange(length))
        for layer in self.layers:
            x = layer(x, key_mask=mask)
        x = self.final_norm(x)
        if mask is not None:
            x = x * mask.view(length, 1).to(x.dtype)
        return x


def mean_pool(states, mask=None):
    """Mean over unmasked positions of a [L, d] sequence."""
    if mask is None:
        return states.mean(dim=0)
    mask = torch.as_tensor(mask, dtype=torch.bool)
    weights = mask.to(states.dtype)
    return (states * weights.view(-1, 1)).sum(dim=0) / weights.sum()


# ---------------------------------------------------------------------------
# Checkpoint container: versioned binary file, stable byte layout.
# Layout: magic, u64 header length, JSON header (sorted keys), then the raw
# little-endian tensor bytes concatenated in header order.
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"SPKPROF1"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, arrays: dict, meta: dict | None = None) -> None:
    path = Path(path)
    entries = []
    blobs = []
    for name in sorted(arrays):
        arr = np.ascontiguousarray(np.asarray(arrays[name]))
        blob = arr.astype(arr.dtype.newbyteorder("<")).tobytes()
        entries.append(
            {"name": name, "dtype": str(arr.dtype), "shape": list(arr.shape),
             "nbytes": len(blob)}
        )
        blobs.append(blob)
    header = json.dumps(
        {"version": CHECKPOINT_VERSION, "meta": meta or {}, "tensors": entries},
        sort_keys=True,
    ).encode("utf-8")
    with path.open("wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path):
    path = Path(path)
    with path.open("rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        (header_len,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(header_len).decode("utf-8"))
        if header["version"] != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {header['version']}")
        arrays = {}
        for entry in header["tensors"]:
            blob = fh.read(entry["nbytes"])
            arr = np.frombuffer(blob, dtype=np.dtype(entry["dtype"]).newbyteorder("<"))
            arrays[entry["name"]] = arr.reshape(entry["shape"]).copy()
    return arrays, header["meta"]


def state_dict_arrays(module: nn.Module) -> dict:
    return {k: v.detach().cpu().numpy() for k, v in module.state_dict().items()}


def load_state_arrays(module: nn.Module, arrays: dict) -> None:
    state = {k: torch.as_tensor(v) for k, v in arrays.items()}
    module.load_state_dict(state)
