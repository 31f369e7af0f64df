"""Stage 3: persona-value generation.

A shared transformer encoder produces context, target, and whole-dialogue
encodings; each target position queries the context through additive
attention; the attended target sequence concatenated with the dialogue
encoding forms the cross-attention memory for a small autoregressive
transformer decoder trained with teacher forcing.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, asdict

import torch
from torch import nn
from torch.nn import functional as F

from .corpus import Dialogue, TypedInstance
from .neural import (
    DTYPE,
    AdditiveAttention,
    EncoderConfig,
    MultiHeadAttention,
    TransformerEncoder,
    init_parameters,
    load_checkpoint,
    load_state_arrays,
    save_checkpoint,
    seed_all,
    state_dict_arrays,
)
from .text import Vocab

log = logging.getLogger(__name__)


@dataclass
class DecodeConfig:
    max_length: int = 16
    strategy: str = "greedy"  # "greedy" or "beam"
    beam_width: int = 1

    def __post_init__(self):
        if self.max_length < 0:
            raise ValueError("max_length must be nonnegative")
        if self.strategy not in ("greedy", "beam"):
            raise ValueError("strategy must be 'greedy' or 'beam'")
        if not 1 <= self.beam_width <= 4:
            raise ValueError("beam_width must be in 1..4")


class DecoderLayer(nn.Module):
    def __init__(self, dim: int, num_heads: int, dropout: float = 0.0):
        super().__init__()
        self.self_attn = MultiHeadAttention(dim, num_heads)
        self.cross_attn = MultiHeadAttention(dim, num_heads)
        self.norm1 = nn.LayerNorm(dim, dtype=DTYPE)
        self.norm2 = nn.LayerNorm(dim, dtype=DTYPE)
        self.norm3 = nn.LayerNorm(dim, dtype=DTYPE)
        self.ffn = nn.Sequential(
            nn.Linear(dim, 4 * dim, dtype=DTYPE),
            nn.GELU(),
            nn.Linear(4 * dim, dim, dtype=DTYPE),
        )
        self.dropout = nn.Dropout(dropout)

    def forward(self, x, memory):
        normed = self.norm1(x)
        x = x + self.dropout(self.self_attn(normed, normed, causal=True))
        x = x + self.dropout(self.cross_attn(self.norm2(x), memory))
        x = x + self.dropout(self.ffn(self.norm3(x)))
        return x


class ValueExModel(nn.Module):
    def __init__(self, config: EncoderConfig,
                 decode: DecodeConfig | None = None,
                 prepend_type_token: bool = False):
        super().__init__()
        self.config = config
        self.decode_config = decode or DecodeConfig()
        self.prepend_type_token = prepend_type_token
        d = config.embed_dim
        self.embedding = nn.Embedding(config.vocab_size, d, dtype=DTYPE)
        self.encoder = TransformerEncoder(
            d, config.num_heads, config.num_layers,
            config.max_sequence_length, use_positional=True,
            dropout=config.dropout_rate,
        )
        self.ctx_target_attn = AdditiveAttention(d, d)
        self.memory_proj = nn.Linear(2 * d, d, dtype=DTYPE)
        self.dec_positional = nn.Embedding(config.max_sequence_length, d, dtype=DTYPE)
        self.dec_layers = nn.ModuleList(
            DecoderLayer(d, config.num_heads, config.dropout_rate)
            for _ in range(config.num_layers)
        )
        self.dec_norm = nn.LayerNorm(d, dtype=DTYPE)
        self.output_proj = nn.Linear(d, config.vocab_size, dtype=DTYPE)
        init_parameters(self, config.seed)

    # -- encoding ----------------------------------------------------------

    def _encode_text(self, vocab: Vocab, text: str) -> torch.Tensor:
        ids = vocab.encode(text, max_len=self.config.max_sequence_length)
        if not ids:
            ids = [vocab.unk_id]
        return self.encoder(self.embedding(torch.tensor(ids, dtype=torch.long)))

    def encode(self, vocab: Vocab, instance: TypedInstance,
               dialogue: Dialogue, type_hint=None) -> torch.Tensor:
        """Fused memory sequence for the decoder, width embed_dim."""
        if not instance.target.text.strip():
            raise ValueError(f"instance {instance.instance_id} has an empty target")
        target_text = instance.target.text
        if self.prepend_type_token and type_hint is not None:
            target_text = f"{type_hint.value} : {target_text}"
        target_enc = self._encode_text(vocab, target_text)
        if instance.context:
            context_text = " ".join(u.text for u in instance.context)
            context_enc = self._encode_text(vocab, context_text)
        else:
            # first-utterance targets: fall back to self-attention over the target
            context_enc = target_enc
        dialogue_enc = self._encode_text(
            vocab, " ".join(u.text for u in dialogue.utterances)
        )
        attended = torch.stack([
            self.ctx_target_attn(q, context_enc, context_enc)[0] for q in target_enc
        ])
        fused = self.memory_proj(torch.cat([target_enc, attended], dim=-1))
        return torch.cat([fused, dialogue_enc], dim=0)

    # -- decoding ----------------------------------------------------------

    def decoder_logits(self, memory: torch.Tensor, token_ids: torch.Tensor) -> torch.Tensor:
        """Next-token logits [T, vocab] for a teacher-forced prefix [T]."""
        x = self.embedding(token_ids) + self.dec_positional(
            torch.arange(token_ids.shape[0])
        )
        for layer in self.dec_layers:
            x = layer(x, memory)
        return self.output_proj(self.dec_norm(x))

    def sequence_loss(self, vocab: Vocab, instance: TypedInstance,
                      dialogue: Dialogue, value: str, type_hint=None) -> torch.Tensor:
        memory = self.encode(vocab, instance, dialogue, type_hint)
        value_ids = vocab.encode(value, max_len=self.config.max_sequence_length - 2)
        inputs = torch.tensor([vocab.bos_id] + value_ids, dtype=torch.long)
        targets = torch.tensor(value_ids + [vocab.eos_id], dtype=torch.long)
        logits = self.decoder_logits(memory, inputs)
        return F.cross_entropy(logits, targets)


def train_valueex(pairs: list, config: EncoderConfig, *,
                  epochs: int = 150, lr: float = 5e-3,
                  decode: DecodeConfig | None = None,
                  prepend_type_token: bool = False) -> tuple[ValueExModel, Vocab]:
    """Teacher-forced training over (instance, dialogue) pairs with gold values."""
    if not pairs:
        raise ValueError("no training pairs")
    for inst, _ in pairs:
        if not inst.gold_value:
            raise ValueError(f"instance {inst.instance_id} has no gold value")
    seed_all(config.seed)
    texts = []
    for inst, dlg in pairs:
        texts.extend(u.text for u in dlg.utterances)
        texts.append(inst.gold_value)
        if prepend_type_token and inst.gold_type is not None:
            texts.append(inst.gold_type.value)
    vocab = Vocab.build(texts)
    config = EncoderConfig(**{**config.to_json(), "vocab_size": len(vocab)})
    model = ValueExModel(config, decode, prepend_type_token)
    optimizer = torch.optim.Adam(model.parameters(), lr=lr)
    for epoch in range(epochs):
        model.train()
        loss = torch.stack([
            model.sequence_loss(vocab, inst, dlg, inst.gold_value, inst.gold_type)
            for inst, dlg in pairs
        ]).mean()
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        log.info("valueex epoch %d loss %.6f", epoch, float(loss.detach()))
    model.eval()
    return model, vocab


def generate_value(model: ValueExModel, vocab: Vocab, instance: TypedInstance,
                   dialogue: Dialogue, type_hint=None) -> str:
    """Decode a value string; greedy by default, optional small beam."""
    cfg = model.decode_config
    if cfg.max_length == 0:
        return ""
    model.eval()
    with torch.no_grad():
        memory = model.encode(vocab, instance, dialogue, type_hint)
        if cfg.strategy == "beam" and cfg.beam_width > 1:
            ids = _beam_decode(model, vocab, memory, cfg.max_length, cfg.beam_width)
        else:
            ids = _greedy_decode(model, vocab, memory, cfg.max_length)
    return vocab.decode(ids)


def _greedy_decode(model, vocab, memory, max_length):
    ids = [vocab.bos_id]
    out = []
    for _ in range(max_length):
        logits = model.decoder_logits(memory, torch.tensor(ids, dtype=torch.long))
        nxt = int(torch.argmax(logits[-1]))
        if nxt == vocab.eos_id:
            break
        out.append(nxt)
        ids.append(nxt)
        if len(ids) >= model.config.max_sequence_length:
            break
    return out


def _beam_decode(model, vocab, memory, max_length, width):
    beams = [([vocab.bos_id], 0.0, False)]  # (ids, logprob, finished)
    for _ in range(max_length):
        candidates = []
        for ids, score, done in beams:
            if done or len(ids) >= model.config.max_sequence_length:
                candidates.append((ids, score, True))
                continue
            logits = model.decoder_logits(memory, torch.tensor(ids, dtype=torch.long))
            logprobs = torch.log_softmax(logits[-1], dim=-1)
            top = torch.topk(logprobs, width)
            for lp, tok in zip(top.values.tolist(), top.indices.tolist()):
                candidates.append((ids + [tok], score + lp, tok == vocab.eos_id))
        # deterministic ordering: score desc, then token ids
        candidates.sort(key=lambda c: (-c[1], c[0]))
        beams = candidates[:width]
        if all(done for _, _, done in beams):
            break
    best = beams[0][0][1:]
    if vocab.eos_id in best:
        best = best[: best.index(vocab.eos_id)]
    return best


def save_valueex(path, model: ValueExModel, vocab: Vocab) -> None:
    meta = {
        "kind": "valueex",
        "config": model.config.to_json(),
        "decode": asdict(model.decode_config),
        "prepend_type_token": model.prepend_type_token,
        "vocab": vocab.to_json(),
    }
    save_checkpoint(path, state_dict_arrays(model), meta)


def load_valueex(path) -> tuple[ValueExModel, Vocab]:
    arrays, meta = load_checkpoint(path)
    if meta.get("kind") != "valueex":
        raise ValueError(f"{path}: not a valueex checkpoint")
    model = ValueExModel(
        EncoderConfig.from_json(meta["config"]),
        DecodeConfig(**meta["decode"]),
        meta["prepend_type_token"],
    )
    load_state_arrays(model, arrays)
    model.eval()
    return model, Vocab.from_json(meta["vocab"])
