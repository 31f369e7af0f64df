"""Shared tokenizer and vocabulary.

Lowercased whitespace + punctuation splitting, used identically by the
models and by the generation metrics.
"""

from __future__ import annotations

import re

_TOKEN_RE = re.compile(r"[a-z0-9']+|[^\sa-z0-9']")

PAD, UNK, BOS, EOS = "<pad>", "<unk>", "<bos>", "<eos>"
SPECIALS = (PAD, UNK, BOS, EOS)


def tokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


class Vocab:
    """Token <-> id mapping with reserved specials at fixed positions."""

    def __init__(self, tokens):
        self.itos: list[str] = list(SPECIALS)
        seen = set(self.itos)
        for tok in tokens:
            if tok not in seen:
                seen.add(tok)
                self.itos.append(tok)
        self.stoi = {t: i for i, t in enumerate(self.itos)}

    def __len__(self) -> int:
        return len(self.itos)

    @property
    def pad_id(self) -> int:
        return self.stoi[PAD]

    @property
    def unk_id(self) -> int:
        return self.stoi[UNK]

    @property
    def bos_id(self) -> int:
        return self.stoi[BOS]

    @property
    def eos_id(self) -> int:
        return self.stoi[EOS]

    @classmethod
    def build(cls, texts) -> "Vocab":
        toks = []
        for text in texts:
            toks.extend(tokenize(text))
        return cls(toks)

    def encode(self, text: str, max_len: int | None = None) -> list[int]:
        ids = [self.stoi.get(t, self.unk_id) for t in tokenize(text)]
        if max_len is not None:
            ids = ids[:max_len]
        return ids

    def decode(self, ids) -> str:
        specials = set(range(len(SPECIALS)))
        return " ".join(self.itos[i] for i in ids if i not in specials)

    def to_json(self) -> dict:
        return {"itos": self.itos}

    @classmethod
    def from_json(cls, obj: dict) -> "Vocab":
        vocab = cls.__new__(cls)
        vocab.itos = list(obj["itos"])
        vocab.stoi = {t: i for i, t in enumerate(vocab.itos)}
        return vocab
