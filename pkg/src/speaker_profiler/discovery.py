"""Stage 1: per-utterance binary persona discovery.

Each utterance runs through a word-level transformer and is mean-pooled;
the pooled sequence runs through a dialogue-level transformer so every
utterance's score sees the whole dialogue; a two-layer head produces the
persona/no-persona logits. Training balances the skewed label distribution
with SMOTE in the feature space feeding the head.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .corpus import Corpus, Dialogue
from .neural import (
    DTYPE,
    EncoderConfig,
    TransformerEncoder,
    init_parameters,
    load_checkpoint,
    load_state_arrays,
    mean_pool,
    save_checkpoint,
    seed_all,
    state_dict_arrays,
)
from .text import Vocab

log = logging.getLogger(__name__)


@dataclass
class FeaturePoint:
    vector: np.ndarray
    label: int


class DiscoveryModel(nn.Module):
    def __init__(self, config: EncoderConfig, decision_threshold: float = 0.5):
        super().__init__()
        if not 0.0 < decision_threshold < 1.0 and decision_threshold != 0.0:
            # threshold 0.0 is allowed for the degenerate all-positive case
            raise ValueError("decision_threshold must be in [0, 1)")
        self.config = config
        self.decision_threshold = decision_threshold
        d = config.embed_dim
        self.embedding = nn.Embedding(config.vocab_size, d, dtype=DTYPE)
        self.word_encoder = TransformerEncoder(
            d, config.num_heads, config.num_layers,
            config.max_sequence_length, use_positional=True,
            dropout=config.dropout_rate,
        )
        self.dialogue_encoder = TransformerEncoder(
            d, config.num_heads, config.num_layers,
            config.max_sequence_length, use_positional=True,
            dropout=config.dropout_rate,
        )
        self.head = nn.Sequential(
            nn.Linear(d, config.hidden_dim, dtype=DTYPE),
            nn.ReLU(),
            nn.Linear(config.hidden_dim, 2, dtype=DTYPE),
        )
        init_parameters(self, config.seed)

    def _utterance_ids(self, vocab: Vocab, text: str) -> torch.Tensor:
        ids = vocab.encode(text, max_len=self.config.max_sequence_length)
        if not ids:
            ids = [vocab.unk_id]
        return torch.tensor(ids, dtype=torch.long)

    def utterance_features(self, vocab: Vocab, dialogue: Dialogue) -> torch.Tensor:
        """Dialogue-contextual utterance vectors [n, embed_dim]."""
        pooled = []
        for utt in dialogue.utterances[: self.config.max_sequence_length]:
            tokens = self.embedding(self._utterance_ids(vocab, utt.text))
            encoded = self.word_encoder(tokens)
            pooled.append(mean_pool(encoded))
        stacked = torch.stack(pooled)
        return self.dialogue_encoder(stacked)

    def forward(self, vocab: Vocab, dialogue: Dialogue) -> torch.Tensor:
        """Per-utterance persona probabilities [n]."""
        if len(dialogue.utterances) > self.config.max_sequence_length:
            raise ValueError(
                f"dialogue {dialogue.id!r} has {len(dialogue.utterances)} utterances; "
                f"maximum is {self.config.max_sequence_length}"
            )
        logits = self.head(self.utterance_features(vocab, dialogue))
        return torch.softmax(logits, dim=-1)[:, 1]


def smote_upsample(points: list[FeaturePoint], k: int, target_ratio: float,
                   rng: np.random.Generator) -> list[FeaturePoint]:
    """Balance a binary feature set by convex minority interpolation.

    Synthetic points are x_i + lam * (x_nn - x_i) with lam ~ Uniform[0, 1)
    and x_nn one of the k nearest (Euclidean) minority neighbours of x_i.
    Enough points are added to make minority/majority == target_ratio
    (rounded down); originals are preserved. Per synthetic point the RNG is
    consumed as: parent index, neighbour choice, lam.
    """
    labels = {p.label for p in points}
    if labels - {0, 1}:
        raise ValueError("smote_upsample expects binary labels 0/1")
    n_pos = sum(1 for p in points if p.label == 1)
    n_neg = len(points) - n_pos
    minority_label = 1 if n_pos <= n_neg else 0
    minority = [p for p in points if p.label == minority_label]
    n_min = len(minority)
    n_maj = len(points) - n_min
    if n_min < 2:
        raise ValueError("SMOTE needs at least 2 minority points")
    if k >= n_min:
        raise ValueError(f"k={k} must be below the minority count {n_min}")

    synth_needed = int(target_ratio * n_maj) - n_min
    if synth_needed <= 0:
        return list(points)

    vectors = np.stack([np.asarray(p.vector, dtype=np.float64) for p in minority])
    dists = np.linalg.norm(vectors[:, None, :] - vectors[None, :, :], axis=-1)
    np.fill_diagonal(dists, np.inf)
    # stable k-NN: sort by (distance, index)
    neighbour_ids = np.argsort(dists, axis=1, kind="stable")[:, :k]

    out = list(points)
    for _ in range(synth_needed):
        parent = int(rng.integers(0, n_min))
        nn_idx = int(neighbour_ids[parent][int(rng.integers(0, k))])
        lam = float(rng.random())
        vec = vectors[parent] + lam * (vectors[nn_idx] - vectors[parent])
        out.append(FeaturePoint(vector=vec, label=minority_label))
    return out


def train_discovery(corpus: Corpus, config: EncoderConfig, *,
                    epochs: int = 200, lr: float = 5e-3,
                    smote_k: int = 3, smote_ratio: float = 1.0,
                    decision_threshold: float = 0.5) -> tuple[DiscoveryModel, Vocab]:
    """Full-batch training with cross-entropy over SMOTE-augmented features."""
    train = corpus.get("train", [])
    if not train:
        raise ValueError("train split is empty")
    seed_all(config.seed)
    vocab = Vocab.build(u.text for d in train for u in d.utterances)
    config = EncoderConfig(**{**config.to_json(), "vocab_size": len(vocab)})
    model = DiscoveryModel(config, decision_threshold)
    optimizer = torch.optim.Adam(model.parameters(), lr=lr)

    labels = [int(u.has_persona) for d in train for u in d.utterances]
    n_pos = sum(labels)
    use_smote = n_pos >= 2 and smote_k < n_pos
    if n_pos == 0:
        log.warning("no positive utterances in train split; SMOTE disabled")
    elif not use_smote:
        log.warning(
            "too few positive utterances (%d) for SMOTE with k=%d; disabled",
            n_pos, smote_k,
        )
    label_tensor = torch.tensor(labels, dtype=torch.long)
    rng = np.random.default_rng(config.seed)

    initial_loss = None
    for epoch in range(epochs):
        model.train()
        feats = torch.cat([model.utterance_features(vocab, d) for d in train])
        loss = F.cross_entropy(model.head(feats), label_tensor)

        if use_smote:
            # augmentation only touches training features; the synthetic
            # points train the head on detached encoder output
            points = [
                FeaturePoint(vector=v, label=l)
                for v, l in zip(feats.detach().numpy(), labels)
            ]
            augmented = smote_upsample(points, smote_k, smote_ratio, rng)
            synth = augmented[len(points):]
            if synth:
                synth_x = torch.tensor(
                    np.stack([p.vector for p in synth]), dtype=DTYPE
                )
                synth_y = torch.tensor([p.label for p in synth], dtype=torch.long)
                loss = loss + F.cross_entropy(model.head(synth_x), synth_y)

        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        if initial_loss is None:
            initial_loss = float(loss.detach())
        log.info("discovery epoch %d loss %.6f", epoch, float(loss.detach()))
    model.eval()
    return model, vocab


def predict_discovery(model: DiscoveryModel, vocab: Vocab,
                      dialogue: Dialogue) -> tuple[list[bool], list[float]]:
    model.eval()
    with torch.no_grad():
        probs = model(vocab, dialogue).tolist()
    flags = [p >= model.decision_threshold for p in probs]
    return flags, probs


def save_discovery(path, model: DiscoveryModel, vocab: Vocab) -> None:
    meta = {
        "kind": "discovery",
        "config": model.config.to_json(),
        "threshold": model.decision_threshold,
        "vocab": vocab.to_json(),
    }
    save_checkpoint(path, state_dict_arrays(model), meta)


def load_discovery(path) -> tuple[DiscoveryModel, Vocab]:
    arrays, meta = load_checkpoint(path)
    if meta.get("kind") != "discovery":
        raise ValueError(f"{path}: not a discovery checkpoint")
    model = DiscoveryModel(EncoderConfig.from_json(meta["config"]), meta["threshold"])
    load_state_arrays(model, arrays)
    model.eval()
    return model, Vocab.from_json(meta["vocab"])
