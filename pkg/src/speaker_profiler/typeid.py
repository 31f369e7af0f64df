"""Stage 2: persona-type identification with adaptive decision boundaries.

Utterances are encoded by a bidirectional GRU, contextualised by a
dialogue-level transformer, and re-encoded per speaker by a shared
speaker-sequence transformer. Speaker-aware, context-aware, and global
attention vectors are fused with a dialogue-context encoding into a single
representation, which is classified against per-class centroids whose radii
are trained with the boundary loss.
"""

from __future__ import annotations

import json
import logging
from pathlib import Path

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .corpus import CorpusError, PersonaType, TypedInstance
from .neural import (
    DTYPE,
    AdditiveAttention,
    BiGRU,
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

NUM_TYPES = len(PersonaType.order())


def speaker_partition(instance: TypedInstance) -> dict:
    """Partition instance positions (context then target) by speaker.

    Positions are 0-based within the instance; order within each speaker is
    preserved and every position appears exactly once.
    """
    partition: dict[str, list[int]] = {}
    for pos, utt in enumerate(instance.all_utterances):
        partition.setdefault(utt.speaker_id, []).append(pos)
    return partition


class TrainableContextEncoder(nn.Module):
    """Small self-contained encoder of the whole instance text."""

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        d = config.embed_dim
        self.embedding = nn.Embedding(config.vocab_size, d, dtype=DTYPE)
        self.encoder = TransformerEncoder(
            d, config.num_heads, 1, config.max_sequence_length,
            use_positional=True, dropout=config.dropout_rate,
        )
        self.output_dim = d

    def forward(self, vocab: Vocab, instance: TypedInstance) -> torch.Tensor:
        text = " ".join(u.text for u in instance.all_utterances)
        ids = vocab.encode(text, max_len=self.config.max_sequence_length)
        if not ids:
            ids = [vocab.unk_id]
        encoded = self.encoder(self.embedding(torch.tensor(ids, dtype=torch.long)))
        return mean_pool(encoded)


class ExternalContextEncoder:
    """Frozen per-instance vectors, e.g. exported from a large pretrained model.

    File format: one JSON object per line, {"instance": str, "vector": [...]},
    constant dimension throughout.
    """

    def __init__(self, vectors: dict):
        if not vectors:
            raise ValueError("external context table is empty")
        dims = {len(v) for v in vectors.values()}
        if len(dims) != 1:
            raise ValueError(f"inconsistent vector dimensions: {sorted(dims)}")
        self.output_dim = dims.pop()
        self.vectors = {
            k: torch.tensor(v, dtype=DTYPE) for k, v in vectors.items()
        }

    @classmethod
    def from_file(cls, path) -> "ExternalContextEncoder":
        path = Path(path)
        if not path.exists():
            raise CorpusError(f"context vector file not found: {path}")
        vectors = {}
        with path.open(encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.strip()
                if not line:
                    continue
                try:
                    obj = json.loads(line)
                    vectors[obj["instance"]] = [float(x) for x in obj["vector"]]
                except (json.JSONDecodeError, KeyError, TypeError, ValueError):
                    raise CorpusError(f"{path}:{lineno}: malformed vector line") from None
        return cls(vectors)

    def __call__(self, vocab: Vocab, instance: TypedInstance) -> torch.Tensor:
        key = instance.instance_id
        if key not in self.vectors:
            raise KeyError(f"no context vector for instance {key!r}")
        return self.vectors[key]


class TypeIdModel(nn.Module):
    def __init__(self, config: EncoderConfig, *, use_speaker_module: bool = True,
                 use_context_encoder: bool = True, context_dim: int | None = None):
        super().__init__()
        self.config = config
        self.use_speaker_module = use_speaker_module
        self.use_context_encoder = use_context_encoder
        d = config.embed_dim
        self.embedding = nn.Embedding(config.vocab_size, d, dtype=DTYPE)
        self.utterance_gru = BiGRU(d, config.hidden_dim)
        self.gru_proj = nn.Linear(2 * config.hidden_dim, d, dtype=DTYPE)
        self.dialogue_encoder = TransformerEncoder(
            d, config.num_heads, config.num_layers,
            config.max_sequence_length, use_positional=True,
            dropout=config.dropout_rate,
        )
        self.speaker_encoder = TransformerEncoder(
            d, config.num_heads, config.num_layers,
            config.max_sequence_length, use_positional=True,
            dropout=config.dropout_rate,
        )
        self.attn_speaker = AdditiveAttention(d, d)
        self.attn_context = AdditiveAttention(d, d)
        self.attn_global = AdditiveAttention(d, d)
        # external_context_dim recorded so checkpoints rebuild the same shapes
        self.context_dim = (context_dim if context_dim is not None else d) if use_context_encoder else 0
        self.context_encoder = (
            TrainableContextEncoder(config)
            if use_context_encoder and context_dim is None
            else None
        )
        self.fusion = nn.Linear(d + self.context_dim, d, dtype=DTYPE)
        init_parameters(self, config.seed)
        self.representation_dim = d

    def _utterance_summary(self, vocab: Vocab, text: str) -> torch.Tensor:
        ids = vocab.encode(text, max_len=self.config.max_sequence_length)
        if not ids:
            ids = [vocab.unk_id]
        _, summary = self.utterance_gru(self.embedding(torch.tensor(ids, dtype=torch.long)))
        return self.gru_proj(summary)

    def forward(self, vocab: Vocab, instance: TypedInstance,
                context_encoder=None) -> torch.Tensor:
        """Fused instance representation z [embed_dim]."""
        utterances = instance.all_utterances[-self.config.max_sequence_length:]
        summaries = torch.stack(
            [self._utterance_summary(vocab, u.text) for u in utterances]
        )
        contextual = self.dialogue_encoder(summaries)  # [n, d]
        target_vec = contextual[-1]

        context_aware, _ = self.attn_context(target_vec, contextual, contextual)
        if self.use_speaker_module:
            offset = len(instance.all_utterances) - len(utterances)
            partition = speaker_partition(instance)
            target_speaker = instance.target.speaker_id
            positions = [p - offset for p in partition[target_speaker] if p >= offset]
            speaker_states = self.speaker_encoder(contextual[positions])
            speaker_aware, _ = self.attn_speaker(target_vec, speaker_states, speaker_states)
            fused_keys = torch.stack([speaker_aware, context_aware])
        else:
            fused_keys = context_aware.unsqueeze(0)
        global_aware, _ = self.attn_global(target_vec, fused_keys, fused_keys)

        if self.use_context_encoder:
            encoder = self.context_encoder if context_encoder is None else context_encoder
            if encoder is None:
                raise ValueError("external context encoder required but not supplied")
            ctx = encoder(vocab, instance)
            if ctx.shape[-1] != self.context_dim:
                raise ValueError(
                    f"context vector dim {ctx.shape[-1]} != expected {self.context_dim}"
                )
            fused_in = torch.cat([global_aware, ctx])
        else:
            fused_in = global_aware
        return self.fusion(fused_in)


class BoundaryModel(nn.Module):
    """Per-class centroids and softplus-positive decision radii."""

    def __init__(self, centroids: torch.Tensor, raw_radii: torch.Tensor | None = None):
        super().__init__()
        num_classes, _ = centroids.shape
        self.centroids = nn.Parameter(centroids.to(DTYPE), requires_grad=False)
        if raw_radii is None:
            raw_radii = torch.zeros(num_classes, dtype=DTYPE)
        self.raw_radii = nn.Parameter(raw_radii.to(DTYPE))

    @property
    def num_classes(self) -> int:
        return self.centroids.shape[0]

    @property
    def radii(self) -> torch.Tensor:
        return F.softplus(self.raw_radii)


def boundary_loss(z_batch: torch.Tensor, labels, boundaries: BoundaryModel) -> torch.Tensor:
    """Mean radius-violation penalty.

    For each sample: (distance - radius) if it falls outside its class
    boundary, (radius - distance) if inside; both branches equal the
    absolute deviation |distance - radius|, so the loss is nonnegative.
    """
    labels = torch.as_tensor(labels, dtype=torch.long)
    if labels.numel() == 0:
        raise ValueError("boundary_loss needs at least one sample")
    if int(labels.min()) < 0 or int(labels.max()) >= boundaries.num_classes:
        raise ValueError("label out of range")
    centroids = boundaries.centroids[labels]
    radii = boundaries.radii[labels]
    dist = torch.linalg.norm(z_batch - centroids, dim=-1)
    outside = (dist > radii).to(z_batch.dtype)
    per_sample = outside * (dist - radii) + (1.0 - outside) * (radii - dist)
    return per_sample.mean()


def fit_boundaries(representations: torch.Tensor, labels, *,
                   num_classes: int = NUM_TYPES, steps: int = 300,
                   lr: float = 0.05, coverage: float = 0.98) -> BoundaryModel:
    """Centroids from per-class means; radii by gradient descent with
    centroids frozen.

    Minimising the unweighted boundary penalty drives each radius to the
    median in-class distance, leaving half the class outside its own
    boundary. Radius fitting therefore uses the quantile-weighted (pinball)
    form of the same penalty, whose minimiser is the ``coverage`` quantile
    of in-class distances, so fitted boundaries enclose nearly all of their
    class while staying tight.
    """
    if not 0.0 < coverage < 1.0:
        raise ValueError("coverage must be in (0, 1)")
    labels = torch.as_tensor(labels, dtype=torch.long)
    representations = representations.detach().to(DTYPE)
    centroids = []
    for cls in range(num_classes):
        members = representations[labels == cls]
        if members.shape[0] == 0:
            raise ValueError(f"class {cls} has no samples")
        centroids.append(members.mean(dim=0))
    boundaries = BoundaryModel(torch.stack(centroids))
    optimizer = torch.optim.Adam([boundaries.raw_radii], lr=lr)
    for _ in range(steps):
        cents = boundaries.centroids[labels]
        radii = boundaries.radii[labels]
        dist = torch.linalg.norm(representations - cents, dim=-1)
        outside = (dist > radii).to(DTYPE)
        per_sample = (outside * coverage * (dist - radii)
                      + (1.0 - outside) * (1.0 - coverage) * (radii - dist))
        loss = per_sample.mean()
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
    return boundaries


def predict_type(z: torch.Tensor, boundaries: BoundaryModel) -> int:
    """Nearest-centroid class; ties break to the lowest class index.

    Radii are not consulted: the label set is closed, so there is no
    open-class rejection region at inference time.
    """
    dist = torch.linalg.norm(boundaries.centroids - z, dim=-1)
    return int(torch.argmin(dist))


def train_typeid(instances: list[TypedInstance], config: EncoderConfig, *,
                 epochs: int = 150, lr: float = 5e-3,
                 boundary_steps: int = 300, boundary_lr: float = 0.05,
                 use_speaker_module: bool = True,
                 use_context_encoder: bool = True,
                 external_context: ExternalContextEncoder | None = None,
                 ) -> tuple[TypeIdModel, BoundaryModel, Vocab]:
    """Two-phase training: cross-entropy representation learning, then
    centroid/radius fitting on the frozen representations."""
    if not instances:
        raise ValueError("no training instances")
    labels = []
    for inst in instances:
        if inst.gold_type is None:
            raise ValueError(f"instance {inst.instance_id} has no gold type")
        labels.append(inst.gold_type.index)
    present = set(labels)
    missing = [t.value for t in PersonaType.order() if t.index not in present]
    if missing:
        raise ValueError(f"persona types missing from training data: {missing}")

    seed_all(config.seed)
    vocab = Vocab.build(
        u.text for inst in instances for u in inst.all_utterances
    )
    config = EncoderConfig(**{**config.to_json(), "vocab_size": len(vocab)})
    model = TypeIdModel(
        config,
        use_speaker_module=use_speaker_module,
        use_context_encoder=use_context_encoder,
        context_dim=external_context.output_dim if external_context else None,
    )
    head = nn.Linear(model.representation_dim, NUM_TYPES, dtype=DTYPE)
    init_parameters(head, config.seed + 1)
    label_tensor = torch.tensor(labels, dtype=torch.long)
    optimizer = torch.optim.Adam(
        list(model.parameters()) + list(head.parameters()), lr=lr
    )
    for epoch in range(epochs):
        model.train()
        reps = torch.stack(
            [model(vocab, inst, external_context) for inst in instances]
        )
        loss = F.cross_entropy(head(reps), label_tensor)
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        log.info("typeid epoch %d loss %.6f", epoch, float(loss.detach()))

    model.eval()
    with torch.no_grad():
        reps = torch.stack(
            [model(vocab, inst, external_context) for inst in instances]
        )
    boundaries = fit_boundaries(
        reps, labels, num_classes=NUM_TYPES,
        steps=boundary_steps, lr=boundary_lr,
    )
    return model, boundaries, vocab


def predict_types(model: TypeIdModel, boundaries: BoundaryModel, vocab: Vocab,
                  instances: list[TypedInstance],
                  external_context: ExternalContextEncoder | None = None,
                  ) -> list[PersonaType]:
    model.eval()
    out = []
    with torch.no_grad():
        for inst in instances:
            z = model(vocab, inst, external_context)
            out.append(PersonaType.order()[predict_type(z, boundaries)])
    return out


def save_typeid(path, model: TypeIdModel, boundaries: BoundaryModel, vocab: Vocab) -> None:
    arrays = state_dict_arrays(model)
    arrays["__boundaries__.centroids"] = boundaries.centroids.detach().numpy()
    arrays["__boundaries__.raw_radii"] = boundaries.raw_radii.detach().numpy()
    meta = {
        "kind": "typeid",
        "config": model.config.to_json(),
        "use_speaker_module": model.use_speaker_module,
        "use_context_encoder": model.use_context_encoder,
        "external_context_dim": (
            None if model.context_encoder is not None or not model.use_context_encoder
            else model.context_dim
        ),
        "vocab": vocab.to_json(),
    }
    save_checkpoint(path, arrays, meta)


def load_typeid(path) -> tuple[TypeIdModel, BoundaryModel, Vocab]:
    arrays, meta = load_checkpoint(path)
    if meta.get("kind") != "typeid":
        raise ValueError(f"{path}: not a typeid checkpoint")
    centroids = torch.as_tensor(arrays.pop("__boundaries__.centroids"))
    raw_radii = torch.as_tensor(arrays.pop("__boundaries__.raw_radii"))
    model = TypeIdModel(
        EncoderConfig.from_json(meta["config"]),
        use_speaker_module=meta["use_speaker_module"],
        use_context_encoder=meta["use_context_encoder"],
        context_dim=meta.get("external_context_dim"),
    )
    load_state_arrays(model, arrays)
    model.eval()
    return model, BoundaryModel(centroids, raw_radii), Vocab.from_json(meta["vocab"])
