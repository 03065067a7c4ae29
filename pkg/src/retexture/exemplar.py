"""Exemplar conditioning: audio embeddings, the shared linear projection,
learnable before/after position vectors, and the null pair used for
classifier-free dropout.

The embedding network is a small conv net over log-mels pretrained as a
texture classifier; its pooled features (projected to length L and
unit-normalized) stand in for a large pretrained audio encoder.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .audio import Waveform
from .checkpoint import load_checkpoint, load_state_dict, save_checkpoint, state_dict_arrays
from .metrics import MEL_NORM_BIAS, MEL_NORM_SCALE, _mel_batch
from .spectral import SpectralParams, mel_spectrogram

EMBED_DIM = 128  # L
CONTEXT_DIM = 256  # c, cross-attention width
CONDITION_DROPOUT_P = 0.1  # fraction of training bundles replaced by the null pair


class ExemplarError(RuntimeError):
    pass


@dataclass
class Embedding:
    """L-dimensional exemplar embedding, unit-norm by construction."""

    vector: np.ndarray

    def __post_init__(self) -> None:
        self.vector = np.asarray(self.vector, dtype=np.float64)
        if self.vector.ndim != 1:
            raise ExemplarError(f"embedding must be a vector, got shape {self.vector.shape}")
        if not np.all(np.isfinite(self.vector)):
            raise ExemplarError("non-finite embedding")

    @property
    def dim(self) -> int:
        return self.vector.shape[0]


@dataclass
class ConditioningBundle:
    """Assembled cross-attention context: row 0 conditions on the before
    exemplar, row 1 on the after exemplar (or both rows are the learned
    null pair when null_flag is set)."""

    sequence: torch.Tensor  # (2, c)
    null_flag: bool = False
    guidance_scale: float = 1.0

    def __post_init__(self) -> None:
        if self.sequence.ndim != 2 or self.sequence.shape[0] != 2:
            raise ExemplarError(f"conditioning sequence must be (2, c), got {tuple(self.sequence.shape)}")
        if self.guidance_scale < 1.0:
            raise ExemplarError(f"guidance scale must be >= 1, got {self.guidance_scale}")

    @property
    def context_dim(self) -> int:
        return int(self.sequence.shape[1])


@dataclass
class ExemplarConfig:
    n_classes: int = 3
    width: int = 16
    embed_dim: int = EMBED_DIM
    context_dim: int = CONTEXT_DIM
    epochs: int = 8
    batch_size: int = 32
    lr: float = 1e-3
    weight_decay: float = 1e-4
    val_fraction: float = 0.2
    seed: int = 0
    params: SpectralParams = field(default_factory=SpectralParams)

    def __post_init__(self) -> None:
        if self.n_classes < 2:
            raise ExemplarError("need at least 2 texture classes")
        if self.embed_dim < 1 or self.context_dim < 1:
            raise ExemplarError("embed_dim and context_dim must be positive")
        if not 0.0 < self.val_fraction < 1.0:
            raise ExemplarError("val_fraction must be in (0, 1)")


class ExemplarEncoder(nn.Module):
    """Conv trunk (same shape as the metrics classifier, separately
    parameterized), pooled features -> length-L unit-norm embedding,
    plus the linear projection to context width, the two position
    vectors and the learned null pair."""

    def __init__(self, n_classes: int = 3, width: int = 16,
                 embed_dim: int = EMBED_DIM, context_dim: int = CONTEXT_DIM,
                 n_frames: int = 256):
        super().__init__()
        w = width
        self.n_classes = n_classes
        self.width = width
        self.embed_dim = embed_dim
        self.context_dim = context_dim
        self.n_frames = n_frames  # expected mel frames per clip
        self.stem = nn.Sequential(
            nn.Conv2d(1, w, 3, stride=2, padding=1), nn.GroupNorm(4, w), nn.SiLU(),
            nn.Conv2d(w, 2 * w, 3, stride=2, padding=1), nn.GroupNorm(4, 2 * w), nn.SiLU(),
            nn.Conv2d(2 * w, 4 * w, 3, stride=2, padding=1), nn.GroupNorm(4, 4 * w), nn.SiLU(),
            nn.Conv2d(4 * w, 4 * w, 3, stride=2, padding=1), nn.GroupNorm(4, 4 * w), nn.SiLU(),
        )
        self.to_embedding = nn.Linear(4 * w, embed_dim)
        self.head = nn.Linear(embed_dim, n_classes)  # pretraining only
        self.projection = nn.Linear(embed_dim, context_dim)
        # positions start at zero so an untrained encoder is order-agnostic
        self.p_before = nn.Parameter(torch.zeros(context_dim))
        self.p_after = nn.Parameter(torch.zeros(context_dim))
        # the null pair is learned, not a zeros sentinel
        self.null_pair = nn.Parameter(
            torch.randn(2, context_dim, generator=torch.Generator().manual_seed(0)) * 0.02)
        self.trained = False

    def embed_mels(self, mel: torch.Tensor) -> torch.Tensor:
        """(B, T, F) natural-log mels -> (B, L) unit-norm embeddings."""
        x = (mel + MEL_NORM_BIAS) / MEL_NORM_SCALE
        feats = self.stem(x.unsqueeze(1)).mean(dim=(2, 3))
        emb = self.to_embedding(feats)
        return emb / torch.clamp(emb.norm(dim=1, keepdim=True), min=1e-12)

    def forward(self, mel: torch.Tensor) -> torch.Tensor:
        return self.head(self.embed_mels(mel))

    def project_pair(self, e1: torch.Tensor, e2: torch.Tensor,
                     pe_enabled: bool) -> torch.Tensor:
        """(B, L) embeddings for each side -> (B, 2, c) context sequences."""
        before = self.projection(e1)
        after = self.projection(e2)
        if pe_enabled:
            before = before + self.p_before
            after = after + self.p_after
        return torch.stack([before, after], dim=1)

    def apply_null(self, sequences: torch.Tensor, null_mask: torch.Tensor) -> torch.Tensor:
        """Replace masked rows of a (B, 2, c) batch with the null pair,
        keeping gradients attached for both branches."""
        null = self.null_pair.unsqueeze(0).expand_as(sequences)
        return torch.where(null_mask.view(-1, 1, 1), null, sequences)


def embed_audio(w: Waveform, encoder: ExemplarEncoder,
                params: SpectralParams = SpectralParams()) -> Embedding:
    """Deterministic unit-norm embedding of one clip at the configured
    duration."""
    m = mel_spectrogram(w, params)
    if m.n_frames != encoder.n_frames:
        raise ExemplarError(f"expected {encoder.n_frames} mel frames "
                            f"(configured clip duration), got {m.n_frames}")
    with torch.no_grad():
        vec = encoder.embed_mels(torch.from_numpy(m.values).float().unsqueeze(0))
    return Embedding(vec[0].double().numpy())


def pretrain_encoder(clips, config: ExemplarConfig = ExemplarConfig()) -> tuple[ExemplarEncoder, dict]:
    """Supervised classification pretraining on (waveform-or-mel, class_id)
    pairs; the trunk and embedding projection are reused as the exemplar
    encoder afterwards."""
    pairs = list(clips)
    labels = np.array([c for _, c in pairs], dtype=np.int64)
    present = np.unique(labels)
    if present.size < 2:
        raise ExemplarError(f"need at least 2 classes, got {present.tolist()}")
    if labels.min() < 0 or labels.max() >= config.n_classes:
        raise ExemplarError("label outside [0, n_classes)")

    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    mels = _mel_batch([x for x, _ in pairs], config.params)
    targets = torch.from_numpy(labels)

    order = rng.permutation(len(pairs))
    n_val = max(1, int(len(pairs) * config.val_fraction))
    val_idx, train_idx = order[:n_val], order[n_val:]
    if train_idx.size == 0:
        raise ExemplarError("no training examples after validation split")

    model = ExemplarEncoder(config.n_classes, config.width, config.embed_dim,
                            config.context_dim, n_frames=mels.shape[1])
    opt = torch.optim.AdamW(model.parameters(), lr=config.lr, weight_decay=config.weight_decay)
    loss_fn = nn.CrossEntropyLoss()
    model.train()
    for _ in range(config.epochs):
        epoch_order = train_idx[rng.permutation(train_idx.size)]
        for start in range(0, epoch_order.size, config.batch_size):
            sel = epoch_order[start : start + config.batch_size]
            opt.zero_grad()
            loss = loss_fn(model(mels[sel]), targets[sel])
            loss.backward()
            opt.step()
    model.eval()
    model.trained = True

    with torch.no_grad():
        val_pred = model(mels[val_idx]).argmax(dim=1)
        val_acc = float((val_pred == targets[val_idx]).float().mean())
    meta = {"kind": "exemplar_encoder", "n_classes": config.n_classes,
            "width": config.width, "embed_dim": config.embed_dim,
            "context_dim": config.context_dim, "epochs": config.epochs,
            "seed": config.seed, "n_clips": len(pairs), "val_accuracy": val_acc}
    return model, meta


def build_conditioning(e1: Embedding, e2: Embedding, encoder: ExemplarEncoder,
                       pe_enabled: bool = True, null_flag: bool = False,
                       guidance_scale: float = 1.0) -> ConditioningBundle:
    """Assemble the (before, after) cross-attention sequence. With the
    null flag set the sequence is the learned null pair, independent of
    the embeddings."""
    if e1.dim != encoder.embed_dim or e2.dim != encoder.embed_dim:
        raise ExemplarError(f"embedding dims ({e1.dim}, {e2.dim}) do not match "
                            f"encoder L={encoder.embed_dim}")
    with torch.no_grad():
        if null_flag:
            seq = encoder.null_pair.detach().clone()
        else:
            pair = torch.from_numpy(np.stack([e1.vector, e2.vector])).float()
            seq = encoder.project_pair(pair[:1], pair[1:], pe_enabled)[0]
    return ConditioningBundle(seq, null_flag=null_flag, guidance_scale=guidance_scale)


def conditioning_dropout_mask(n: int, rng: np.random.Generator,
                              p: float = CONDITION_DROPOUT_P) -> torch.Tensor:
    """Boolean mask marking which training examples get the null pair."""
    return torch.from_numpy(rng.random(n) < p)


def save_encoder(path: str, model: ExemplarEncoder, meta: dict) -> None:
    save_checkpoint(path, state_dict_arrays(model.state_dict()),
                    {**meta, "n_classes": model.n_classes, "width": model.width,
                     "embed_dim": model.embed_dim, "context_dim": model.context_dim,
                     "n_frames": model.n_frames, "trained": model.trained})


def load_encoder(path: str) -> tuple[ExemplarEncoder, dict]:
    arrays, meta = load_checkpoint(path)
    model = ExemplarEncoder(int(meta["n_classes"]), int(meta["width"]),
                            int(meta["embed_dim"]), int(meta["context_dim"]),
                            int(meta.get("n_frames", 256)))
    load_state_dict(model, arrays)
    model.trained = bool(meta.get("trained", False))
    model.eval()
    return model, meta
