"""Objective evaluation: LSD, Fréchet embedding distance, classifier-based
KL / Inception Score, STOI, and the small texture classifier that supplies
posteriors and embeddings for the distribution metrics.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .audio import Waveform, resample
from .checkpoint import load_checkpoint, load_state_dict, save_checkpoint, state_dict_arrays
from .spectral import (MEL_NORM_BIAS, MEL_NORM_SCALE, MelSpectrogram,
                       SpectralParams, mel_spectrogram, stft)


class MetricsError(ValueError):
    pass


# --- log-spectral distance ----------------------------------------------------

LSD_FLOOR = 1e-8


def lsd(ref: Waveform, est: Waveform, params: SpectralParams = SpectralParams()) -> float:
    """Mean over frames of the per-frame RMS dB difference between STFT
    magnitude spectra (floored at 1e-8)."""
    if len(ref) != len(est):
        raise MetricsError(f"length mismatch: {len(ref)} vs {len(est)}")
    a = np.maximum(np.abs(stft(ref, params)), LSD_FLOOR)
    b = np.maximum(np.abs(stft(est, params)), LSD_FLOOR)
    diff = 20.0 * np.log10(a / b)
    return float(np.mean(np.sqrt(np.mean(diff**2, axis=1))))


def lsd_mel(ref: MelSpectrogram, est: MelSpectrogram) -> float:
    """Log-spectral distance over mel bands. Mel values are natural-log
    power, so the dB difference is 10/ln(10) times the raw difference.

    This is the codec-fair variant: comparing two Griffin-Lim renderings
    (or a rendering against a reference pushed through the same
    mel -> waveform chain) cancels the phase-reconstruction floor that
    dominates waveform-domain LSD."""
    if ref.values.shape != est.values.shape:
        raise MetricsError(f"shape mismatch: {ref.values.shape} vs {est.values.shape}")
    diff = (10.0 / np.log(10.0)) * (ref.values - est.values)
    return float(np.mean(np.sqrt(np.mean(diff**2, axis=1))))


# --- Fréchet distance over embeddings ------------------------------------------

PSD_TOLERANCE = -1e-8


@dataclass
class EmbeddingStats:
    mean: np.ndarray
    cov: np.ndarray
    n: int

    def __post_init__(self) -> None:
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.cov = np.asarray(self.cov, dtype=np.float64)
        if self.mean.ndim != 1 or self.cov.shape != (self.mean.size, self.mean.size):
            raise MetricsError(f"inconsistent stats shapes {self.mean.shape}, {self.cov.shape}")
        if self.n < 2:
            raise MetricsError(f"need n >= 2 embeddings, got {self.n}")
        if not np.allclose(self.cov, self.cov.T, atol=1e-10):
            raise MetricsError("covariance not symmetric")

    @staticmethod
    def from_embeddings(embeddings: np.ndarray) -> "EmbeddingStats":
        emb = np.asarray(embeddings, dtype=np.float64)
        if emb.ndim != 2 or emb.shape[0] < 2:
            raise MetricsError(f"need a (n >= 2, dim) embedding matrix, got {emb.shape}")
        cov = np.cov(emb, rowvar=False)
        cov = 0.5 * (cov + cov.T)
        return EmbeddingStats(emb.mean(axis=0), np.atleast_2d(cov), emb.shape[0])


def _psd_eigh(matrix: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    vals, vecs = np.linalg.eigh(0.5 * (matrix + matrix.T))
    if vals.min() < PSD_TOLERANCE * max(1.0, abs(vals.max())):
        raise MetricsError(f"matrix is not PSD (min eigenvalue {vals.min():.3e})")
    return np.clip(vals, 0.0, None), vecs


def frechet_distance(a: EmbeddingStats, b: EmbeddingStats) -> float:
    """‖μ₁−μ₂‖² + Tr(Σ₁+Σ₂−2(Σ₁Σ₂)^½), matrix root by eigendecomposition."""
    if a.mean.shape != b.mean.shape:
        raise MetricsError(f"dimension mismatch: {a.mean.shape} vs {b.mean.shape}")
    vals_a, vecs_a = _psd_eigh(a.cov)
    root_a = (vecs_a * np.sqrt(vals_a)) @ vecs_a.T
    inner_vals, _ = _psd_eigh(root_a @ b.cov @ root_a)
    trace_root = float(np.sum(np.sqrt(inner_vals)))
    diff = a.mean - b.mean
    return float(diff @ diff + np.trace(a.cov) + np.trace(b.cov) - 2.0 * trace_root)


# --- posterior-based metrics ----------------------------------------------------

KL_FLOOR = 1e-8


@dataclass
class PosteriorSet:
    probs: np.ndarray  # (n, C)

    def __post_init__(self) -> None:
        self.probs = np.asarray(self.probs, dtype=np.float64)
        if self.probs.ndim != 2 or self.probs.shape[0] == 0:
            raise MetricsError(f"expected a non-empty (n, C) grid, got {self.probs.shape}")
        if np.any(self.probs < 0):
            raise MetricsError("negative posterior probability")
        if np.max(np.abs(self.probs.sum(axis=1) - 1.0)) > 1e-6:
            raise MetricsError("posteriors do not sum to 1")

    def __len__(self) -> int:
        return self.probs.shape[0]


def _pairwise_kl(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    q = np.maximum(q, KL_FLOOR)
    terms = np.where(p > 0, p * np.log(np.maximum(p, KL_FLOOR) / q), 0.0)
    return terms.sum(axis=-1)


def kl_divergence(ref: PosteriorSet, est: PosteriorSet) -> float:
    """Mean over paired clips of Σ p·ln(p/q), q floored at 1e-8."""
    if ref.probs.shape != est.probs.shape:
        raise MetricsError(f"unpaired sets: {ref.probs.shape} vs {est.probs.shape}")
    return float(np.mean(_pairwise_kl(ref.probs, est.probs)))


def inception_score(est: PosteriorSet) -> float:
    """exp(mean KL from each posterior to the marginal)."""
    if len(est) < 2:
        raise MetricsError(f"inception score needs >= 2 clips, got {len(est)}")
    marginal = est.probs.mean(axis=0)
    return float(np.exp(np.mean(_pairwise_kl(est.probs, marginal[None, :]))))


# --- STOI -----------------------------------------------------------------------
#
# Canonical constants: 10 kHz analysis rate, 256-sample (25.6 ms) Hann frames
# at 50% overlap with 512-point FFT, silent-frame removal 40 dB under the
# loudest reference frame, 15 one-third-octave bands from 150 Hz, 30-frame
# (384 ms) segments, clipping at -15 dB signal-to-distortion.

STOI_RATE = 10_000
STOI_FRAME = 256
STOI_FFT = 512
STOI_BANDS = 15
STOI_LOW_HZ = 150.0
STOI_SEGMENT = 30
STOI_DYNAMIC_RANGE = 40.0
STOI_BETA = -15.0


def _stoi_frames(samples: np.ndarray) -> np.ndarray:
    hop = STOI_FRAME // 2
    n_frames = 1 + (samples.shape[0] - STOI_FRAME) // hop
    if n_frames < STOI_SEGMENT:
        raise MetricsError(f"signal too short for STOI: {n_frames} frames")
    idx = np.arange(STOI_FRAME)[None, :] + hop * np.arange(n_frames)[:, None]
    window = 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(STOI_FRAME) / STOI_FRAME)
    return samples[idx] * window[None, :]


def _third_octave_bands() -> np.ndarray:
    freqs = np.fft.rfftfreq(STOI_FFT, 1.0 / STOI_RATE)
    masks = np.zeros((STOI_BANDS, freqs.size), dtype=bool)
    for k in range(STOI_BANDS):
        center = STOI_LOW_HZ * 2.0 ** (k / 3.0)
        masks[k] = (freqs >= center * 2.0 ** (-1.0 / 6.0)) & (freqs < center * 2.0 ** (1.0 / 6.0))
    return masks


def stoi(ref: Waveform, est: Waveform) -> float:
    """Short-time objective intelligibility of `est` against clean `ref`."""
    if len(ref) != len(est):
        raise MetricsError(f"length mismatch: {len(ref)} vs {len(est)}")
    if ref.rms() < 1e-8:
        raise MetricsError("silent reference")
    x = resample(ref, STOI_RATE).samples if ref.sample_rate != STOI_RATE else ref.samples
    y = resample(est, STOI_RATE).samples if est.sample_rate != STOI_RATE else est.samples

    xf = _stoi_frames(x)
    yf = _stoi_frames(y)
    energy_db = 20.0 * np.log10(np.linalg.norm(xf, axis=1) + 1e-12)
    keep = energy_db > energy_db.max() - STOI_DYNAMIC_RANGE
    xf, yf = xf[keep], yf[keep]
    if xf.shape[0] < STOI_SEGMENT:
        raise MetricsError("too few active frames for STOI")

    masks = _third_octave_bands()
    xs = np.abs(np.fft.rfft(xf, STOI_FFT, axis=1)) ** 2
    ys = np.abs(np.fft.rfft(yf, STOI_FFT, axis=1)) ** 2
    x_band = np.sqrt(xs @ masks.T).T  # (bands, frames)
    y_band = np.sqrt(ys @ masks.T).T

    clip_gain = 1.0 + 10.0 ** (-STOI_BETA / 20.0)
    scores = []
    for m in range(STOI_SEGMENT, x_band.shape[1] + 1):
        xseg = x_band[:, m - STOI_SEGMENT : m]
        yseg = y_band[:, m - STOI_SEGMENT : m]
        alpha = np.linalg.norm(xseg, axis=1, keepdims=True) / (
            np.linalg.norm(yseg, axis=1, keepdims=True) + 1e-12)
        yc = np.minimum(yseg * alpha, xseg * clip_gain)
        xc = xseg - xseg.mean(axis=1, keepdims=True)
        yc = yc - yc.mean(axis=1, keepdims=True)
        denom = np.linalg.norm(xc, axis=1) * np.linalg.norm(yc, axis=1) + 1e-12
        scores.append((xc * yc).sum(axis=1) / denom)
    return float(np.mean(scores))


# --- texture classifier ----------------------------------------------------------


@dataclass
class ClassifierConfig:
    n_classes: int = 3
    width: int = 16
    epochs: int = 8
    batch_size: int = 32
    lr: float = 1e-3
    weight_decay: float = 1e-4
    val_fraction: float = 0.2
    seed: int = 0
    params: SpectralParams = field(default_factory=SpectralParams)

    def __post_init__(self) -> None:
        if self.n_classes < 2:
            raise MetricsError(f"need >= 2 classes, got {self.n_classes}")
        if not 0.0 < self.val_fraction < 1.0:
            raise MetricsError("val_fraction must be in (0, 1)")


class TextureClassifier(nn.Module):
    """Four strided conv stages on normalized log-mels, global average pool,
    linear head. The pooled features are the embedding space for the
    Fréchet metrics."""

    def __init__(self, n_classes: int = 3, width: int = 16):
        super().__init__()
        w = width
        self.n_classes = n_classes
        self.width = width
        self.stem = nn.Sequential(
            nn.Conv2d(1, w, 3, stride=2, padding=1), nn.GroupNorm(4, w), nn.SiLU(),
            nn.Conv2d(w, 2 * w, 3, stride=2, padding=1), nn.GroupNorm(4, 2 * w), nn.SiLU(),
            nn.Conv2d(2 * w, 4 * w, 3, stride=2, padding=1), nn.GroupNorm(4, 4 * w), nn.SiLU(),
            nn.Conv2d(4 * w, 4 * w, 3, stride=2, padding=1), nn.GroupNorm(4, 4 * w), nn.SiLU(),
        )
        self.head = nn.Linear(4 * w, n_classes)

    @property
    def embedding_dim(self) -> int:
        return 4 * self.width

    def features(self, mel: torch.Tensor) -> torch.Tensor:
        x = (mel + MEL_NORM_BIAS) / MEL_NORM_SCALE
        return self.stem(x.unsqueeze(1)).mean(dim=(2, 3))

    def forward(self, mel: torch.Tensor) -> torch.Tensor:
        return self.head(self.features(mel))


def _mel_batch(clips, params: SpectralParams) -> torch.Tensor:
    mels = []
    for clip in clips:
        if isinstance(clip, Waveform):
            mels.append(mel_spectrogram(clip, params).values)
        else:
            mels.append(np.asarray(clip, dtype=np.float64))
    return torch.from_numpy(np.stack(mels)).float()


def train_texture_classifier(clips, config: ClassifierConfig = ClassifierConfig()) -> tuple[TextureClassifier, dict]:
    """Train on (waveform-or-mel, class_id) pairs; returns the model in eval
    mode plus a metadata record with the validation accuracy."""
    pairs = list(clips)
    labels = np.array([c for _, c in pairs], dtype=np.int64)
    present = np.unique(labels)
    if present.size < 2:
        raise MetricsError(f"degenerate labels: classes present {present.tolist()}")
    if labels.min() < 0 or labels.max() >= config.n_classes:
        raise MetricsError("label outside [0, n_classes)")

    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    mels = _mel_batch([x for x, _ in pairs], config.params)
    targets = torch.from_numpy(labels)

    order = rng.permutation(len(pairs))
    n_val = max(1, int(len(pairs) * config.val_fraction))
    val_idx, train_idx = order[:n_val], order[n_val:]
    if train_idx.size == 0:
        raise MetricsError("no training examples after validation split")

    model = TextureClassifier(config.n_classes, config.width)
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

    with torch.no_grad():
        val_pred = model(mels[val_idx]).argmax(dim=1)
        val_acc = float((val_pred == targets[val_idx]).float().mean())
    meta = {"kind": "texture_classifier", "n_classes": config.n_classes,
            "width": config.width, "epochs": config.epochs, "seed": config.seed,
            "n_clips": len(pairs), "val_accuracy": val_acc}
    return model, meta


def save_classifier(path: str, model: TextureClassifier, meta: dict) -> None:
    save_checkpoint(path, state_dict_arrays(model.state_dict()),
                    {**meta, "n_classes": model.n_classes, "width": model.width})


def load_classifier(path: str) -> tuple[TextureClassifier, dict]:
    arrays, meta = load_checkpoint(path)
    model = TextureClassifier(int(meta["n_classes"]), int(meta["width"]))
    load_state_dict(model, arrays)
    model.eval()
    return model, meta


def classifier_posteriors(model: TextureClassifier, clips,
                          params: SpectralParams = SpectralParams(),
                          batch_size: int = 64) -> PosteriorSet:
    mels = _mel_batch(clips, params)
    outs = []
    with torch.no_grad():
        for start in range(0, mels.shape[0], batch_size):
            outs.append(torch.softmax(model(mels[start : start + batch_size]), dim=1))
    return PosteriorSet(torch.cat(outs).double().numpy())


def classifier_embeddings(model: TextureClassifier, clips,
                          params: SpectralParams = SpectralParams(),
                          batch_size: int = 64) -> np.ndarray:
    mels = _mel_batch(clips, params)
    outs = []
    with torch.no_grad():
        for start in range(0, mels.shape[0], batch_size):
            outs.append(model.features(mels[start : start + batch_size]))
    return torch.cat(outs).double().numpy()
