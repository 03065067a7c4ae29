"""Convolutional VAE compressing log-mel grids 4x in both axes into an
8-channel latent space. Deliberately small; the diffusion model lives in
its latent space and conditions on posterior means.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .checkpoint import load_checkpoint, load_state_dict, save_checkpoint, state_dict_arrays
from .spectral import MEL_NORM_BIAS, MEL_NORM_SCALE, MelSpectrogram, SpectralParams

COMPRESSION = 4  # two stride-2 stages


class VaeError(RuntimeError):
    pass


@dataclass
class Latent:
    """Diffusion-space tensor, channels last: (T/r) x (F/r) x d."""

    values: np.ndarray
    r: int = COMPRESSION

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 3:
            raise VaeError(f"latent must be 3-D, got shape {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise VaeError("non-finite latent values")

    @property
    def channels(self) -> int:
        return self.values.shape[2]


@dataclass
class VaeConfig:
    width: int = 32  # channels 32 -> 64 over the two downsampling stages
    latent_channels: int = 8
    beta_kl: float = 1e-4
    epochs: int = 20
    batch_size: int = 16
    lr: float = 1e-3
    seed: int = 0
    val_count: int = 64

    def __post_init__(self) -> None:
        if self.width < 2 or self.latent_channels < 1:
            raise VaeError("width and latent_channels must be positive")
        if self.beta_kl < 0:
            raise VaeError("beta_kl must be >= 0")


def _block(c_in: int, c_out: int, stride: int = 1) -> nn.Sequential:
    groups = min(4, c_out)
    return nn.Sequential(nn.Conv2d(c_in, c_out, 3, stride=stride, padding=1),
                         nn.GroupNorm(groups, c_out), nn.SiLU())


def _up_block(c_in: int, c_out: int) -> nn.Sequential:
    groups = min(4, c_out)
    return nn.Sequential(nn.ConvTranspose2d(c_in, c_out, 4, stride=2, padding=1),
                         nn.GroupNorm(groups, c_out), nn.SiLU())


class MelVae(nn.Module):
    """Two stride-2 stages down (W then 2W channels), refinement at latent
    resolution, mirrored transposed-conv decoder. Downsampling happens in the
    very first conv so almost no work runs at full mel resolution."""

    def __init__(self, width: int = 32, latent_channels: int = 8):
        super().__init__()
        self.width = width
        self.latent_channels = latent_channels
        self.trained = False
        w, d = width, latent_channels
        self.enc = nn.Sequential(
            _block(1, w, stride=2), _block(w, 2 * w, stride=2), _block(2 * w, 2 * w))
        self.to_moments = nn.Conv2d(2 * w, 2 * d, 3, padding=1)
        self.dec = nn.Sequential(
            _block(d, 2 * w), _block(2 * w, 2 * w),
            _up_block(2 * w, w), _up_block(w, max(w // 2, 1)))
        self.to_mel = nn.Conv2d(max(w // 2, 1), 1, 3, padding=1)

    def encode(self, mel_norm: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Normalized mel (B, 1, T, F) -> posterior (mu, logvar), each
        (B, d, T/4, F/4). T and F must be divisible by 4."""
        if mel_norm.shape[-2] % COMPRESSION or mel_norm.shape[-1] % COMPRESSION:
            raise VaeError(f"mel shape {tuple(mel_norm.shape[-2:])} not divisible by {COMPRESSION}")
        moments = self.to_moments(self.enc(mel_norm))
        mu, logvar = torch.chunk(moments, 2, dim=1)
        return mu, torch.clamp(logvar, -12.0, 8.0)

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        return self.to_mel(self.dec(z))

    @staticmethod
    def reparameterize(mu: torch.Tensor, logvar: torch.Tensor,
                       generator: torch.Generator | None = None) -> torch.Tensor:
        eps = torch.randn(mu.shape, generator=generator, dtype=mu.dtype)
        return mu + torch.exp(0.5 * logvar) * eps

    def elbo_terms(self, mel_norm: torch.Tensor,
                   generator: torch.Generator | None = None) -> tuple[torch.Tensor, torch.Tensor]:
        """(reconstruction MSE, Gaussian KL), both per-element means."""
        mu, logvar = self.encode(mel_norm)
        z = self.reparameterize(mu, logvar, generator)
        recon = self.decode(z)
        rec = torch.mean((recon - mel_norm) ** 2)
        kl = 0.5 * torch.mean(mu**2 + torch.exp(logvar) - 1.0 - logvar)
        return rec, kl


def normalize_mel(values: np.ndarray) -> torch.Tensor:
    arr = (np.asarray(values, dtype=np.float32) + MEL_NORM_BIAS) / MEL_NORM_SCALE
    return torch.from_numpy(arr)


def denormalize_mel(tensor: torch.Tensor) -> np.ndarray:
    return tensor.detach().double().numpy() * MEL_NORM_SCALE - MEL_NORM_BIAS


def _as_mel_tensor(data) -> torch.Tensor:
    mels = []
    for item in data:
        values = item.values if isinstance(item, MelSpectrogram) else np.asarray(item)
        mels.append(normalize_mel(values))
    if not mels:
        raise VaeError("empty spectrogram collection")
    return torch.stack(mels).unsqueeze(1)


def train_vae(data, config: VaeConfig = VaeConfig()) -> tuple[MelVae, dict]:
    """ELBO training on >= 500 log-mel grids. Returns the model in eval
    mode and a metadata record including the validation-loss curve."""
    batch = _as_mel_tensor(data)
    if batch.shape[0] < 500:
        raise VaeError(f"need >= 500 spectrograms, got {batch.shape[0]}")
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    order = rng.permutation(batch.shape[0])
    val_idx = order[: config.val_count]
    train_idx = order[config.val_count :]

    model = MelVae(config.width, config.latent_channels)
    opt = torch.optim.AdamW(model.parameters(), lr=config.lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=max(config.epochs, 1))
    gen = torch.Generator().manual_seed(config.seed)

    def val_losses() -> tuple[float, float]:
        model.eval()
        with torch.no_grad():
            # posterior mean, no sampling noise: stable curve
            mu, logvar = model.encode(batch[val_idx])
            rec = torch.mean((model.decode(mu) - batch[val_idx]) ** 2)
            kl = 0.5 * torch.mean(mu**2 + torch.exp(logvar) - 1.0 - logvar)
        model.train()
        return float(rec), float(kl)

    curve = [val_losses()]
    for epoch in range(config.epochs):
        epoch_order = train_idx[rng.permutation(train_idx.size)]
        for start in range(0, epoch_order.size, config.batch_size):
            sel = epoch_order[start : start + config.batch_size]
            opt.zero_grad()
            rec, kl = model.elbo_terms(batch[sel], gen)
            loss = rec + config.beta_kl * kl
            if not torch.isfinite(loss):
                raise VaeError(f"loss diverged (non-finite) at epoch {epoch}, "
                               f"batch offset {start}")
            loss.backward()
            opt.step()
        sched.step()
        curve.append(val_losses())

    model.eval()
    model.trained = True
    meta = {"kind": "mel_vae", "width": config.width,
            "latent_channels": config.latent_channels, "beta_kl": config.beta_kl,
            "epochs": config.epochs, "seed": config.seed, "n_train": int(train_idx.size),
            "val_curve": curve, "val_recon_first": curve[0][0], "val_recon_last": curve[-1][0]}
    return model, meta


def vae_encode(m: MelSpectrogram, model: MelVae, sample: bool = False,
               generator: torch.Generator | None = None) -> Latent:
    """Posterior mean by default (the z_q convention); a reparameterized
    draw when sample=True."""
    if not model.trained:
        raise VaeError("checkpoint is untrained")
    tensor = normalize_mel(m.values).unsqueeze(0).unsqueeze(0)
    with torch.no_grad():
        mu, logvar = model.encode(tensor)
        z = model.reparameterize(mu, logvar, generator) if sample else mu
    return Latent(z[0].permute(1, 2, 0).double().numpy())


def vae_decode(z: Latent, model: MelVae,
               params: SpectralParams = SpectralParams()) -> MelSpectrogram:
    if z.channels != model.latent_channels:
        raise VaeError(f"latent has {z.channels} channels, model wants "
                       f"{model.latent_channels}")
    tensor = torch.from_numpy(z.values).float().permute(2, 0, 1).unsqueeze(0)
    with torch.no_grad():
        mel_norm = model.decode(tensor)
    values = denormalize_mel(mel_norm[0, 0])
    return MelSpectrogram(np.maximum(values, np.log(params.log_floor)), params)


def save_vae(path: str, model: MelVae, meta: dict) -> None:
    save_checkpoint(path, state_dict_arrays(model.state_dict()),
                    {**meta, "width": model.width,
                     "latent_channels": model.latent_channels,
                     "trained": model.trained})


def load_vae(path: str) -> tuple[MelVae, dict]:
    arrays, meta = load_checkpoint(path)
    model = MelVae(int(meta["width"]), int(meta["latent_channels"]))
    load_state_dict(model, arrays)
    model.trained = bool(meta.get("trained", False))
    model.eval()
    return model, meta
