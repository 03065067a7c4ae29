"""Conditional latent diffusion: noise schedule, forward noising,
classifier-free guidance, deterministic DDIM sampling, joint training of
the denoiser and exemplar encoder, and the end-to-end transform.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np
import torch

from .audio import Waveform
from .checkpoint import load_checkpoint, load_state_dict, save_checkpoint, state_dict_arrays
from .exemplar import (
    CONDITION_DROPOUT_P,
    ConditioningBundle,
    ExemplarEncoder,
    build_conditioning,
    conditioning_dropout_mask,
    embed_audio,
)
from .spectral import SpectralParams, griffin_lim, mel_spectrogram
from .unet import UNet, UNetConfig
from .vae import Latent, MelVae, vae_decode, vae_encode

DEFAULT_N_STEPS = 1000
DEFAULT_BETA_1 = 0.0015
DEFAULT_BETA_N = 0.0195
DEFAULT_GUIDANCE = 4.5
DEFAULT_SAMPLER_STEPS = 200


class DiffusionError(RuntimeError):
    pass


@dataclass
class NoiseSchedule:
    """Linear beta schedule. Arrays are 1-indexed by timestep; index 0 is
    the identity boundary (beta 0, alpha_bar 1) used by the final DDIM
    update."""

    n_steps: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray

    def __post_init__(self) -> None:
        for name in ("beta", "alpha", "alpha_bar"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        if self.beta.shape != (self.n_steps + 1,):
            raise DiffusionError(f"schedule arrays must have length N+1, got {self.beta.shape}")
        body = self.beta[1:]
        if not (np.all(np.diff(body) > 0) and 0 < body[0] and body[-1] < 1):
            raise DiffusionError("beta must be strictly increasing within (0, 1)")
        if not np.all(np.diff(self.alpha_bar[1:]) < 0):
            raise DiffusionError("alpha_bar must be strictly decreasing")

    @property
    def fingerprint(self) -> dict:
        return {"n_steps": self.n_steps, "beta_1": float(self.beta[1]),
                "beta_n": float(self.beta[self.n_steps])}


def make_schedule(n_steps: int = DEFAULT_N_STEPS, beta_1: float = DEFAULT_BETA_1,
                  beta_n: float = DEFAULT_BETA_N) -> NoiseSchedule:
    """beta[t] = beta_1 + (t-1)/(N-1) * (beta_n - beta_1), t = 1..N."""
    if not 0 < beta_1 < beta_n < 1:
        raise DiffusionError(f"need 0 < beta_1 < beta_n < 1, got ({beta_1}, {beta_n})")
    if n_steps < 2:
        raise DiffusionError(f"need at least 2 steps, got {n_steps}")
    t = np.arange(n_steps + 1, dtype=np.float64)
    beta = beta_1 + (t - 1.0) / (n_steps - 1.0) * (beta_n - beta_1)
    beta[0] = 0.0
    # endpoints must reproduce the configured values bit for bit
    beta[1] = beta_1
    beta[n_steps] = beta_n
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    return NoiseSchedule(n_steps, beta, alpha, alpha_bar)


def schedule_steps(n_steps: int, k: int) -> np.ndarray:
    """k sampling timesteps, evenly spaced over [1, N] including both
    endpoints, descending."""
    if not 1 <= k <= n_steps:
        raise DiffusionError(f"step count {k} outside [1, {n_steps}]")
    if k == 1:
        return np.array([n_steps], dtype=np.int64)
    steps = np.rint(np.linspace(1, n_steps, k)).astype(np.int64)
    if np.unique(steps).size != k:
        raise DiffusionError("step subset collapsed; reduce k")
    return steps[::-1].copy()


def q_sample(z0: Latent, t: int, eps: np.ndarray, schedule: NoiseSchedule) -> Latent:
    """z_t = sqrt(alpha_bar[t]) z0 + sqrt(1 - alpha_bar[t]) eps."""
    if not 1 <= t <= schedule.n_steps:
        raise DiffusionError(f"t={t} outside [1, {schedule.n_steps}]")
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape != z0.values.shape:
        raise DiffusionError(f"eps shape {eps.shape} != latent shape {z0.values.shape}")
    ab = schedule.alpha_bar[t]
    return Latent(np.sqrt(ab) * z0.values + np.sqrt(1.0 - ab) * eps)


def combine_guidance(eps_cond, eps_uncond, guidance_scale: float):
    """Eq-style guidance: lambda * eps_cond + (1 - lambda) * eps_uncond.

    Written as eps_uncond + lambda * (eps_cond - eps_uncond) so equal
    branches are a bit-exact fixed point; lambda = 1 short-circuits to the
    conditional branch, which the algebra reduces to anyway.
    """
    if guidance_scale == 1.0:
        return eps_cond
    return eps_uncond + guidance_scale * (eps_cond - eps_uncond)


@dataclass
class SamplerConfig:
    steps: int = DEFAULT_SAMPLER_STEPS
    eta: float = 0.0
    guidance_scale: float = DEFAULT_GUIDANCE
    seed: int = 0
    # Clamp on the per-step z0 estimate.  Latents are trained near unit scale,
    # so an estimate outside a few sigma is model error that the re-projection
    # would otherwise amplify across the remaining steps.  None disables.
    clip_x0: float | None = 3.0

    def __post_init__(self) -> None:
        if self.steps < 1:
            raise DiffusionError("steps must be >= 1")
        if not 0.0 <= self.eta <= 1.0:
            raise DiffusionError(f"eta must be in [0, 1], got {self.eta}")
        if self.guidance_scale < 1.0:
            raise DiffusionError(f"guidance scale must be >= 1, got {self.guidance_scale}")
        if self.clip_x0 is not None and self.clip_x0 <= 0.0:
            raise DiffusionError(f"clip_x0 must be positive or None, got {self.clip_x0}")


def _to_net(values: np.ndarray) -> torch.Tensor:
    # channels-last float64 grid -> (1, d, H, W) float32
    return torch.from_numpy(values).float().permute(2, 0, 1).unsqueeze(0)


def _from_net(tensor: torch.Tensor) -> np.ndarray:
    return tensor[0].detach().double().permute(1, 2, 0).numpy()


def denoiser_forward(z_t: Latent, t: int, z_q: Latent, cond: ConditioningBundle,
                     model: UNet) -> Latent:
    """Single-example eps prediction; shapes follow the latent contract."""
    if z_t.values.shape != z_q.values.shape:
        raise DiffusionError(f"z_t {z_t.values.shape} and z_q {z_q.values.shape} differ")
    with torch.no_grad():
        out = model(_to_net(z_t.values), torch.tensor([float(t)]),
                    _to_net(z_q.values), cond.sequence.unsqueeze(0))
    return Latent(_from_net(out))


def cfg_eps(z_t: Latent, t: int, z_q: Latent, cond: ConditioningBundle,
            guidance_scale: float, model: UNet, encoder: ExemplarEncoder) -> Latent:
    """Exactly two denoiser evaluations: conditional and null-conditioned,
    combined per the guidance equation."""
    eps_c = denoiser_forward(z_t, t, z_q, cond, model)
    null = ConditioningBundle(encoder.null_pair.detach().clone(), null_flag=True,
                              guidance_scale=guidance_scale)
    eps_u = denoiser_forward(z_t, t, z_q, null, model)
    return Latent(combine_guidance(eps_c.values, eps_u.values, guidance_scale))


def ddim_integrate(z_init: np.ndarray, steps: np.ndarray, alpha_bar: np.ndarray,
                   eps_fn, eta: float = 0.0,
                   rng: np.random.Generator | None = None,
                   clip_x0: float | None = None) -> np.ndarray:
    """Generic DDIM loop in float64. `eps_fn(z, t) -> eps` supplies the
    noise prediction; with eta = 0 the trajectory is deterministic."""
    if eta > 0.0 and rng is None:
        raise DiffusionError("eta > 0 needs an rng for the stochastic term")
    z = np.asarray(z_init, dtype=np.float64).copy()
    z0 = z
    for i, t_now in enumerate(steps):
        t_prev = steps[i + 1] if i + 1 < len(steps) else 0
        ab_now = alpha_bar[t_now]
        ab_prev = alpha_bar[t_prev]
        eps = eps_fn(z, int(t_now))
        z0 = (z - np.sqrt(1.0 - ab_now) * eps) / np.sqrt(ab_now)
        if clip_x0 is not None:
            z0 = np.clip(z0, -clip_x0, clip_x0)
            # keep eps consistent with the clamped estimate
            eps = (z - np.sqrt(ab_now) * z0) / np.sqrt(1.0 - ab_now)
        if eta > 0.0:
            sigma = eta * np.sqrt((1.0 - ab_prev) / (1.0 - ab_now)) \
                * np.sqrt(1.0 - ab_now / ab_prev)
        else:
            sigma = 0.0
        direction = np.sqrt(max(1.0 - ab_prev - sigma**2, 0.0)) * eps
        z = np.sqrt(ab_prev) * z0 + direction
        if sigma > 0.0:
            z = z + sigma * rng.standard_normal(z.shape)
    return z


def ddim_sample(z_q: Latent, cond: ConditioningBundle, sampler: SamplerConfig,
                model: UNet, encoder: ExemplarEncoder,
                schedule: NoiseSchedule) -> Latent:
    """Seeded standard-normal start, guided eps at every step, deterministic
    update at eta = 0. Reduction order is pinned to a single thread so equal
    seeds give bit-identical latents."""
    if sampler.steps > schedule.n_steps:
        raise DiffusionError(f"{sampler.steps} sampling steps > N={schedule.n_steps}")
    steps = schedule_steps(schedule.n_steps, sampler.steps)
    rng = np.random.default_rng(sampler.seed)
    z_init = rng.standard_normal(z_q.values.shape)
    z_q_net = _to_net(z_q.values)
    null_seq = encoder.null_pair.detach().clone().unsqueeze(0)
    cond_seq = cond.sequence.unsqueeze(0)

    def eps_fn(z: np.ndarray, t: int) -> np.ndarray:
        z_net = _to_net(z)
        t_net = torch.tensor([float(t)])
        with torch.no_grad():
            eps_c = model(z_net, t_net, z_q_net, cond_seq)
            eps_u = model(z_net, t_net, z_q_net, null_seq)
        return combine_guidance(_from_net(eps_c), _from_net(eps_u),
                                sampler.guidance_scale)

    n_threads = torch.get_num_threads()
    torch.set_num_threads(1)
    try:
        z0 = ddim_integrate(z_init, steps, schedule.alpha_bar, eps_fn,
                            eta=sampler.eta, rng=rng, clip_x0=sampler.clip_x0)
    finally:
        torch.set_num_threads(n_threads)
    return Latent(z0)


@dataclass
class TrainingSet:
    """Precomputed tensors for diffusion training: target latents z0,
    query latents z_q (both unscaled, channels-first float32) and the
    exemplar mel pairs the encoder fine-tunes on."""

    z0: torch.Tensor  # (N, d, H, W)
    z_q: torch.Tensor  # (N, d, H, W)
    exemplar_mels: torch.Tensor  # (N, 2, T, F)

    def __post_init__(self) -> None:
        if self.z0.shape != self.z_q.shape:
            raise DiffusionError("z0 and z_q shapes differ")
        if self.exemplar_mels.shape[:2] != (self.z0.shape[0], 2):
            raise DiffusionError("exemplar mels must be (N, 2, T, F)")

    def __len__(self) -> int:
        return int(self.z0.shape[0])


@dataclass
class TrainConfig:
    steps: int = 5000
    batch_size: int = 16
    lr: float = 1e-4
    betas: tuple[float, float] = (0.95, 0.999)
    adam_eps: float = 1e-6
    weight_decay: float = 1e-3
    dropout_p: float = CONDITION_DROPOUT_P
    pe_enabled: bool = True
    seed: int = 0
    val_count: int = 64
    log_every: int = 250
    snapshot_every: int = 50

    def __post_init__(self) -> None:
        if self.steps < 1 or self.batch_size < 1:
            raise DiffusionError("steps and batch_size must be positive")
        if not 0.0 <= self.dropout_p <= 1.0:
            raise DiffusionError("dropout_p must be in [0, 1]")


def train_diffusion(data: TrainingSet, unet: UNet, encoder: ExemplarEncoder,
                    schedule: NoiseSchedule,
                    config: TrainConfig = TrainConfig()) -> dict:
    """Eps-prediction MSE over uniformly drawn timesteps with 10%
    null-conditioning dropout; the exemplar encoder is fine-tuned jointly.
    Mutates unet and encoder in place; returns the training record."""
    n = len(data)
    if n < config.val_count + config.batch_size:
        raise DiffusionError(f"training set of {n} too small for "
                             f"val_count={config.val_count}")
    rng = np.random.default_rng(config.seed)
    gen = torch.Generator().manual_seed(config.seed)
    perm = rng.permutation(n)
    val_idx, train_idx = perm[: config.val_count], perm[config.val_count :]

    scale = 1.0 / max(float(data.z0[train_idx].std()), 1e-6)
    z0_all = data.z0 * scale
    zq_all = data.z_q * scale

    # fixed validation triples: evenly spaced t, one frozen noise draw
    val_t = torch.from_numpy(
        np.rint(np.linspace(1, schedule.n_steps, config.val_count)).astype(np.int64))
    val_eps = torch.randn(z0_all[val_idx].shape, generator=gen)
    ab = torch.from_numpy(schedule.alpha_bar).float()

    def noised(z0: torch.Tensor, t: torch.Tensor, eps: torch.Tensor) -> torch.Tensor:
        a = ab[t].view(-1, 1, 1, 1)
        return torch.sqrt(a) * z0 + torch.sqrt(1.0 - a) * eps

    def val_loss() -> float:
        unet.eval()
        encoder.eval()
        with torch.no_grad():
            mels = data.exemplar_mels[val_idx]
            e1 = encoder.embed_mels(mels[:, 0])
            e2 = encoder.embed_mels(mels[:, 1])
            seq = encoder.project_pair(e1, e2, config.pe_enabled)
            z_t = noised(z0_all[val_idx], val_t, val_eps)
            eps_hat = unet(z_t, val_t.float(), zq_all[val_idx], seq)
            loss = torch.mean((eps_hat - val_eps) ** 2)
        unet.train()
        encoder.train()
        return float(loss)

    params = list(itertools.chain(unet.parameters(), encoder.parameters()))
    opt = torch.optim.AdamW(params, lr=config.lr, betas=config.betas,
                            eps=config.adam_eps, weight_decay=config.weight_decay)
    unet.train()
    encoder.train()

    def snapshot() -> dict:
        return {"unet": {k: v.detach().clone() for k, v in unet.state_dict().items()},
                "encoder": {k: v.detach().clone() for k, v in encoder.state_dict().items()}}

    last_good, last_good_step = snapshot(), 0
    curve = [(0, val_loss())]
    dropped = 0
    for step in range(1, config.steps + 1):
        sel = train_idx[rng.integers(0, train_idx.size, config.batch_size)]
        t = torch.from_numpy(rng.integers(1, schedule.n_steps + 1, config.batch_size))
        eps = torch.randn(z0_all[sel].shape, generator=gen)
        z_t = noised(z0_all[sel], t, eps)
        mels = data.exemplar_mels[sel]
        e1 = encoder.embed_mels(mels[:, 0])
        e2 = encoder.embed_mels(mels[:, 1])
        seq = encoder.project_pair(e1, e2, config.pe_enabled)
        mask = conditioning_dropout_mask(config.batch_size, rng, config.dropout_p)
        dropped += int(mask.sum())
        seq = encoder.apply_null(seq, mask)

        opt.zero_grad()
        eps_hat = unet(z_t, t.float(), zq_all[sel], seq)
        loss = torch.mean((eps_hat - eps) ** 2)
        if not torch.isfinite(loss):
            unet.load_state_dict(last_good["unet"])
            encoder.load_state_dict(last_good["encoder"])
            raise DiffusionError(f"loss diverged (non-finite) at step {step}; "
                                 f"parameters restored from step {last_good_step}")
        loss.backward()
        opt.step()

        if step % config.snapshot_every == 0:
            last_good, last_good_step = snapshot(), step
        if step % config.log_every == 0 or step == config.steps:
            curve.append((step, val_loss()))

    unet.eval()
    encoder.eval()
    unet.trained = True
    return {"kind": "denoiser", "steps": config.steps, "seed": config.seed,
            "latent_scale": scale, "pe_enabled": config.pe_enabled,
            "val_curve": curve, "val_loss_first": curve[0][1],
            "val_loss_last": curve[-1][1],
            "dropout_rate": dropped / (config.steps * config.batch_size),
            "n_train": int(train_idx.size)}


@dataclass
class TransformBundle:
    """Everything the end-to-end transform needs: the trained denoiser and
    encoder, the frozen latent codec, the schedule, and the latent scale
    measured at training time."""

    unet: UNet
    encoder: ExemplarEncoder
    vae: MelVae
    schedule: NoiseSchedule
    latent_scale: float = 1.0
    pe_enabled: bool = True
    params: SpectralParams = field(default_factory=SpectralParams)


def transform(a_q: Waveform, a_e1: Waveform, a_e2: Waveform,
              bundle: TransformBundle,
              sampler: SamplerConfig = SamplerConfig()) -> Waveform:
    """Apply the transformation demonstrated by (a_e1 -> a_e2) to a_q.
    The target-side codec path is never invoked: only the query is encoded,
    and the output latent is decoded straight to a waveform."""
    e1 = embed_audio(a_e1, bundle.encoder, bundle.params)
    e2 = embed_audio(a_e2, bundle.encoder, bundle.params)
    cond = build_conditioning(e1, e2, bundle.encoder, pe_enabled=bundle.pe_enabled,
                              guidance_scale=sampler.guidance_scale)
    z_q = vae_encode(mel_spectrogram(a_q, bundle.params), bundle.vae)
    z_q_scaled = Latent(z_q.values * bundle.latent_scale)
    z0_hat = ddim_sample(z_q_scaled, cond, sampler, bundle.unet, bundle.encoder,
                         bundle.schedule)
    z0 = Latent(z0_hat.values / bundle.latent_scale)
    mel = vae_decode(z0, bundle.vae, bundle.params)
    return griffin_lim(mel, sample_rate=a_q.sample_rate)


def save_denoiser(path: str, unet: UNet, schedule: NoiseSchedule, meta: dict) -> None:
    config = unet.config
    save_checkpoint(path, state_dict_arrays(unet.state_dict()),
                    {**meta, "latent_channels": config.latent_channels,
                     "widths": list(config.widths), "res_blocks": config.res_blocks,
                     "heads": config.heads, "t_dim": config.t_dim,
                     "context_dim": config.context_dim,
                     "attention_map": config.attention_map,
                     "schedule": schedule.fingerprint,
                     "trained": getattr(unet, "trained", False)})


def load_denoiser(path: str) -> tuple[UNet, NoiseSchedule, dict]:
    arrays, meta = load_checkpoint(path)
    config = UNetConfig(latent_channels=int(meta["latent_channels"]),
                        widths=tuple(meta["widths"]),
                        res_blocks=int(meta["res_blocks"]), heads=int(meta["heads"]),
                        t_dim=int(meta["t_dim"]), context_dim=int(meta["context_dim"]))
    unet = UNet(config)
    load_state_dict(unet, arrays)
    unet.trained = bool(meta.get("trained", False))
    unet.eval()
    fp = meta["schedule"]
    schedule = make_schedule(int(fp["n_steps"]), float(fp["beta_1"]), float(fp["beta_n"]))
    return unet, schedule, meta
