"""Conditional U-Net denoiser.

The noisy latent and the query latent enter channel-concatenated; the
timestep enters as a sinusoidal embedding projected into every residual
block; the exemplar conditioning sequence enters through cross-attention
in the last three encoder stages and first three decoder stages.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn
from torch.nn import functional as F


class UNetError(RuntimeError):
    pass


N_STAGES = 4  # stride-2 stages; spatial dims must divide 2**N_STAGES


def _groups(channels: int) -> int:
    for g in (4, 2, 1):
        if channels % g == 0:
            return g
    return 1


@dataclass(frozen=True)
class UNetConfig:
    latent_channels: int = 8
    widths: tuple[int, ...] = (32, 64, 128, 128)
    res_blocks: int = 2
    heads: int = 4
    t_dim: int = 128
    context_dim: int = 256

    def __post_init__(self) -> None:
        if len(self.widths) != N_STAGES:
            raise UNetError(f"need {N_STAGES} stage widths, got {len(self.widths)}")
        if any(w % self.heads for w in self.widths):
            raise UNetError(f"widths {self.widths} not divisible by {self.heads} heads")
        if self.res_blocks < 1:
            raise UNetError("res_blocks must be >= 1")
        if self.t_dim < 4 or self.t_dim % 2:
            raise UNetError("t_dim must be even and >= 4")
        if self.latent_channels < 1 or self.context_dim < 1:
            raise UNetError("latent_channels and context_dim must be positive")

    @property
    def attention_map(self) -> dict:
        return {"encoder": [stage >= 1 for stage in range(N_STAGES)],
                "decoder": [stage <= 2 for stage in range(N_STAGES)]}


def sinusoidal_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """(B,) timesteps -> (B, dim) sin/cos features spanning four decades."""
    half = dim // 2
    exponents = torch.arange(half, dtype=t.dtype) / (half - 1)
    freqs = torch.exp(-math.log(10_000.0) * exponents)
    args = t.view(-1, 1) * freqs.view(1, -1)
    return torch.cat([torch.sin(args), torch.cos(args)], dim=1)


class ResBlock(nn.Module):
    """Pre-norm residual block with an additive per-block timestep
    projection. The second conv starts at zero so a fresh block is the
    identity (plus skip projection)."""

    def __init__(self, c_in: int, c_out: int, t_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(c_in), c_in)
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.t_proj = nn.Linear(t_dim, c_out)
        self.norm2 = nn.GroupNorm(_groups(c_out), c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        nn.init.zeros_(self.conv2.weight)
        nn.init.zeros_(self.conv2.bias)
        self.skip = nn.Conv2d(c_in, c_out, 1) if c_in != c_out else nn.Identity()

    def forward(self, x: torch.Tensor, temb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.t_proj(F.silu(temb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class CrossAttention(nn.Module):
    """Multi-head attention from spatial positions to the 2-token exemplar
    context. Output projection starts at zero: a fresh layer is a no-op."""

    def __init__(self, channels: int, context_dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.head_dim = channels // heads
        self.norm = nn.GroupNorm(_groups(channels), channels)
        self.to_q = nn.Linear(channels, channels)
        self.to_k = nn.Linear(context_dim, channels)
        self.to_v = nn.Linear(context_dim, channels)
        self.to_out = nn.Linear(channels, channels)
        nn.init.zeros_(self.to_out.weight)
        nn.init.zeros_(self.to_out.bias)

    def forward(self, x: torch.Tensor, context: torch.Tensor) -> torch.Tensor:
        b, c, height, width = x.shape

        def split(t: torch.Tensor) -> torch.Tensor:
            return t.view(b, -1, self.heads, self.head_dim).transpose(1, 2)

        tokens = self.norm(x).view(b, c, height * width).transpose(1, 2)
        q = split(self.to_q(tokens))
        k = split(self.to_k(context))
        v = split(self.to_v(context))
        attn = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(self.head_dim), dim=-1)
        merged = (attn @ v).transpose(1, 2).reshape(b, height * width, c)
        out = self.to_out(merged).transpose(1, 2).view(b, c, height, width)
        return x + out


class _EncoderStage(nn.Module):
    def __init__(self, c_in: int, c_out: int, config: UNetConfig, attend: bool):
        super().__init__()
        self.res = nn.ModuleList(
            [ResBlock(c_in if i == 0 else c_out, c_out, config.t_dim)
             for i in range(config.res_blocks)])
        self.attn = CrossAttention(c_out, config.context_dim, config.heads) if attend else None
        self.down = nn.Conv2d(c_out, c_out, 3, stride=2, padding=1)


class _DecoderStage(nn.Module):
    def __init__(self, c_in: int, c_out: int, config: UNetConfig, attend: bool):
        super().__init__()
        self.up = nn.ConvTranspose2d(c_in, c_out, 4, stride=2, padding=1)
        # first res block also absorbs the skip concatenation
        self.res = nn.ModuleList(
            [ResBlock(2 * c_out if i == 0 else c_out, c_out, config.t_dim)
             for i in range(config.res_blocks)])
        self.attn = CrossAttention(c_out, config.context_dim, config.heads) if attend else None


class UNet(nn.Module):
    def __init__(self, config: UNetConfig = UNetConfig()):
        super().__init__()
        self.config = config
        w = config.widths
        self.in_conv = nn.Conv2d(2 * config.latent_channels, w[0], 3, padding=1)
        self.t_mlp = nn.Sequential(
            nn.Linear(config.t_dim, config.t_dim), nn.SiLU(),
            nn.Linear(config.t_dim, config.t_dim))
        enc_attend = config.attention_map["encoder"]
        dec_attend = config.attention_map["decoder"]
        self.encoder = nn.ModuleList(
            [_EncoderStage(w[i - 1] if i else w[0], w[i], config, enc_attend[i])
             for i in range(N_STAGES)])
        self.mid1 = ResBlock(w[-1], w[-1], config.t_dim)
        self.mid2 = ResBlock(w[-1], w[-1], config.t_dim)
        dec_w = tuple(reversed(w))  # (128, 128, 64, 32) at default widths
        self.decoder = nn.ModuleList(
            [_DecoderStage(w[-1] if i == 0 else dec_w[i - 1], dec_w[i], config, dec_attend[i])
             for i in range(N_STAGES)])
        self.out_norm = nn.GroupNorm(_groups(w[0]), w[0])
        self.out_conv = nn.Conv2d(w[0], config.latent_channels, 3, padding=1)
        # Timestep-gated passthrough of the two input latents.  At high noise
        # the optimal prediction is close to (z_t - sqrt(ab)*z_q)/sqrt(1-ab);
        # two learned scalar gains make that expressible from step one instead
        # of forcing the conv stack to learn identity transport.
        self.pass_gate = nn.Linear(config.t_dim, 2)
        # zero-init: a fresh denoiser predicts eps = 0 everywhere
        nn.init.zeros_(self.out_conv.weight)
        nn.init.zeros_(self.out_conv.bias)
        nn.init.zeros_(self.pass_gate.weight)
        nn.init.zeros_(self.pass_gate.bias)
        self.trained = False

    def forward(self, z_t: torch.Tensor, t: torch.Tensor, z_q: torch.Tensor,
                context: torch.Tensor) -> torch.Tensor:
        """z_t, z_q: (B, d, H, W); t: (B,); context: (B, 2, context_dim)."""
        if z_t.shape != z_q.shape:
            raise UNetError(f"z_t {tuple(z_t.shape)} and z_q {tuple(z_q.shape)} differ")
        if z_t.shape[1] != self.config.latent_channels:
            raise UNetError(f"expected {self.config.latent_channels} latent channels, "
                            f"got {z_t.shape[1]}")
        if z_t.shape[-2] % 2 ** N_STAGES or z_t.shape[-1] % 2 ** N_STAGES:
            raise UNetError(f"spatial dims {tuple(z_t.shape[-2:])} must divide "
                            f"{2 ** N_STAGES}")
        if context.shape[-1] != self.config.context_dim:
            raise UNetError(f"context width {context.shape[-1]} != "
                            f"{self.config.context_dim}")

        temb = self.t_mlp(sinusoidal_embedding(t.to(z_t.dtype), self.config.t_dim))
        h = self.in_conv(torch.cat([z_t, z_q], dim=1))
        skips = []
        for stage in self.encoder:
            for block in stage.res:
                h = block(h, temb)
            if stage.attn is not None:
                h = stage.attn(h, context)
            skips.append(h)
            h = stage.down(h)
        h = self.mid1(h, temb)
        h = self.mid2(h, temb)
        for stage in self.decoder:
            h = stage.up(h)
            h = torch.cat([h, skips.pop()], dim=1)
            for block in stage.res:
                h = block(h, temb)
            if stage.attn is not None:
                h = stage.attn(h, context)
        gate = self.pass_gate(temb)
        return (self.out_conv(F.silu(self.out_norm(h)))
                + gate[:, 0].view(-1, 1, 1, 1) * z_t
                + gate[:, 1].view(-1, 1, 1, 1) * z_q)

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())
