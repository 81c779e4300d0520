"""Toy inpainting denoiser: a two-level UNet with self- and cross-attention."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F
from torch import nn

from ..errors import ShapeMismatch


@dataclass(frozen=True)
class UNetConfig:
    latent_channels: int = 3
    channels: tuple[int, int] = (32, 64)
    d_ctx: int = 64
    heads: int = 4
    cross_levels: tuple[str, ...] = ("enc0", "enc1", "mid", "dec1", "dec0")

    def to_dict(self):
        d = asdict(self)
        d["channels"] = list(self.channels)
        d["cross_levels"] = list(self.cross_levels)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["channels"] = tuple(d["channels"])
        d["cross_levels"] = tuple(d.get("cross_levels", cls.cross_levels))
        return cls(**d)


@dataclass
class DenoiserInput:
    z_t: torch.Tensor            # (B, c, h, w)
    t: torch.Tensor              # (B,) model-facing timesteps
    m: torch.Tensor              # (B, 1, h, w), 1 = region to synthesize
    masked_latent: torch.Tensor  # (1 - m) * z_crop
    c_ctx: torch.Tensor          # (B, tokens, d_ctx)

    def validate(self):
        B, _, h, w = self.z_t.shape
        if self.masked_latent.shape != self.z_t.shape:
            raise ShapeMismatch("masked latent and z_t differ in shape")
        if self.m.shape != (B, 1, h, w):
            raise ShapeMismatch(f"mask shape {tuple(self.m.shape)} != {(B, 1, h, w)}")
        if self.c_ctx.ndim != 3 or self.c_ctx.shape[0] != B:
            raise ShapeMismatch(f"context shape {tuple(self.c_ctx.shape)}")


def groups_for(ch: int) -> int:
    for g in (8, 4, 2):
        if ch % g == 0:
            return g
    return 1


def timestep_embedding(t: torch.Tensor, dim: int, dtype=torch.float32) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb.to(dtype)


def attention(q, k, v, heads: int, return_weights: bool = False):
    """Multi-head scaled dot-product attention on ``(B, N, C)`` token tensors."""
    B, N, C = q.shape
    M = k.shape[1]
    dh = C // heads
    q = q.view(B, N, heads, dh).transpose(1, 2)
    k = k.view(B, M, heads, dh).transpose(1, 2)
    v = v.view(B, M, heads, dh).transpose(1, 2)
    w = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(dh), dim=-1)
    out = (w @ v).transpose(1, 2).reshape(B, N, C)
    return (out, w) if return_weights else out


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int, ctx_dim: int | None = None):
        super().__init__()
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by {heads} heads")
        self.heads = heads
        kv = ctx_dim or dim
        self.to_q = nn.Linear(dim, dim)
        self.to_k = nn.Linear(kv, dim)
        self.to_v = nn.Linear(kv, dim)
        self.to_out = nn.Linear(dim, dim)

    def forward(self, x, ctx=None, return_weights=False):
        ctx = x if ctx is None else ctx
        res = attention(self.to_q(x), self.to_k(ctx), self.to_v(ctx), self.heads, return_weights)
        if return_weights:
            return self.to_out(res[0]), res[1]
        return self.to_out(res)


class SelfAttnBlock(nn.Module):
    def __init__(self, dim, heads):
        super().__init__()
        self.norm = nn.GroupNorm(groups_for(dim), dim)
        self.attn = Attention(dim, heads)

    def forward(self, h):
        B, C, H, W = h.shape
        x = self.norm(h).flatten(2).transpose(1, 2)
        return h + self.attn(x).transpose(1, 2).reshape(B, C, H, W)


class CrossAttnBlock(nn.Module):
    def __init__(self, dim, heads, ctx_dim):
        super().__init__()
        self.norm = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads, ctx_dim)

    def forward(self, h, ctx):
        B, C, H, W = h.shape
        x = self.norm(h.flatten(2).transpose(1, 2))
        return h + self.attn(x, ctx).transpose(1, 2).reshape(B, C, H, W)


class ResBlock(nn.Module):
    def __init__(self, cin, cout, temb_dim):
        super().__init__()
        self.norm1 = nn.GroupNorm(groups_for(cin), cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.temb = nn.Linear(temb_dim, cout)
        self.norm2 = nn.GroupNorm(groups_for(cout), cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb(temb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class LatentSkip(nn.Module):
    """Per-channel, timestep-conditioned linear path from ``z_t`` (and the known
    latent) to the noise estimate.

    For a channel whose clean signal is small the best noise estimate is a gain
    times ``z_t``; this path carries that without squeezing every latent channel
    through the first UNet level. The gate starts at zero, so the head still
    predicts zero at initialization.
    """

    def __init__(self, latent_channels: int, temb_dim: int):
        super().__init__()
        self.coef = nn.Linear(temb_dim, 3 * latent_channels)
        nn.init.normal_(self.coef.weight, std=1e-3)
        nn.init.zeros_(self.coef.bias)
        self.gate = nn.Parameter(torch.zeros(latent_channels))

    def forward(self, z_t, m, masked_latent, temb):
        # log-gain in holes, log-gain on known cells, scale of the known signal
        log_hole, log_known, scale = self.coef(temb)[:, :, None, None].chunk(3, dim=1)
        hole = log_hole.clamp(max=10).exp() * z_t
        known = log_known.clamp(max=10).exp() * (z_t - torch.sigmoid(scale) * masked_latent)
        return self.gate[None, :, None, None] * (m * hole + (1 - m) * known)


class ToyUNet(nn.Module):
    """Encoder-decoder with two 2x downsamplings.

    Input channels are ``[z_t, m, masked_latent]``; the timestep embedding enters
    every residual block, self-attention runs at the bottleneck and
    cross-attention blocks read the context embedding at each level listed in
    ``config.cross_levels``. The output head is zero-initialized.
    """

    def __init__(self, config: UNetConfig = UNetConfig()):
        super().__init__()
        self.config = config
        c0, c1 = config.channels
        lc = config.latent_channels
        temb = 4 * c0
        self.time_mlp = nn.Sequential(nn.Linear(c0, temb), nn.SiLU(), nn.Linear(temb, temb))
        self.conv_in = nn.Conv2d(2 * lc + 1, c0, 3, padding=1)
        self.enc0 = ResBlock(c0, c0, temb)
        self.down0 = nn.Conv2d(c0, c1, 3, stride=2, padding=1)
        self.enc1 = ResBlock(c1, c1, temb)
        self.down1 = nn.Conv2d(c1, c1, 3, stride=2, padding=1)
        self.mid = ResBlock(c1, c1, temb)
        self.self_attn = SelfAttnBlock(c1, config.heads)
        self.up1 = nn.Conv2d(c1, c1, 3, padding=1)
        self.dec1 = ResBlock(2 * c1, c1, temb)
        self.up0 = nn.Conv2d(c1, c0, 3, padding=1)
        self.dec0 = ResBlock(2 * c0, c0, temb)
        self.norm_out = nn.GroupNorm(groups_for(c0), c0)
        self.conv_out = nn.Conv2d(c0, lc, 3, padding=1)
        self.skip = LatentSkip(lc, temb)
        dims = {"enc0": c0, "enc1": c1, "mid": c1, "dec1": c1, "dec0": c0}
        self.cross_attn = nn.ModuleDict(
            {lvl: CrossAttnBlock(dims[lvl], config.heads, config.d_ctx) for lvl in config.cross_levels})
        nn.init.zeros_(self.conv_out.weight)
        nn.init.zeros_(self.conv_out.bias)

    def _x(self, name, h, ctx):
        return self.cross_attn[name](h, ctx) if name in self.cross_attn else h

    def forward(self, z_t, t, m, masked_latent, c_ctx):
        h_in, w_in = z_t.shape[-2:]
        if h_in % 4 or w_in % 4:
            raise ShapeMismatch(f"latent dims {(h_in, w_in)} must be divisible by 4")
        if z_t.shape[1] != self.config.latent_channels:
            raise ShapeMismatch(f"expected {self.config.latent_channels} latent channels, got {z_t.shape[1]}")
        if c_ctx.shape[-1] != self.config.d_ctx:
            raise ShapeMismatch(f"context width {c_ctx.shape[-1]} != {self.config.d_ctx}")
        if not torch.is_tensor(t):
            t = torch.full((z_t.shape[0],), float(t))
        temb = self.time_mlp(timestep_embedding(t.reshape(-1).expand(z_t.shape[0]), self.config.channels[0],
                                                z_t.dtype))
        m = m.to(z_t.dtype)
        x = self.conv_in(torch.cat([z_t, m, masked_latent], dim=1))
        s0 = self._x("enc0", self.enc0(x, temb), c_ctx)
        s1 = self._x("enc1", self.enc1(self.down0(s0), temb), c_ctx)
        h = self.mid(self.down1(s1), temb)
        h = self._x("mid", self.self_attn(h), c_ctx)
        h = self.up1(F.interpolate(h, scale_factor=2, mode="nearest"))
        h = self._x("dec1", self.dec1(torch.cat([h, s1], dim=1), temb), c_ctx)
        h = self.up0(F.interpolate(h, scale_factor=2, mode="nearest"))
        h = self._x("dec0", self.dec0(torch.cat([h, s0], dim=1), temb), c_ctx)
        return self.conv_out(F.silu(self.norm_out(h))) + self.skip(z_t, m, masked_latent, temb)


def predict_noise(inp: DenoiserInput, model: nn.Module) -> torch.Tensor:
    inp.validate()
    return model(inp.z_t, inp.t, inp.m, inp.masked_latent, inp.c_ctx)
