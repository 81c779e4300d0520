"""Context encoder: positional-encoding crop -> token embeddings for cross-attention."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ShapeMismatch


@dataclass(frozen=True)
class ContextEncoderConfig:
    in_channels: int = 12
    hidden: int = 128
    pool_dims: tuple[int, int] = (7, 11)
    d_ctx: int = 1024

    @property
    def token_count(self) -> int:
        return self.pool_dims[0] * self.pool_dims[1]

    def to_dict(self):
        d = asdict(self)
        d["pool_dims"] = list(self.pool_dims)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["pool_dims"] = tuple(d["pool_dims"])
        return cls(**d)


def token_positional_encoding(token_count: int, d: int) -> np.ndarray:
    """Transformer sinusoidal table: ``PE[p, 2i] = sin(p / 10000^(2i/d))``, cosine at ``2i+1``."""
    if d % 2:
        raise ValueError(f"embedding width must be even, got {d}")
    p = np.arange(token_count, dtype=np.float64)[:, None]
    i = np.arange(d // 2, dtype=np.float64)[None, :]
    arg = p / 10000.0 ** (2 * i / d)
    pe = np.empty((token_count, d))
    pe[:, 0::2] = np.sin(arg)
    pe[:, 1::2] = np.cos(arg)
    return pe


class ContextEncoder(nn.Module):
    """conv(4,2,1)+GELU -> conv(4,2,1)+GELU -> adaptive avg pool -> tokens -> linear -> +PE -> LayerNorm."""

    def __init__(self, config: ContextEncoderConfig = ContextEncoderConfig()):
        super().__init__()
        self.config = config
        h = config.hidden
        self.conv1 = nn.Conv2d(config.in_channels, h, 4, stride=2, padding=1)
        self.conv2 = nn.Conv2d(h, h, 4, stride=2, padding=1)
        self.proj = nn.Linear(h, config.d_ctx)
        pe = torch.from_numpy(token_positional_encoding(config.token_count, config.d_ctx)).float()
        self.register_buffer("token_pe", pe, persistent=False)

    def features(self, crop: torch.Tensor) -> torch.Tensor:
        """Pre-normalization tokens ``(B, tokens, d_ctx)`` for a ``(B, C, H, W)`` crop."""
        if crop.ndim != 4 or crop.shape[1] != self.config.in_channels:
            raise ShapeMismatch(f"expected (B, {self.config.in_channels}, H, W), got {tuple(crop.shape)}")
        if crop.shape[2] < 4 or crop.shape[3] < 4:
            raise ShapeMismatch(f"crop must be at least 4x4, got {tuple(crop.shape[2:])}")
        x = F.gelu(self.conv1(crop))
        x = F.gelu(self.conv2(x))
        x = F.adaptive_avg_pool2d(x, self.config.pool_dims)
        x = x.flatten(2).transpose(1, 2)  # row-major over the pooled grid
        return self.proj(x) + self.token_pe.to(x.dtype)

    def forward(self, crop: torch.Tensor) -> torch.Tensor:
        return F.layer_norm(self.features(crop), (self.config.d_ctx,))


def encode_context(crop, encoder: ContextEncoder) -> torch.Tensor:
    """Accepts an ``(H, W, C)`` numpy crop (inference, no gradients) or a batched
    channels-first tensor."""
    if isinstance(crop, np.ndarray):
        t = torch.from_numpy(np.ascontiguousarray(crop.transpose(2, 0, 1)))[None]
        with torch.no_grad():
            return encoder(t.to(next(encoder.parameters()).dtype))[0]
    return encoder(crop)


def null_context(config: ContextEncoderConfig, batch: int | None = None, dtype=torch.float32) -> torch.Tensor:
    shape = (config.token_count, config.d_ctx) if batch is None else (batch, config.token_count, config.d_ctx)
    return torch.zeros(shape, dtype=dtype)
