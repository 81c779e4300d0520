"""Latent codecs: exact, parameter-free stand-ins for a learned autoencoder."""
from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F
from scipy.fft import dct

from ..errors import NotDivisible


class IdentityCodec:
    """Latent = pixels (channels-first)."""

    spatial_factor = 1
    name = "identity"

    def __init__(self, channels: int = 3):
        self.channels = channels

    @property
    def latent_channels(self) -> int:
        return self.channels

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        return x

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        return z

    def clamp(self, z: torch.Tensor) -> torch.Tensor:
        return z.clamp(0.0, 1.0)

    def config(self) -> dict:
        return {"name": self.name}


def orthonormal_patch_basis(p: int, channels: int = 3) -> np.ndarray:
    """Kronecker product of a color rotation and a 2-D orthonormal DCT-II.

    Row 0 is the (scaled) patch luminance mean; rows are orthonormal.
    """
    d1 = dct(np.eye(p), norm="ortho", axis=0)
    d2 = np.kron(d1, d1)  # acts on row-major (dy, dx)
    if channels == 3:
        c = np.array([[1, 1, 1], [1, 0, -1], [1, -2, 1]], dtype=np.float64)
        c /= np.linalg.norm(c, axis=1, keepdims=True)
    else:
        c = np.eye(channels)
    # pixel_unshuffle lays channels out as ch * p*p + dy * p + dx, matching the kron order
    return np.kron(c, d2)


class PatchifyCodec:
    """``p x p`` space-to-depth followed by a fixed orthonormal channel map.

    With ``keep = k < p`` only the ``k x k`` lowest DCT frequencies of each color
    channel are retained, which makes the codec lossy (decode is the projection).
    """

    name = "patchify"

    def __init__(self, patch: int = 4, channels: int = 3, keep: int | None = None):
        keep = patch if keep is None else keep
        if not 1 <= keep <= patch:
            raise ValueError("keep must lie in [1, patch]")
        self.patch = patch
        self.channels = channels
        self.keep = keep
        rows = [c * patch * patch + u * patch + v
                for c in range(channels) for u in range(keep) for v in range(keep)]
        self._basis = torch.from_numpy(orthonormal_patch_basis(patch, channels)[rows])

    @property
    def spatial_factor(self) -> int:
        return self.patch

    @property
    def latent_channels(self) -> int:
        return self.channels * self.keep ** 2

    def _check(self, x):
        h, w = x.shape[-2:]
        if h % self.patch or w % self.patch:
            raise NotDivisible(f"spatial dims {(h, w)} not divisible by {self.patch}")

    def space_to_depth(self, x: torch.Tensor) -> torch.Tensor:
        self._check(x)
        return F.pixel_unshuffle(x, self.patch)

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        s = self.space_to_depth(x)
        B = self._basis.to(x.dtype)
        return torch.einsum("oc,bchw->bohw", B, s)

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        B = self._basis.to(z.dtype)
        s = torch.einsum("oc,bohw->bchw", B, z)
        return F.pixel_shuffle(s, self.patch)

    def clamp(self, z: torch.Tensor) -> torch.Tensor:
        return self.encode(self.decode(z).clamp(0.0, 1.0))

    def config(self) -> dict:
        cfg = {"name": self.name, "patch": self.patch}
        if self.keep != self.patch:
            cfg["keep"] = self.keep
        return cfg


def make_codec(cfg: dict | None):
    cfg = dict(cfg or {"name": "identity"})
    name = cfg.pop("name", "identity")
    if name == "identity":
        return IdentityCodec()
    if name == "patchify":
        return PatchifyCodec(**cfg)
    raise ValueError(f"unknown codec {name!r}")


def downsample_mask(mask: torch.Tensor, factor: int, rule: str = "area") -> torch.Tensor:
    """Pixel mask ``(B, 1, H, W)`` to latent resolution.

    ``area``: block mean thresholded at 0.5, ties count as 1.
    ``any``: a block is set if any of its pixels is set.
    """
    mask = mask.to(torch.float32)
    if factor == 1:
        return (mask >= 0.5).to(mask.dtype)
    h, w = mask.shape[-2:]
    if h % factor or w % factor:
        raise NotDivisible(f"mask dims {(h, w)} not divisible by {factor}")
    if rule == "area":
        return (F.avg_pool2d(mask, factor) >= 0.5).to(mask.dtype)
    if rule == "any":
        return (F.max_pool2d(mask, factor) > 0).to(mask.dtype)
    if rule == "all":
        return (-F.max_pool2d(-mask, factor) > 0).to(mask.dtype)
    raise ValueError(f"unknown rule {rule!r}")
