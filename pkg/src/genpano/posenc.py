"""Global Fourier positional encoding of the panorama plane."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import BadChannelCount, OutOfBounds

DEFAULT_F_MIN = 1.0
DEFAULT_F_MAX = 50.0
DEFAULT_CHANNELS = 12


@dataclass(frozen=True)
class TileBox:
    """Axis-aligned tile on the panorama grid (top-left corner plus size)."""

    x: int
    y: int
    H: int
    W: int

    @property
    def centroid(self) -> tuple[float, float]:
        return (self.x + self.W / 2.0, self.y + self.H / 2.0)

    @property
    def slices(self) -> tuple[slice, slice]:
        return slice(self.y, self.y + self.H), slice(self.x, self.x + self.W)


@dataclass(frozen=True)
class PosEncMap:
    values: np.ndarray  # (H, W, C) float32
    f_min: float
    f_max: float

    @property
    def channels(self) -> int:
        return self.values.shape[2]

    @property
    def n_freqs(self) -> int:
        return self.channels // 4

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape[:2]

    def params(self) -> dict:
        return {"f_min": self.f_min, "f_max": self.f_max, "channels": self.channels,
                "pixel_convention": "center"}


def frequencies(f_min: float, f_max: float, n_freqs: int) -> np.ndarray:
    """Log-spaced frequencies; the first one equals ``f_min`` exactly."""
    i = np.arange(n_freqs, dtype=np.float64)
    return np.exp(np.log(f_min) + i * (np.log(f_max) - np.log(f_min)) / n_freqs)


def normalized_coords(n: int) -> np.ndarray:
    # pixel centers: index k sits at k + 0.5
    return (2.0 * (np.arange(n, dtype=np.float64) + 0.5) - n) / n


def _axis_encoding(p: np.ndarray, freqs: np.ndarray) -> np.ndarray:
    arg = np.pi * p[:, None] * freqs[None, :]
    out = np.empty((p.size, 2 * freqs.size))
    out[:, 0::2] = np.sin(arg)
    out[:, 1::2] = np.cos(arg)
    return out


def build_posenc(H_pano: int, W_pano: int, f_min: float = DEFAULT_F_MIN,
                 f_max: float = DEFAULT_F_MAX, C: int = DEFAULT_CHANNELS) -> PosEncMap:
    """Per-pixel sinusoidal encoding of the normalized panorama coordinates.

    Channels ``[0, 2F)`` hold interleaved sin/cos of the x coordinate at each of the
    ``F = C / 4`` frequencies; channels ``[2F, 4F)`` do the same for y.
    """
    if C <= 0 or C % 4:
        raise BadChannelCount(f"channel count must be a positive multiple of 4, got {C}")
    if not (f_min > 0 and f_max >= f_min):
        raise ValueError(f"need 0 < f_min <= f_max, got {f_min}, {f_max}")
    F = C // 4
    freqs = frequencies(f_min, f_max, F)
    ex = _axis_encoding(normalized_coords(W_pano), freqs)  # (W, 2F)
    ey = _axis_encoding(normalized_coords(H_pano), freqs)  # (H, 2F)
    values = np.empty((H_pano, W_pano, C), dtype=np.float32)
    values[:, :, : 2 * F] = ex[None, :, :]
    values[:, :, 2 * F:] = ey[:, None, :]
    return PosEncMap(values=values, f_min=float(f_min), f_max=float(f_max))


def crop_posenc(pmap: PosEncMap, box: TileBox) -> np.ndarray:
    H, W = pmap.shape
    if box.x < 0 or box.y < 0 or box.x + box.W > W or box.y + box.H > H:
        raise OutOfBounds(f"{box} outside {H}x{W} map")
    return pmap.values[box.slices]
