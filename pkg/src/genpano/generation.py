"""Tiled panorama generation: grid, ordering, guided masked denoising and
feathered compositing."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import cv2
import numpy as np
import torch

from .backbone.codec import downsample_mask
from .backbone.model import load_checkpoint
from .backbone.schedule import NoiseSchedule, add_noise, ddpm_step
from .backbone.unet import DenoiserInput
from .errors import ManifestMismatch, NoModel, ShapeMismatch, TileLargerThanCanvas
from .layout import SparsePanorama, load_layout, valid_centroid
from .posenc import PosEncMap, TileBox, build_posenc, crop_posenc
from .scene_io import save_panorama

log = logging.getLogger(__name__)

MAX_FEATHER = 64


@dataclass(frozen=True)
class GenerationConfig:
    guidance: float = 1.5
    overlap: float = 0.2
    tile: int = 128
    steps: int = 50
    order: str = "distance"      # or "rows"
    init_noise_level: float = 1.0

    def __post_init__(self):
        if self.guidance < 0:
            raise ValueError("guidance must be >= 0")
        if not 0 <= self.overlap <= 0.95:
            raise ValueError("overlap must lie in [0, 0.95]")
        if self.order not in ("distance", "rows"):
            raise ValueError(f"unknown tile order {self.order!r}")
        if not 0 < self.init_noise_level <= 1:
            raise ValueError("init_noise_level must lie in (0, 1]")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")

    def to_dict(self):
        return asdict(self)


@dataclass
class CanvasState:
    pixels: np.ndarray      # (H, W, 3) float
    generated: np.ndarray   # (H, W) bool

    @classmethod
    def from_sparse(cls, sp: SparsePanorama) -> "CanvasState":
        return cls(np.where(sp.valid[..., None], sp.canvas, 0).astype(np.float32), sp.valid.copy())


# -- grid ----------------------------------------------------------------

def axis_positions(L: int, tile: int, overlap: float) -> list[int]:
    n = max(1, math.ceil((L - tile) / (tile * (1 - overlap))) + 1)
    if n == 1:
        return [0]
    return [int(math.floor(k * (L - tile) / (n - 1) + 0.5)) for k in range(n)]


def build_tile_grid(pano_dims, tile: int, overlap: float) -> list[TileBox]:
    """Evenly spaced, in-bounds tiles covering the canvas, listed row-major."""
    H, W = pano_dims
    if tile > min(H, W):
        raise TileLargerThanCanvas(f"tile {tile} larger than canvas {H}x{W}")
    if not 0 <= overlap <= 0.95:
        raise ValueError("overlap must lie in [0, 0.95]")
    return [TileBox(x, y, tile, tile) for y in axis_positions(H, tile, overlap)
            for x in axis_positions(W, tile, overlap)]


def order_tiles(tiles: list[TileBox], start_centroid, strategy: str = "distance") -> list[TileBox]:
    """Increasing centroid distance to ``start_centroid`` (ties: lower y, then x),
    or plain row-major order for ``strategy="rows"``."""
    if not tiles:
        raise ValueError("no tiles to order")
    if strategy == "rows":
        return sorted(tiles, key=lambda b: (b.y, b.x))
    sx, sy = start_centroid

    def key(b):
        cx, cy = b.centroid
        return ((cx - sx) ** 2 + (cy - sy) ** 2, b.y, b.x)
    return sorted(tiles, key=key)


# -- guidance and denoising ----------------------------------------------

def cfg_predict(inp: DenoiserInput, guidance: float, model) -> torch.Tensor:
    """``eps_null + g (eps_cond - eps_null)``; the null branch zeroes only the context."""
    if guidance < 0:
        raise ValueError("guidance must be >= 0")
    inp.validate()
    with torch.no_grad():
        if guidance != 0:
            cond = model(inp.z_t, inp.t, inp.m, inp.masked_latent, inp.c_ctx)
            if guidance == 1:
                return cond
        null = model(inp.z_t, inp.t, inp.m, inp.masked_latent, torch.zeros_like(inp.c_ctx))
        if guidance == 0:
            return null
        # combine in double precision so the result is the correctly rounded mix
        out = (1.0 - guidance) * null.double() + guidance * cond.double()
        return out.to(cond.dtype)


def tile_generator(seed: int, index: int) -> torch.Generator:
    state = np.random.SeedSequence([int(seed), int(index)]).generate_state(2, np.uint32)
    return torch.Generator().manual_seed(int(state[0]) << 32 | int(state[1]))


def _chw(img: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(img.transpose(2, 0, 1), dtype=np.float32))[None]


def denoise_tile(canvas: CanvasState, box: TileBox, model, posenc: PosEncMap, schedule: NoiseSchedule,
                 generator: torch.Generator, guidance: float = 1.5, init_noise_level: float = 1.0,
                 predictor=None) -> np.ndarray:
    """Synthesize the ungenerated part of ``box``; returns an ``(H, W, 3)`` tile.

    ``schedule`` is the inference schedule (e.g. ``model.schedule.strided(50)``).
    ``predictor`` overrides the guided model call, mainly for oracle tests.
    """
    if model is None:
        raise NoModel("no denoiser loaded")
    sl = box.slices
    crop = canvas.pixels[sl]
    known = canvas.generated[sl]
    if known.all():
        return crop.copy()
    codec = model.codec
    f = codec.spatial_factor
    x = _chw(np.where(known[..., None], crop, 0))
    hole = torch.from_numpy((~known)[None, None].astype(np.float32))
    with torch.no_grad():
        z_ref = codec.encode(x)
        m = downsample_mask(hole, f, "any")
        masked = (1 - m) * z_ref
        c_ctx = model.context(_chw(crop_posenc(posenc, box)))
    t_start = max(1, int(round(init_noise_level * schedule.T)))
    eps = torch.randn(z_ref.shape, generator=generator, dtype=z_ref.dtype)
    z = add_noise(z_ref, t_start, eps, schedule)
    predictor = predictor or (lambda inp: cfg_predict(inp, guidance, model))
    for t in range(t_start, 0, -1):
        tt = torch.full((1,), float(schedule.timesteps[t - 1]))
        eps_hat = predictor(DenoiserInput(z, tt, m, masked, c_ctx))
        z = ddpm_step(z, t, eps_hat, schedule, generator, clamp=codec.clamp)
    with torch.no_grad():
        out = codec.decode(z)[0].permute(1, 2, 0).numpy()
    return np.clip(out, 0.0, 1.0).astype(np.float32)


# -- compositing ---------------------------------------------------------

def raised_cosine(s):
    s = np.clip(s, 0.0, 1.0)
    return 0.5 - 0.5 * np.cos(np.pi * s)


def blend_weights(known: np.ndarray, box: TileBox, canvas_dims, feather: float) -> np.ndarray:
    """Tile weight per pixel: 1 on new pixels; on known pixels the smaller of a ramp
    rising from the tile's interior edges and a ramp falling away from new pixels."""
    h, w = known.shape
    wt = np.ones((h, w), np.float64)
    if not known.any():
        return wt
    if known.all() or feather <= 0:
        wt[known] = 0.0
        return wt
    H, W = canvas_dims
    # distance of each known pixel to the nearest new pixel
    d_new = cv2.distanceTransform(known.astype(np.uint8), cv2.DIST_L2, cv2.DIST_MASK_PRECISE)
    prox = raised_cosine(1.0 - (d_new - 1.0) / feather)
    yy, xx = np.mgrid[0:h, 0:w]
    d_edge = np.full((h, w), np.inf)
    if box.x > 0:
        d_edge = np.minimum(d_edge, xx + 0.5)
    if box.x + w < W:
        d_edge = np.minimum(d_edge, w - xx - 0.5)
    if box.y > 0:
        d_edge = np.minimum(d_edge, yy + 0.5)
    if box.y + h < H:
        d_edge = np.minimum(d_edge, h - yy - 0.5)
    edge = raised_cosine(d_edge / feather)
    wt[known] = np.minimum(prox, edge)[known]
    return wt


def feather_width(tile: int, overlap: float) -> float:
    return min(tile * overlap, MAX_FEATHER)


def composite(canvas: CanvasState, box: TileBox, tile_img: np.ndarray, feather: float = MAX_FEATHER) -> CanvasState:
    """Blend ``tile_img`` into ``canvas`` inside ``box`` (in place) and mark it generated."""
    if tile_img.shape[:2] != (box.H, box.W):
        raise ShapeMismatch(f"tile {tile_img.shape[:2]} does not match box {(box.H, box.W)}")
    sl = box.slices
    known = canvas.generated[sl]
    wt = blend_weights(known, box, canvas.generated.shape, feather)[..., None]
    cur = canvas.pixels[sl].astype(np.float64)
    canvas.pixels[sl] = (cur + wt * (tile_img.astype(np.float64) - cur)).astype(canvas.pixels.dtype)
    canvas.generated[sl] = True
    return canvas


# -- full panorama -------------------------------------------------------

def generate(start: SparsePanorama, model, posenc: PosEncMap, config: GenerationConfig = GenerationConfig(),
             seed: int = 0, debug_dir=None, on_tile=None) -> CanvasState:
    """Outpaint the whole canvas starting from one sparse panorama."""
    if model is None:
        raise NoModel("no denoiser loaded")
    if posenc.shape != start.dims:
        raise ShapeMismatch(f"posenc {posenc.shape} vs canvas {start.dims}")
    canvas = CanvasState.from_sparse(start)
    grid = build_tile_grid(start.dims, config.tile, config.overlap)
    index = {b: k for k, b in enumerate(grid)}
    ordered = order_tiles(grid, valid_centroid(start.valid), config.order)
    schedule = model.schedule.strided(config.steps)
    feather = feather_width(config.tile, config.overlap)
    for n, box in enumerate(ordered):
        k = index[box]
        log.info("tile %d/%d: grid index %d at (x=%d, y=%d)", n + 1, len(ordered), k, box.x, box.y)
        tile = denoise_tile(canvas, box, model, posenc, schedule, tile_generator(seed, k), config.guidance,
                            config.init_noise_level)
        composite(canvas, box, tile, feather)
        if on_tile is not None:
            on_tile(n, k, box)
        if debug_dir is not None:
            save_panorama(Path(debug_dir) / f"tile_{n:03d}_grid{k:03d}.png", tile)
    return canvas


def check_manifest(manifest: dict, extra: dict) -> None:
    """The checkpoint must have been trained on this workspace's canvas and encoding."""
    want = {"pano_dims": list(manifest.get("pano_dims", [])), "posenc": manifest.get("posenc")}
    have = {"pano_dims": list(extra.get("pano_dims", [])), "posenc": extra.get("posenc")}
    if want != have:
        raise ManifestMismatch(f"checkpoint was trained with {have}, workspace has {want}")


def generate_panorama(workspace, checkpoint, start_id: str | None = None, seed: int = 0,
                      config: GenerationConfig = GenerationConfig(), model=None) -> CanvasState:
    """Algorithm entry point over a workspace: load layout and checkpoint, then outpaint."""
    if checkpoint is None or not Path(checkpoint).exists():
        raise NoModel(f"checkpoint not found: {checkpoint}")
    sps = load_layout(workspace)
    if model is None:
        model, extra = load_checkpoint(checkpoint)
    else:
        from .backbone.model import read_checkpoint_meta
        extra = read_checkpoint_meta(checkpoint)[1]
    check_manifest(workspace.manifest, extra)
    start_id = start_id or workspace.manifest["center_id"]
    by_id = {sp.source_id: sp for sp in sps}
    if start_id not in by_id:
        raise ValueError(f"unknown start id {start_id!r}")
    pe = workspace.manifest["posenc"]
    posenc = build_posenc(*by_id[start_id].dims, pe["f_min"], pe["f_max"], pe["channels"])
    return generate(by_id[start_id], model, posenc, config, seed)
