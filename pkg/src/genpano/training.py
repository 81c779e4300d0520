"""Fine-tuning for position-aware inpainting: crops, synthetic masks, the
valid-masked diffusion loss and the optimizer loop."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import cv2
import numpy as np
import torch

from .backbone.codec import downsample_mask
from .backbone.model import InpaintModel, LoraConfig, digest, parameter_groups, save_checkpoint
from .backbone.schedule import add_noise
from .errors import NonFiniteLoss, ShapeMismatch
from .layout import PerturbationBounds, SparsePanorama, apply_perturbation
from .posenc import PosEncMap, TileBox, crop_posenc
from .scene_io import make_texture

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class MaskParams:
    max_shapes: int = 5
    boundary_prob: float = 0.5
    min_fraction: float = 0.1
    max_fraction: float = 0.9
    max_tries: int = 50


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 4000
    batch_size: int = 32
    lr_lora: float = 1e-4
    lr_cross: float = 3e-4
    lr_ctx: float = 8e-4
    lora_rank: int = 8
    lora_alpha: float = 8.0
    weight_decay: float = 1e-2
    betas: tuple[float, float] = (0.9, 0.999)
    perturbation: PerturbationBounds = field(default_factory=PerturbationBounds)
    masks: MaskParams = field(default_factory=MaskParams)
    crop_size: int = 128
    seed: int = 0
    checkpoint_every: int = 500

    def __post_init__(self):
        if min(self.lr_lora, self.lr_cross, self.lr_ctx) <= 0:
            raise ValueError("learning rates must be positive")
        if self.iterations < 0:
            raise ValueError("iterations must be non-negative")
        if self.batch_size < 1 or self.crop_size < 4:
            raise ValueError("batch_size >= 1 and crop_size >= 4 required")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        d["perturbation"]["scale_range"] = list(self.perturbation.scale_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "perturbation" in d and isinstance(d["perturbation"], dict):
            p = dict(d["perturbation"])
            if "scale_range" in p:
                p["scale_range"] = tuple(p["scale_range"])
            d["perturbation"] = PerturbationBounds(**p)
        if "masks" in d and isinstance(d["masks"], dict):
            d["masks"] = MaskParams(**d["masks"])
        if "betas" in d:
            d["betas"] = tuple(d["betas"])
        return cls(**d)


@dataclass
class TrainBatch:
    z_crop: torch.Tensor   # (B, c, h, w)
    m: torch.Tensor        # (B, 1, h, w) hole mask
    m_valid: torch.Tensor  # (B, 1, h, w)
    c_ctx: torch.Tensor    # (B, tokens, d)
    t: torch.Tensor        # (B,) in [1, T]
    eps: torch.Tensor      # like z_crop

    def validate(self):
        B, _, h, w = self.z_crop.shape
        if self.eps.shape != self.z_crop.shape:
            raise ShapeMismatch("eps and z_crop differ in shape")
        for name in ("m", "m_valid"):
            if getattr(self, name).shape != (B, 1, h, w):
                raise ShapeMismatch(f"{name} shape {tuple(getattr(self, name).shape)} != {(B, 1, h, w)}")
        if self.c_ctx.shape[0] != B or self.t.shape != (B,):
            raise ShapeMismatch("context or timesteps not batch-aligned")


# -- crops ---------------------------------------------------------------

def sample_crop(sps: list[SparsePanorama], posenc: PosEncMap, rng: np.random.Generator,
                crop_size: int = 128, bounds: PerturbationBounds | None = PerturbationBounds(),
                min_valid: float = 0.05, max_tries: int = 50):
    """Random crop of a freshly perturbed sparse panorama.

    Returns ``(crop, posenc_crop, valid_crop, source_index)``; image and encoding
    share the same box. Boxes are redrawn until at least ``min_valid`` of the crop is
    valid, giving up after ``max_tries`` draws.
    """
    H, W = posenc.shape
    if crop_size > min(H, W):
        raise ShapeMismatch(f"crop {crop_size} larger than panorama {H}x{W}")
    idx = int(rng.integers(len(sps)))
    sp = sps[idx]
    if bounds is not None:
        sp = apply_perturbation(sp, bounds.sample(rng, sp.dims))
    for _ in range(max_tries):
        box = TileBox(int(rng.integers(0, W - crop_size + 1)), int(rng.integers(0, H - crop_size + 1)),
                      crop_size, crop_size)
        valid = sp.valid[box.slices]
        if valid.mean() >= min_valid:
            break
    return sp.canvas[box.slices], crop_posenc(posenc, box), valid, idx


# -- masks ---------------------------------------------------------------

def _warped_half_plane(h, w, rng):
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    ang = rng.uniform(0, 2 * np.pi)
    n = np.array([np.cos(ang), np.sin(ang)])
    # signed distance along n from a random line through the crop, warped along the tangent
    c = np.array([rng.uniform(0.2, 0.8) * w, rng.uniform(0.2, 0.8) * h])
    d = (xx - c[0]) * n[0] + (yy - c[1]) * n[1]
    s = -(xx - c[0]) * n[1] + (yy - c[1]) * n[0]
    amp = rng.uniform(0.02, 0.12) * max(h, w)
    warp = sum(amp / (k + 1) * np.sin(2 * np.pi * (k + 1) * s / max(h, w) * rng.uniform(0.5, 1.5)
                                      + rng.uniform(0, 2 * np.pi)) for k in range(3))
    return d + warp > 0


def _draw_shapes(mask, rng, k):
    h, w = mask.shape
    for _ in range(k):
        kind = rng.integers(3)
        cx, cy = int(rng.integers(0, w)), int(rng.integers(0, h))
        sx, sy = int(rng.integers(w // 10, w // 2 + 1)), int(rng.integers(h // 10, h // 2 + 1))
        if kind == 0:
            cv2.rectangle(mask, (cx - sx // 2, cy - sy // 2), (cx + sx // 2, cy + sy // 2), 1, -1)
        elif kind == 1:
            cv2.ellipse(mask, (cx, cy), (max(1, sx // 2), max(1, sy // 2)), float(rng.uniform(0, 180)),
                        0, 360, 1, -1)
        else:
            pts = [(cx, cy)]
            for _ in range(int(rng.integers(2, 5))):
                a = rng.uniform(0, 2 * np.pi)
                step = rng.uniform(0.1, 0.3) * max(h, w)
                pts.append((int(pts[-1][0] + step * np.cos(a)), int(pts[-1][1] + step * np.sin(a))))
            thick = int(rng.integers(max(2, w // 32), max(3, w // 8)))
            cv2.polylines(mask, [np.array(pts, np.int32)], False, 1, thick)


def synthesize_mask(dims, rng: np.random.Generator, params: MaskParams = MaskParams()) -> np.ndarray:
    """Binary hole mask (1 = synthesize): random rectangles, ellipses and strokes,
    plus with ``boundary_prob`` a smoothly warped half-plane reaching the border.

    Draws are repeated until the hole fraction lies in the configured range; if
    that never happens the mask is patched with one rectangle to force it in.
    """
    h, w = dims
    if h <= 0 or w <= 0:
        raise ValueError(f"mask dims must be positive, got {dims}")
    lo, hi = params.min_fraction, params.max_fraction
    for _ in range(max(1, params.max_tries)):
        mask = np.zeros((h, w), np.uint8)
        if params.max_shapes > 0:
            _draw_shapes(mask, rng, int(rng.integers(1, params.max_shapes + 1)))
        if rng.random() < params.boundary_prob:
            mask |= _warped_half_plane(h, w, rng).astype(np.uint8)
        frac = mask.mean()
        if lo <= frac <= hi:
            return mask.astype(bool)
    return _force_fraction(mask.astype(bool), rng, lo, hi)


def _force_fraction(mask, rng, lo, hi):
    h, w = mask.shape
    frac = mask.mean()
    target = lo if frac < lo else 1.0 - hi
    # a rectangle covering at least `target` of the crop, fully inside it
    rh = int(rng.integers(math.ceil(target * h), h + 1))
    rw = min(w, math.ceil(target * h * w / rh))
    y, x = int(rng.integers(0, h - rh + 1)), int(rng.integers(0, w - rw + 1))
    mask = mask.copy()
    mask[y:y + rh, x:x + rw] = frac < lo
    return mask


def touches_border(mask: np.ndarray) -> bool:
    return bool(mask[0].any() or mask[-1].any() or mask[:, 0].any() or mask[:, -1].any())


# -- loss ----------------------------------------------------------------

class LossStats:
    """Counts batches whose validity mask is empty."""

    def __init__(self):
        self.empty_batches = 0


def masked_loss_from_prediction(eps_hat: torch.Tensor, eps: torch.Tensor, m_valid: torch.Tensor,
                                stats: LossStats | None = None) -> torch.Tensor:
    """Mean of ``(eps_hat - eps)^2`` over entries where ``m_valid = 1``."""
    if eps_hat.shape != eps.shape:
        raise ShapeMismatch(f"prediction {tuple(eps_hat.shape)} vs noise {tuple(eps.shape)}")
    mv = m_valid.to(eps.dtype).expand_as(eps)
    count = mv.sum()
    if count == 0:
        if stats is not None:
            stats.empty_batches += 1
        log.warning("batch without valid latent entries contributes zero loss")
        return (eps_hat * 0).sum()
    return (mv * (eps_hat - eps).square()).sum() / count


def conditioning(z_crop, m, m_valid):
    """Conditioning mask and masked latent; invalid entries count as holes."""
    m_cond = torch.maximum(m, 1 - m_valid)
    return m_cond, (1 - m_cond) * z_crop


def masked_loss(batch: TrainBatch, model, stats: LossStats | None = None) -> torch.Tensor:
    """Valid-masked denoising loss. Latent entries outside ``m_valid`` are zeroed
    before noising, so the loss never depends on their values."""
    batch.validate()
    z0 = batch.m_valid * batch.z_crop
    z_t = add_noise(z0, batch.t, batch.eps, model.schedule)
    m_cond, masked = conditioning(z0, batch.m, batch.m_valid)
    eps_hat = model(z_t, batch.t.to(z_t.dtype), m_cond, masked, batch.c_ctx)
    return masked_loss_from_prediction(eps_hat, batch.eps, batch.m_valid, stats)


# -- batches -------------------------------------------------------------

def _to_tensor(img: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(img.transpose(2, 0, 1), dtype=np.float32))


def make_batch(model: InpaintModel, images, valids, posencs, masks, rng: np.random.Generator,
               generator: torch.Generator, with_context: bool = True) -> TrainBatch:
    f = model.codec.spatial_factor
    x = torch.stack([_to_tensor(i) for i in images])
    valid = torch.from_numpy(np.stack(valids)[:, None].astype(np.float32))
    hole = torch.from_numpy(np.stack(masks)[:, None].astype(np.float32))
    with torch.no_grad():
        z = model.codec.encode(x * valid)
    m_valid = downsample_mask(valid, f, "all")
    m = downsample_mask(hole, f, "area")
    B = len(images)
    if with_context:
        c_ctx = model.context(torch.stack([_to_tensor(p) for p in posencs]))
    else:
        c_ctx = model.null_context(B)
    t = torch.from_numpy(rng.integers(1, model.schedule.T + 1, size=B)).long()
    eps = torch.randn(z.shape, generator=generator)
    return TrainBatch(z, m, m_valid, c_ctx, t, eps)


# -- base pretraining ----------------------------------------------------

@dataclass(frozen=True)
class PretrainConfig:
    """Generic inpainting pretraining of the toy base on unrelated procedural
    textures, with null context. Stands in for a pretrained backbone."""

    steps: int = 1500
    batch_size: int = 8
    lr: float = 1e-3
    crop_size: int = 128
    n_textures: int = 12
    texture_dims: tuple[int, int] = (256, 512)
    seed: int = 1_000_003
    masks: MaskParams = field(default_factory=MaskParams)

    def to_dict(self):
        d = asdict(self)
        d["texture_dims"] = list(self.texture_dims)
        return d


def pretrain_base(model: InpaintModel, config: PretrainConfig = PretrainConfig(), log_every: int = 100):
    """Full-parameter training of the denoiser on random texture crops. Returns the losses."""
    rng = np.random.default_rng(config.seed)
    gen = torch.Generator().manual_seed(config.seed)
    textures = [make_texture(rng, *config.texture_dims) for _ in range(config.n_textures)]
    params = [p for p in model.unet.parameters()]
    opt = torch.optim.AdamW(params, lr=config.lr, weight_decay=0.0)
    sched = torch.optim.lr_scheduler.LambdaLR(
        opt, lambda s: min(1.0, (s + 1) / 100) * 0.5 * (1 + math.cos(math.pi * min(s, config.steps) / config.steps)))
    model.train()
    losses = []
    c = config.crop_size
    Ht, Wt = config.texture_dims
    for step in range(config.steps):
        imgs, valids, masks = [], [], []
        for _ in range(config.batch_size):
            tex = textures[int(rng.integers(len(textures)))]
            y, x = int(rng.integers(0, Ht - c + 1)), int(rng.integers(0, Wt - c + 1))
            crop = tex[y:y + c, x:x + c]
            if rng.random() < 0.5:
                crop = crop[:, ::-1]
            imgs.append(crop)
            valids.append(np.ones((c, c), bool))
            masks.append(synthesize_mask((c, c), rng, config.masks))
        batch = make_batch(model, imgs, valids, None, masks, rng, gen, with_context=False)
        loss = masked_loss(batch, model)
        if not torch.isfinite(loss):
            raise NonFiniteLoss(step)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        sched.step()
        losses.append(float(loss.detach()))
        if log_every and (step + 1) % log_every == 0:
            log.info("pretrain step %d loss %.4f", step + 1, np.mean(losses[-log_every:]))
    model.eval()
    return losses


# -- fine-tuning ---------------------------------------------------------

@dataclass
class TrainResult:
    model: InpaintModel
    losses: list[float]
    checkpoints: list[Path]
    frozen_digest_before: str
    frozen_digest_after: str
    empty_batches: int


def build_optimizer(model: InpaintModel, config: TrainConfig) -> torch.optim.AdamW:
    groups = parameter_groups(model)
    for _, p in groups["frozen"]:
        p.requires_grad_(False)
    rates = [("lora", config.lr_lora, 0.0), ("cross", config.lr_cross, config.weight_decay),
             ("ctx", config.lr_ctx, config.weight_decay)]
    param_groups = []
    for name, lr, wd in rates:
        ps = [p for _, p in groups[name]]
        for p in ps:
            p.requires_grad_(True)
        if ps:
            param_groups.append({"params": ps, "lr": lr, "weight_decay": wd, "name": name})
    return torch.optim.AdamW(param_groups, betas=config.betas)


def train(sps: list[SparsePanorama], posenc: PosEncMap, config: TrainConfig, model: InpaintModel,
          out_dir=None, extra_meta: dict | None = None, log_every: int = 100) -> TrainResult:
    """Fine-tune LoRA, cross-attention and context-encoder parameters.

    Every other parameter is frozen. Writes ``loss.csv`` and checkpoints every
    ``checkpoint_every`` steps plus ``final.safetensors`` when ``out_dir`` is given.
    """
    if not sps:
        raise ValueError("need at least one sparse panorama")
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    gen = torch.Generator().manual_seed(config.seed)
    if model.lora_config is None:
        model.add_lora(LoraConfig(config.lora_rank, config.lora_alpha),
                       generator=torch.Generator().manual_seed(config.seed + 1))
    opt = build_optimizer(model, config)
    frozen = parameter_groups(model)["frozen"]
    before = digest(frozen)
    stats = LossStats()
    out_dir = Path(out_dir) if out_dir is not None else None
    ckpts: list[Path] = []
    losses: list[float] = []
    meta = dict(extra_meta or {})
    meta["train_config"] = config.to_dict()
    rows = []

    def checkpoint(name, step):
        if out_dir is None:
            return
        ckpts.append(save_checkpoint(out_dir / name, model, {**meta, "step": step}))

    model.train()
    for step in range(1, config.iterations + 1):
        imgs, valids, pes, masks = [], [], [], []
        for _ in range(config.batch_size):
            crop, pe, valid, _ = sample_crop(sps, posenc, rng, config.crop_size, config.perturbation)
            imgs.append(crop)
            valids.append(valid)
            pes.append(pe)
            masks.append(synthesize_mask(valid.shape, rng, config.masks))
        batch = make_batch(model, imgs, valids, pes, masks, rng, gen)
        loss = masked_loss(batch, model, stats)
        if not torch.isfinite(loss):
            raise NonFiniteLoss(step)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        losses.append(float(loss.detach()))
        rows.append([step, f"{losses[-1]:.8g}"] + [f"{g['lr']:.8g}" for g in opt.param_groups])
        if log_every and step % log_every == 0:
            log.info("train step %d loss %.4f", step, np.mean(losses[-log_every:]))
        if config.checkpoint_every and step % config.checkpoint_every == 0 and step != config.iterations:
            checkpoint(f"step_{step:06d}.safetensors", step)
    model.eval()
    after = digest(frozen)
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / "loss.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "loss"] + [f"lr_{g['name']}" for g in opt.param_groups])
            w.writerows(rows)
    checkpoint("final.safetensors", config.iterations)
    return TrainResult(model, losses, ckpts, before, after, stats.empty_batches)


def smoothed(losses, window: int = 50) -> np.ndarray:
    x = np.asarray(losses, float)
    if len(x) < window:
        return x.copy()
    return np.convolve(x, np.ones(window) / window, mode="valid")
