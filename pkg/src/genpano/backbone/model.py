"""The inpainting model bundle and its checkpoint container."""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import torch
from safetensors.torch import load_file, save_file
from torch import nn

from ..conditioning import ContextEncoder, ContextEncoderConfig, null_context
from ..errors import ArtifactIOError, ShapeMismatch
from .codec import make_codec
from .lora import SELF_ATTN_PATTERN, apply_lora, lora_modules
from .schedule import NoiseSchedule
from .unet import ToyUNet, UNetConfig

CHECKPOINT_SCHEMA_VERSION = 1
BACKBONE_ID = "toy-unet"


@dataclass(frozen=True)
class LoraConfig:
    rank: int = 8
    alpha: float = 8.0
    pattern: str = SELF_ATTN_PATTERN


class InpaintModel(nn.Module):
    """Denoiser, context encoder, codec and training schedule travelling together."""

    def __init__(self, unet_config: UNetConfig, ctx_config: ContextEncoderConfig,
                 codec_config: dict | None = None, schedule_T: int = 1000):
        super().__init__()
        if unet_config.d_ctx != ctx_config.d_ctx:
            raise ShapeMismatch(f"denoiser d_ctx {unet_config.d_ctx} != encoder d_ctx {ctx_config.d_ctx}")
        self.codec = make_codec(codec_config)
        if self.codec.latent_channels != unet_config.latent_channels:
            raise ShapeMismatch(f"codec gives {self.codec.latent_channels} channels, "
                                f"denoiser expects {unet_config.latent_channels}")
        self.unet = ToyUNet(unet_config)
        self.ctx_encoder = ContextEncoder(ctx_config)
        self.schedule = NoiseSchedule.linear(schedule_T)
        self.codec_config = self.codec.config()
        self.lora_config: LoraConfig | None = None

    @classmethod
    def toy(cls, channels=(32, 64), d_ctx=64, heads=4, ctx_hidden=32, codec=None, posenc_channels=12):
        codec = codec or {"name": "identity"}
        lat = make_codec(codec).latent_channels
        return cls(UNetConfig(lat, tuple(channels), d_ctx, heads),
                   ContextEncoderConfig(posenc_channels, ctx_hidden, (7, 11), d_ctx), codec)

    def add_lora(self, config: LoraConfig = LoraConfig(), generator: torch.Generator | None = None):
        apply_lora(self.unet, config.rank, config.alpha, config.pattern, generator)
        self.lora_config = config
        return self

    def context(self, posenc_crop: torch.Tensor) -> torch.Tensor:
        return self.ctx_encoder(posenc_crop)

    def null_context(self, batch: int) -> torch.Tensor:
        return null_context(self.ctx_encoder.config, batch)

    def forward(self, z_t, t, m, masked_latent, c_ctx):
        return self.unet(z_t, t, m, masked_latent, c_ctx)

    def config(self) -> dict:
        lc = self.lora_config
        return {
            "backbone": BACKBONE_ID,
            "unet": self.unet.config.to_dict(),
            "context_encoder": self.ctx_encoder.config.to_dict(),
            "codec": self.codec_config,
            "schedule": {"kind": "linear", "T": self.schedule.T, "beta_start": 1e-4, "beta_end": 0.02},
            "lora": None if lc is None else {"rank": lc.rank, "alpha": lc.alpha, "pattern": lc.pattern},
        }

    @classmethod
    def from_config(cls, cfg: dict) -> "InpaintModel":
        if cfg.get("backbone") != BACKBONE_ID:
            raise ArtifactIOError(f"unknown backbone {cfg.get('backbone')!r}")
        model = cls(UNetConfig.from_dict(cfg["unet"]), ContextEncoderConfig.from_dict(cfg["context_encoder"]),
                    cfg["codec"], cfg["schedule"]["T"])
        if cfg.get("lora"):
            model.add_lora(LoraConfig(**cfg["lora"]))
        return model


def parameter_groups(model: InpaintModel) -> dict[str, list[tuple[str, nn.Parameter]]]:
    """Split parameters into ``lora``, ``cross``, ``ctx`` and ``frozen``."""
    groups = {"lora": [], "cross": [], "ctx": [], "frozen": []}
    for name, p in model.named_parameters():
        if ".lora_A" in name or ".lora_B" in name:
            groups["lora"].append((name, p))
        elif name.startswith("ctx_encoder."):
            groups["ctx"].append((name, p))
        elif ".cross_attn." in name:
            groups["cross"].append((name, p))
        else:
            groups["frozen"].append((name, p))
    return groups


def digest(named_params) -> str:
    h = hashlib.sha256()
    for name, p in named_params:
        h.update(name.encode())
        h.update(p.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def save_checkpoint(path, model: InpaintModel, extra: dict | None = None) -> Path:
    """Write all tensors plus a JSON header (schema, backbone config, ``extra``)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tensors = {k: v.detach().contiguous().clone() for k, v in model.state_dict().items()}
    meta = {"schema_version": str(CHECKPOINT_SCHEMA_VERSION),
            "model": json.dumps(model.config(), sort_keys=True),
            "extra": json.dumps(extra or {}, sort_keys=True)}
    tmp = path.with_suffix(path.suffix + ".tmp")
    save_file(tensors, str(tmp), metadata=meta)
    tmp.replace(path)
    return path


def read_checkpoint_meta(path) -> tuple[dict, dict]:
    from safetensors import safe_open
    try:
        with safe_open(str(path), framework="pt") as f:
            meta = f.metadata() or {}
    except Exception as exc:
        raise ArtifactIOError(f"cannot read checkpoint {path}: {exc}") from exc
    if meta.get("schema_version") != str(CHECKPOINT_SCHEMA_VERSION):
        raise ArtifactIOError(f"{path}: unsupported checkpoint schema {meta.get('schema_version')!r}")
    return json.loads(meta["model"]), json.loads(meta.get("extra", "{}"))


def load_checkpoint(path) -> tuple[InpaintModel, dict]:
    cfg, extra = read_checkpoint_meta(path)
    model = InpaintModel.from_config(cfg)
    state = load_file(str(path))
    missing, unexpected = model.load_state_dict(state, strict=False)
    if missing or unexpected:
        raise ArtifactIOError(f"{path}: checkpoint tensors do not match the model "
                              f"(missing {missing[:3]}, unexpected {unexpected[:3]})")
    model.eval()
    return model, extra


__all__ = ["InpaintModel", "LoraConfig", "parameter_groups", "digest", "save_checkpoint", "load_checkpoint",
           "read_checkpoint_meta", "lora_modules", "CHECKPOINT_SCHEMA_VERSION", "BACKBONE_ID"]
