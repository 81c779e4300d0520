"""Diffusion machinery: schedule, codecs, toy denoiser, LoRA and the model bundle."""
from .codec import IdentityCodec, PatchifyCodec, downsample_mask, make_codec
from .lora import LoRALinear, apply_lora, merge_lora
from .model import InpaintModel, LoraConfig, load_checkpoint, parameter_groups, save_checkpoint
from .schedule import NoiseSchedule, add_noise, ddpm_step, predict_x0
from .unet import DenoiserInput, ToyUNet, UNetConfig, predict_noise

__all__ = [
    "IdentityCodec", "PatchifyCodec", "downsample_mask", "make_codec",
    "LoRALinear", "apply_lora", "merge_lora",
    "InpaintModel", "LoraConfig", "load_checkpoint", "parameter_groups", "save_checkpoint",
    "NoiseSchedule", "add_noise", "ddpm_step", "predict_x0",
    "DenoiserInput", "ToyUNet", "UNetConfig", "predict_noise",
]
