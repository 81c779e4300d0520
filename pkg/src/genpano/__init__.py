"""Generative panorama stitching: layout, positional-encoding conditioning, a toy
inpainting diffusion model with LoRA, tiled outpainting, seed selection and
masked metrics."""

__version__ = "0.1.0"
