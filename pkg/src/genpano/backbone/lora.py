"""Low-rank adapters for ``nn.Linear`` layers."""
from __future__ import annotations

import copy
import re

import torch
from torch import nn

from ..errors import ShapeMismatch

SELF_ATTN_PATTERN = r"self_attn\.attn\.(to_q|to_k|to_v|to_out)$"


class LoRALinear(nn.Module):
    """``y = base(x) + (alpha / r) * x A^T B^T`` with ``base`` left untouched."""

    def __init__(self, base: nn.Linear, rank: int, alpha: float | None = None,
                 generator: torch.Generator | None = None):
        super().__init__()
        self.base = base
        self.rank = rank
        self.alpha = float(alpha if alpha is not None else rank)
        dt = base.weight.dtype
        self.lora_A = nn.Parameter(torch.empty(rank, base.in_features, dtype=dt))
        self.lora_B = nn.Parameter(torch.zeros(base.out_features, rank, dtype=dt))
        with torch.no_grad():
            bound = 1.0 / base.in_features ** 0.5
            self.lora_A.uniform_(-bound, bound, generator=generator)

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank

    def delta_weight(self) -> torch.Tensor:
        return self.scaling * self.lora_B @ self.lora_A

    def forward(self, x):
        return self.base(x) + self.scaling * ((x @ self.lora_A.T) @ self.lora_B.T)


def _named_linears(model: nn.Module, pattern: str):
    rx = re.compile(pattern)
    return [(n, m) for n, m in model.named_modules() if isinstance(m, nn.Linear) and rx.search(n)]


def _set_module(model: nn.Module, name: str, new: nn.Module):
    parent, _, leaf = name.rpartition(".")
    setattr(model.get_submodule(parent) if parent else model, leaf, new)


def apply_lora(model: nn.Module, rank: int = 8, alpha: float | None = None,
               pattern: str = SELF_ATTN_PATTERN, generator: torch.Generator | None = None) -> nn.Module:
    """Wrap every ``nn.Linear`` whose qualified name matches ``pattern`` (in place)."""
    targets = _named_linears(model, pattern)
    if not targets:
        raise ValueError(f"no linear layer matches {pattern!r}")
    for name, lin in targets:
        _set_module(model, name, LoRALinear(lin, rank, alpha, generator))
    return model


def lora_modules(model: nn.Module):
    return [(n, m) for n, m in model.named_modules() if isinstance(m, LoRALinear)]


def load_adapters(model: nn.Module, tensors: dict[str, torch.Tensor]) -> None:
    for name, mod in lora_modules(model):
        for key in ("lora_A", "lora_B"):
            t = tensors[f"{name}.{key}"]
            p = getattr(mod, key)
            if t.shape != p.shape:
                raise ShapeMismatch(f"{name}.{key}: {tuple(t.shape)} vs {tuple(p.shape)}")
            with torch.no_grad():
                p.copy_(t)


def merge_lora(model: nn.Module) -> nn.Module:
    """Copy of ``model`` with every adapter folded into a plain ``nn.Linear``."""
    merged = copy.deepcopy(model)
    for name, mod in lora_modules(merged):
        lin = nn.Linear(mod.base.in_features, mod.base.out_features, bias=mod.base.bias is not None,
                        dtype=mod.base.weight.dtype)
        with torch.no_grad():
            lin.weight.copy_(mod.base.weight + mod.delta_weight())
            if mod.base.bias is not None:
                lin.bias.copy_(mod.base.bias)
        _set_module(merged, name, lin)
    return merged
