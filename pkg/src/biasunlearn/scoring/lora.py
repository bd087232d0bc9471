"""Low-rank adapters wrapped around frozen linear layers."""

from __future__ import annotations

import contextlib
import math
from typing import Iterator, Sequence

import torch
from torch import nn


def _linear_dims(module: nn.Module) -> tuple[int, int]:
    """(in_features, out_features) for nn.Linear and GPT-2 style Conv1D."""
    if isinstance(module, nn.Linear):
        return module.in_features, module.out_features
    if type(module).__name__ == "Conv1D":
        # Conv1D stores weight as (in, out)
        return module.weight.shape[0], module.weight.shape[1]
    raise TypeError(f"cannot attach an adapter to {type(module).__name__}")


def is_adaptable(module: nn.Module) -> bool:
    return isinstance(module, nn.Linear) or type(module).__name__ == "Conv1D"


class LoRALinear(nn.Module):
    """``y = base(x) + scaling * x A^T B^T`` with the base layer frozen.

    B starts at zero so a freshly attached adapter is an exact identity.
    """

    def __init__(self, base: nn.Module, rank: int, alpha: float):
        super().__init__()
        if rank < 1:
            raise ValueError("adapter rank must be >= 1")
        self.base = base
        for p in self.base.parameters():
            p.requires_grad_(False)
        self.in_features, self.out_features = _linear_dims(base)
        w = next(base.parameters())
        self.rank = rank
        self.alpha = float(alpha)
        self.lora_A = nn.Parameter(torch.zeros(rank, self.in_features, dtype=w.dtype))
        self.lora_B = nn.Parameter(torch.zeros(self.out_features, rank, dtype=w.dtype))
        self.enabled = True

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank

    def reset_parameters(self, generator: torch.Generator | None = None) -> None:
        bound = 1.0 / math.sqrt(self.in_features)
        with torch.no_grad():
            self.lora_A.uniform_(-bound, bound, generator=generator)
            self.lora_B.zero_()

    def set_matrices(self, A: torch.Tensor, B: torch.Tensor, alpha: float) -> None:
        rank = A.shape[0]
        dtype = self.lora_A.dtype
        self.rank = rank
        self.alpha = float(alpha)
        self.lora_A = nn.Parameter(A.detach().clone().to(dtype))
        self.lora_B = nn.Parameter(B.detach().clone().to(dtype))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        y = self.base(x)
        if self.enabled:
            y = y + (x @ self.lora_A.T @ self.lora_B.T) * self.scaling
        return y


def _matches(name: str, targets: Sequence[str]) -> bool:
    return any(name == t or name.endswith("." + t) for t in targets)


def inject_lora(
    model: nn.Module,
    targets: Sequence[str],
    rank: int,
    alpha: float,
    generator: torch.Generator | None = None,
) -> list[str]:
    """Wrap every adaptable submodule whose qualified name ends with a target."""
    names = [n for n, m in model.named_modules() if n and _matches(n, targets) and is_adaptable(m)]
    if not names:
        raise ValueError(f"no adaptable modules match targets {list(targets)}")
    for name in names:
        wrap_module(model, name, rank, alpha, generator)
    return names


def wrap_module(model: nn.Module, name: str, rank: int, alpha: float, generator=None) -> LoRALinear:
    parent_name, _, attr = name.rpartition(".")
    parent = model.get_submodule(parent_name) if parent_name else model
    current = getattr(parent, attr)
    if isinstance(current, LoRALinear):
        current = current.base
    wrapped = LoRALinear(current, rank, alpha)
    wrapped.reset_parameters(generator)
    setattr(parent, attr, wrapped)
    return wrapped


def remove_lora(model: nn.Module) -> None:
    for name in list(lora_modules(model)):
        parent_name, _, attr = name.rpartition(".")
        parent = model.get_submodule(parent_name) if parent_name else model
        setattr(parent, attr, getattr(parent, attr).base)


def lora_modules(model: nn.Module) -> dict[str, LoRALinear]:
    return {n: m for n, m in model.named_modules() if isinstance(m, LoRALinear)}


def adapter_parameters(model: nn.Module) -> list[nn.Parameter]:
    params = []
    for m in lora_modules(model).values():
        params.extend([m.lora_A, m.lora_B])
    return params


def base_parameters(model: nn.Module) -> Iterator[tuple[str, torch.Tensor]]:
    for name, p in model.named_parameters():
        if "lora_A" not in name and "lora_B" not in name:
            yield name, p


@contextlib.contextmanager
def adapter_disabled(model: nn.Module):
    mods = list(lora_modules(model).values())
    previous = [m.enabled for m in mods]
    for m in mods:
        m.enabled = False
    try:
        yield model
    finally:
        for m, flag in zip(mods, previous):
            m.enabled = flag
