"""Small torch building blocks shared by the models."""

from __future__ import annotations

import hashlib
import math

import numpy as np
import torch
from torch import nn


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    """Sinusoidal embedding of integer timesteps ``t`` (shape ``[B]``) into ``[B, dim]``."""
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = torch.cat([emb, torch.zeros_like(emb[:, :1])], dim=-1)
    return emb


class TimestepMLP(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.dim = dim
        self.net = nn.Sequential(nn.Linear(dim, dim), nn.SiLU(), nn.Linear(dim, dim))

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        w = self.net[0].weight
        return self.net(timestep_embedding(t, self.dim).to(w.dtype))


def sinusoidal_positions(n: int, dim: int) -> torch.Tensor:
    return timestep_embedding(torch.arange(n), dim).to(torch.float32)


def state_dict_numpy(module: nn.Module, prefix: str = "") -> dict[str, np.ndarray]:
    return {prefix + k: v.detach().cpu().numpy().copy() for k, v in module.state_dict().items()}


def load_state_numpy(module: nn.Module, arrays: dict[str, np.ndarray], prefix: str = "") -> None:
    own = module.state_dict()
    missing = [k for k in own if prefix + k not in arrays]
    if missing:
        raise KeyError(f"checkpoint is missing tensors: {missing[:5]}")
    module.load_state_dict({k: torch.from_numpy(np.array(arrays[prefix + k])).to(own[k].dtype) for k in own})


def params_digest(module: nn.Module) -> str:
    """SHA-256 over the raw bytes of every parameter and buffer, in state-dict order."""
    h = hashlib.sha256()
    for name, value in module.state_dict().items():
        h.update(name.encode("utf-8"))
        h.update(value.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def resolve_dtype(name: str) -> torch.dtype:
    try:
        return {"float32": torch.float32, "float64": torch.float64}[name]
    except KeyError:
        raise ValueError(f"dtype must be 'float32' or 'float64', got {name!r}") from None


def seed_everything(seed: int) -> torch.Generator:
    torch.manual_seed(int(seed))
    return torch.Generator().manual_seed(int(seed))
