"""Small torch helpers: seeding, initialization, index gathering."""

from __future__ import annotations

import numpy as np
import torch


def derive_seed(*parts) -> int:
    """Fold seed components into one 63-bit integer, deterministically."""
    return int(np.random.default_rng(list(parts)).integers(0, 2**63 - 1))


def seeded_generator(*parts) -> torch.Generator:
    gen = torch.Generator()
    gen.manual_seed(derive_seed(*parts))
    return gen


def init_linear(layer: torch.nn.Linear, generator: torch.Generator) -> None:
    """Uniform weights in +/- sqrt(6 / (fan_in + fan_out)); zero bias."""
    fan_in, fan_out = layer.in_features, layer.out_features
    bound = float(np.sqrt(6.0 / (fan_in + fan_out)))
    with torch.no_grad():
        layer.weight.uniform_(-bound, bound, generator=generator)
        if layer.bias is not None:
            layer.bias.zero_()


def gather_rows(feats: torch.Tensor, idx: torch.Tensor) -> torch.Tensor:
    """Index per-cloud rows: feats (B, M, C) and idx (B, ...) -> (B, ..., C)."""
    b, m, c = feats.shape
    offsets = torch.arange(b, device=feats.device).view((b,) + (1,) * (idx.dim() - 1))
    flat = feats.reshape(b * m, c)
    return flat[(idx + offsets * m).reshape(-1)].reshape(*idx.shape, c)


def to_tensor(points, dtype=torch.float32) -> torch.Tensor:
    arr = np.asarray(points)
    if not arr.flags.writeable:  # domain types publish read-only views
        arr = arr.copy()
    return torch.as_tensor(arr, dtype=dtype)
