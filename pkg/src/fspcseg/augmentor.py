"""Trainable point cloud augmentor: a learned global 3x3 warp plus a learned
per-point displacement, followed by non-trainable random translation and
jitter.

The warp head starts at the identity (zero weights, identity bias) and the
displacement head at zero, so a freshly built augmentor is the identity map
up to the random layers. Row i of the augmented cloud always corresponds to
row i of the original, which the point-wise contrastive loss relies on.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import torch
from torch import nn

from .data import PointCloud
from .errors import ConfigurationError
from .nnutil import init_linear, seeded_generator, to_tensor


class AugmentResult(NamedTuple):
    augmented: torch.Tensor  # after random layers
    warped: torch.Tensor  # learned warp only
    transform: torch.Tensor  # (B, 3, 3)
    displacement: torch.Tensor  # (B, M, 3)


@dataclass(frozen=True)
class AugmentedPair:
    """Original/augmented clouds with index-aligned rows."""

    original: PointCloud
    augmented: PointCloud
    warped: PointCloud

    def __post_init__(self):
        if self.original.points.shape != self.augmented.points.shape:
            raise ConfigurationError("augmented cloud must match the original shape")


class PointCloudAugmentor(nn.Module):
    def __init__(
        self,
        embed_dim: int = 64,
        noise_dim: int = 16,
        max_shift: float = 0.1,
        jitter_sigma: float = 0.01,
        negative_slope: float = 0.2,
        seed: int = 0,
    ):
        super().__init__()
        if embed_dim < 4 or noise_dim < 1:
            raise ConfigurationError("need embed_dim >= 4 and noise_dim >= 1")
        self.embed_dim = embed_dim
        self.noise_dim = noise_dim
        self.max_shift = float(max_shift)
        self.jitter_sigma = float(jitter_sigma)
        act = nn.LeakyReLU(negative_slope)
        self.embed = nn.Sequential(nn.Linear(3, embed_dim), act, nn.Linear(embed_dim, embed_dim))
        self.shape_hidden = nn.Sequential(nn.Linear(embed_dim + noise_dim, embed_dim), act)
        self.shape_out = nn.Linear(embed_dim, 9)
        self.point_hidden = nn.Sequential(nn.Linear(2 * embed_dim + noise_dim, embed_dim), act)
        self.point_out = nn.Linear(embed_dim, 3)

        gen = seeded_generator(seed, 17)
        for mod in self.modules():
            if isinstance(mod, nn.Linear):
                init_linear(mod, gen)
        # Identity warp / zero displacement at initialization.
        with torch.no_grad():
            self.shape_out.weight.zero_()
            self.shape_out.bias.copy_(torch.eye(3).reshape(-1))
            self.point_out.weight.zero_()
            self.point_out.bias.zero_()

    def embed_points(self, xyz: torch.Tensor) -> torch.Tensor:
        """Per-point embedding (B, M, 3) -> (B, M, C_a)."""
        return self.embed(xyz)

    def shape_transform(self, embedded: torch.Tensor, noise: torch.Tensor) -> torch.Tensor:
        """Global 3x3 warp from the max-pooled embedding and a noise draw."""
        pooled = embedded.max(dim=1).values  # (B, C_a)
        h = self.shape_hidden(torch.cat([pooled, noise], dim=-1))
        return self.shape_out(h).reshape(-1, 3, 3)

    def point_displacement(
        self, embedded: torch.Tensor, shape_feat: torch.Tensor, noise: torch.Tensor
    ) -> torch.Tensor:
        """Per-point displacement rows from [embedding, pooled feature, noise]."""
        m = embedded.shape[1]
        tiled = shape_feat.unsqueeze(1).expand(-1, m, -1)
        noise_tiled = noise.unsqueeze(1).expand(-1, m, -1)
        h = self.point_hidden(torch.cat([embedded, tiled, noise_tiled], dim=-1))
        return self.point_out(h)

    def forward(
        self,
        points: torch.Tensor,
        generator: torch.Generator | None = None,
        apply_random: bool = True,
    ) -> AugmentResult:
        """Augment (B, M, f) points; non-xyz channels pass through unchanged."""
        dtype = points.dtype
        xyz = points[..., :3]
        b, m = xyz.shape[0], xyz.shape[1]
        noise = torch.randn(b, 2 * self.noise_dim, generator=generator, dtype=dtype)
        embedded = self.embed_points(xyz)
        transform = self.shape_transform(embedded, noise[:, : self.noise_dim])
        pooled = embedded.max(dim=1).values
        displacement = self.point_displacement(embedded, pooled, noise[:, self.noise_dim :])
        warped = torch.bmm(xyz, transform) + displacement
        out = warped
        if apply_random:
            shift = torch.empty(b, 1, 3, dtype=dtype).uniform_(
                -self.max_shift, self.max_shift, generator=generator
            )
            jitter = torch.randn(b, m, 3, generator=generator, dtype=dtype) * self.jitter_sigma
            jitter = jitter.clamp(-3.0 * self.jitter_sigma, 3.0 * self.jitter_sigma)
            out = out + shift + jitter
        if points.shape[-1] > 3:
            out = torch.cat([out, points[..., 3:]], dim=-1)
            warped = torch.cat([warped, points[..., 3:]], dim=-1)
        return AugmentResult(out, warped, transform, displacement)


def augment(augmentor: PointCloudAugmentor, cloud: PointCloud, seed) -> AugmentedPair:
    """Cloud-level augmentation with a seeded random stream."""
    pts = to_tensor(cloud.points).unsqueeze(0)
    with torch.no_grad():
        result = augmentor(pts, generator=seeded_generator(seed, 19))
    return AugmentedPair(
        original=cloud,
        augmented=PointCloud(result.augmented.squeeze(0).numpy()),
        warped=PointCloud(result.warped.squeeze(0).numpy()),
    )


def deformation_penalty(original_xyz, warped_xyz) -> torch.Tensor:
    """Mean over points of the squared xyz displacement (pre-random layers)."""
    orig = original_xyz if isinstance(original_xyz, torch.Tensor) else to_tensor(original_xyz)
    warp = warped_xyz if isinstance(warped_xyz, torch.Tensor) else to_tensor(warped_xyz)
    diff = warp[..., :3] - orig[..., :3]
    return diff.pow(2).sum(dim=-1).mean()
