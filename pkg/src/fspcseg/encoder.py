"""Per-point feature extractor: stacked edge convolutions plus a linear head.

Each edge-convolution layer builds, for every point i and neighbour j, the
edge feature [x_i, x_j - x_i] (or just the relative part when
``edge_relative_only``), pushes it through two linear maps with a leaky
rectifier, and max-aggregates over the neighbours. The neighbour graph is
computed once on xyz and shared by all layers. Forward/backward are pure
given parameters; a training step mutating parameters must be serialized
externally.
"""

from __future__ import annotations

import torch
from torch import nn

from . import geometry
from .data import PointCloud
from .errors import ConfigurationError, InputError
from .nnutil import gather_rows, init_linear, seeded_generator, to_tensor


class EdgeConvLayer(nn.Module):
    def __init__(self, in_dim, out_dim, *, edge_relative_only=False, negative_slope=0.2):
        super().__init__()
        self.edge_relative_only = edge_relative_only
        edge_in = in_dim if edge_relative_only else 2 * in_dim
        self.lin1 = nn.Linear(edge_in, out_dim)
        self.lin2 = nn.Linear(out_dim, out_dim)
        self.act = nn.LeakyReLU(negative_slope)

    def forward(self, feats: torch.Tensor, neighbors: torch.Tensor) -> torch.Tensor:
        # feats (B, M, C_in), neighbors (B, M, k) -> (B, M, C_out)
        nbr = gather_rows(feats, neighbors)
        center = feats.unsqueeze(2).expand_as(nbr)
        edge = nbr - center
        if not self.edge_relative_only:
            edge = torch.cat([center, edge], dim=-1)
        h = self.act(self.lin2(self.act(self.lin1(edge))))
        return h.max(dim=2).values


class PointEncoder(nn.Module):
    """Maps a point cloud (B, M, f) to per-point features (B, M, C)."""

    def __init__(
        self,
        in_channels: int = 3,
        hidden_dim: int = 64,
        feature_dim: int = 64,
        n_layers: int = 2,
        edge_relative_only: bool = False,
        negative_slope: float = 0.2,
        seed: int = 0,
    ):
        super().__init__()
        if min(in_channels, hidden_dim, feature_dim, n_layers) < 1:
            raise ConfigurationError("encoder dimensions must be positive")
        self.in_channels = in_channels
        self.feature_dim = feature_dim
        layers = []
        width = in_channels
        for _ in range(n_layers):
            layers.append(
                EdgeConvLayer(
                    width,
                    hidden_dim,
                    edge_relative_only=edge_relative_only,
                    negative_slope=negative_slope,
                )
            )
            width = hidden_dim
        self.layers = nn.ModuleList(layers)
        self.project = nn.Linear(hidden_dim, feature_dim)
        gen = seeded_generator(seed, 11)
        for mod in self.modules():
            if isinstance(mod, nn.Linear):
                init_linear(mod, gen)

    def forward(self, points: torch.Tensor, neighbors: torch.Tensor) -> torch.Tensor:
        if points.shape[-1] != self.in_channels:
            raise ConfigurationError(
                f"encoder expects {self.in_channels} channels, cloud has {points.shape[-1]}"
            )
        feats = points
        for layer in self.layers:
            feats = layer(feats, neighbors)
        return self.project(feats)


class ClassifierHead(nn.Module):
    """Per-point linear map from feature space to pretrain class logits."""

    def __init__(self, feature_dim: int, n_classes: int, seed: int = 0):
        super().__init__()
        self.linear = nn.Linear(feature_dim, n_classes)
        init_linear(self.linear, seeded_generator(seed, 13))

    def forward(self, feats: torch.Tensor) -> torch.Tensor:
        if feats.shape[-1] != self.linear.in_features:
            raise ConfigurationError(
                f"head expects width {self.linear.in_features}, got {feats.shape[-1]}"
            )
        return self.linear(feats)


def cloud_neighbors(cloud, k: int) -> torch.Tensor:
    """KNN indices of one cloud as a (1, M, k) tensor."""
    xyz = cloud.xyz if isinstance(cloud, PointCloud) else cloud
    return torch.as_tensor(geometry.knn(xyz, k)).unsqueeze(0)


def encode(encoder: PointEncoder, cloud: PointCloud, k_enc: int) -> torch.Tensor:
    """Per-point features (M, C) of a single cloud; pure given parameters."""
    if k_enc > cloud.n_points - 1:
        raise InputError(f"k_enc={k_enc} exceeds M-1={cloud.n_points - 1}")
    points = to_tensor(cloud.points, dtype=next(encoder.parameters()).dtype).unsqueeze(0)
    return encoder(points, cloud_neighbors(cloud, k_enc)).squeeze(0)


def classify(head: ClassifierHead, feats: torch.Tensor) -> torch.Tensor:
    return head(feats)
