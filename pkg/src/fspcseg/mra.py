"""Multi-resolution attention over sampled key points.

Every point attends to its k nearest neighbours (local resolution) plus one
shared set of farthest-sampled key points (global resolution) — never to all
M points, which keeps the per-point attention width at N_F + N_K. Key rows
are stacked farthest-first. Dot-product scores are used as-is by default; a
``scaled`` flag enables the conventional 1/sqrt(C) scaling for ablations.
The output concatenates the attention result with the input features, giving
width 2C.
"""

from __future__ import annotations

import torch
from torch import nn

from . import geometry
from .data import PointCloud
from .errors import ConfigurationError, InputError
from .nnutil import gather_rows, init_linear, seeded_generator


class MultiResolutionAttention(nn.Module):
    def __init__(
        self,
        feature_dim: int,
        heads: int = 1,
        scaled: bool = False,
        seed: int = 0,
    ):
        super().__init__()
        if feature_dim < 1 or heads < 1 or feature_dim % heads != 0:
            raise ConfigurationError(
                f"heads={heads} must divide feature_dim={feature_dim}"
            )
        self.feature_dim = feature_dim
        self.heads = heads
        self.scaled = scaled
        self.query_map = nn.Linear(feature_dim, feature_dim)
        self.key_map = nn.Linear(feature_dim, feature_dim)
        self.value_map = nn.Linear(feature_dim, feature_dim)
        gen = seeded_generator(seed, 29)
        for lin in (self.query_map, self.key_map, self.value_map):
            init_linear(lin, gen)
        self.last_attention_shape: tuple[int, ...] | None = None

    def _split_heads(self, t: torch.Tensor) -> torch.Tensor:
        # (..., C) -> (..., h, C/h)
        return t.reshape(*t.shape[:-1], self.heads, self.feature_dim // self.heads)

    def scores(
        self, feats: torch.Tensor, neighbors: torch.Tensor | None, keypoints: torch.Tensor
    ) -> torch.Tensor:
        """Raw attention scores (B, M, h, N_F + N_K), farthest keys first."""
        q = self._split_heads(self.query_map(feats))  # (B, M, h, d)
        far = gather_rows(feats, keypoints)  # (B, Nf, C)
        k_far = self._split_heads(self.key_map(far))  # (B, Nf, h, d)
        score_far = torch.einsum("bmhd,bnhd->bmhn", q, k_far)
        if neighbors is None:
            scores = score_far
        else:
            nbr = gather_rows(feats, neighbors)  # (B, M, Nk, C)
            k_nbr = self._split_heads(self.key_map(nbr))  # (B, M, Nk, h, d)
            score_nbr = torch.einsum("bmhd,bmkhd->bmhk", q, k_nbr)
            scores = torch.cat([score_far, score_nbr], dim=-1)
        if self.scaled:
            scores = scores / (self.feature_dim // self.heads) ** 0.5
        return scores

    def forward(
        self,
        feats: torch.Tensor,
        neighbors: torch.Tensor | None,
        keypoints: torch.Tensor,
    ) -> torch.Tensor:
        """feats (B, M, C) -> (B, M, 2C): attention output, then the input."""
        if feats.shape[-1] != self.feature_dim:
            raise ConfigurationError(
                f"attention expects width {self.feature_dim}, got {feats.shape[-1]}"
            )
        n_far = keypoints.shape[-1]
        scores = self.scores(feats, neighbors, keypoints)
        attn = torch.softmax(scores, dim=-1)
        self.last_attention_shape = tuple(attn.shape)

        far = gather_rows(feats, keypoints)
        v_far = self._split_heads(self.value_map(far))
        out = torch.einsum("bmhn,bnhd->bmhd", attn[..., :n_far], v_far)
        if neighbors is not None:
            nbr = gather_rows(feats, neighbors)
            v_nbr = self._split_heads(self.value_map(nbr))
            out = out + torch.einsum("bmhk,bmkhd->bmhd", attn[..., n_far:], v_nbr)
        out = out.reshape(*feats.shape)
        return torch.cat([out, feats], dim=-1)


def mra_indices(cloud, n_k: int, fps_ratio: float, *, start: int = 0):
    """Neighbour and keypoint index tensors for one cloud's xyz coordinates."""
    xyz = cloud.xyz if isinstance(cloud, PointCloud) else cloud
    m = xyz.shape[0]
    n_far = geometry.fps_count(m, fps_ratio)
    if n_k < 0 or n_k > m - 1:
        raise InputError(f"n_k={n_k} must satisfy 0 <= n_k <= M-1 (M={m})")
    if n_k + n_far == 0:
        raise ConfigurationError("attention needs at least one key: n_k + N_F = 0")
    neighbors = (
        torch.as_tensor(geometry.knn(xyz, n_k)).unsqueeze(0) if n_k > 0 else None
    )
    keypoints = torch.as_tensor(geometry.fps(xyz, n_far, start)).unsqueeze(0)
    return neighbors, keypoints


def mra_forward(
    block: MultiResolutionAttention,
    feats: torch.Tensor,
    cloud,
    n_k: int,
    fps_ratio: float,
) -> torch.Tensor:
    """Single-cloud forward: features (M, C) -> (M, 2C)."""
    xyz = cloud.xyz if isinstance(cloud, PointCloud) else cloud
    if feats.shape[0] != xyz.shape[0]:
        raise InputError(
            f"feature rows ({feats.shape[0]}) must match cloud points ({xyz.shape[0]})"
        )
    neighbors, keypoints = mra_indices(cloud, n_k, fps_ratio)
    return block(feats.unsqueeze(0), neighbors, keypoints).squeeze(0)


def attention_map(
    block: MultiResolutionAttention,
    feats: torch.Tensor,
    cloud,
    index: int,
    n_k: int,
    fps_ratio: float,
):
    """Raw scores and softmax weights of one point's attention row."""
    m = feats.shape[0]
    if not 0 <= index < m:
        raise InputError(f"point index {index} out of range [0, {m})")
    neighbors, keypoints = mra_indices(cloud, n_k, fps_ratio)
    scores = block.scores(feats.unsqueeze(0), neighbors, keypoints)[0, index]
    if block.heads == 1:
        scores = scores.squeeze(0)
    return scores, torch.softmax(scores, dim=-1)
