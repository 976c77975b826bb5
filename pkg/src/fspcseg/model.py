"""Few-shot segmentation model: encoder + attention features, prototype
extraction and transductive prediction for one episode.

Clouds are zero-centered and scaled to a unit bounding box before encoding.
Support features of way i carry class label i+1, unmasked support points are
background 0, and one propagation graph covers all query clouds of the
episode.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from . import geometry
from .data import Episode, PointCloud, normalize_cloud
from .encoder import PointEncoder
from .errors import ConfigurationError
from .labelprop import build_graph, ce_loss, predict, propagate, query_slice, softmax_map
from .mra import MultiResolutionAttention, mra_indices
from .nnutil import to_tensor
from .prototypes import PrototypeSet, center_loss, generate_prototypes


@dataclass(frozen=True)
class EpisodeSettings:
    """Episode-level hyperparameters shared by training and inference."""

    proto_count: int = 100
    gamma: float = 0.9
    sparsify_k: int | None = None
    use_center_loss: bool = True
    center_weight: float = 0.1
    center_eta: float = 1.0
    backprop_centers: bool = False


@dataclass
class EpisodeOutput:
    label_loss: torch.Tensor
    center_loss: torch.Tensor
    total_loss: torch.Tensor
    query_probs: torch.Tensor  # (sum of query sizes, N+1)
    query_sizes: list[int]
    prototypes: PrototypeSet


class SegmentationModel(nn.Module):
    """Encoder plus optional multi-resolution attention over each cloud."""

    def __init__(
        self,
        in_channels: int = 3,
        hidden_dim: int = 64,
        feature_dim: int = 64,
        encoder_layers: int = 2,
        encoder_knn: int = 16,
        edge_relative_only: bool = False,
        use_attention: bool = True,
        attention_heads: int = 1,
        scaled_attention: bool = False,
        mra_neighbors: int = 32,
        mra_fps_ratio: float = 0.4,
        seed: int = 0,
    ):
        super().__init__()
        self.encoder_knn = encoder_knn
        self.mra_neighbors = mra_neighbors
        self.mra_fps_ratio = mra_fps_ratio
        self.encoder = PointEncoder(
            in_channels=in_channels,
            hidden_dim=hidden_dim,
            feature_dim=feature_dim,
            n_layers=encoder_layers,
            edge_relative_only=edge_relative_only,
            seed=seed,
        )
        self.attention = (
            MultiResolutionAttention(
                feature_dim, heads=attention_heads, scaled=scaled_attention, seed=seed
            )
            if use_attention
            else None
        )
        # Geometry indices depend on the cloud alone, so they are cached per
        # cloud identity (datasets are immutable and reused across episodes).
        self._index_cache: dict = {}

    @property
    def out_width(self) -> int:
        width = self.encoder.feature_dim
        return 2 * width if self.attention is not None else width

    def _prepared(self, cloud: PointCloud):
        key = (cloud.points.ctypes.data, cloud.points.shape)
        hit = self._index_cache.get(key)
        if hit is not None:
            return hit
        m = cloud.n_points
        if self.encoder_knn > m - 1:
            raise ConfigurationError(
                f"encoder_knn={self.encoder_knn} needs clouds with > {self.encoder_knn} points, got {m}"
            )
        norm = normalize_cloud(cloud)
        enc_nbr = torch.as_tensor(geometry.knn(norm.xyz, self.encoder_knn)).unsqueeze(0)
        if self.attention is not None:
            mra_nbr, keypoints = mra_indices(norm, self.mra_neighbors, self.mra_fps_ratio)
        else:
            mra_nbr, keypoints = None, None
        hit = (np.asarray(norm.points), enc_nbr, mra_nbr, keypoints)
        if len(self._index_cache) >= 8192:
            self._index_cache.clear()
        self._index_cache[key] = hit
        return hit

    def cloud_features(self, cloud: PointCloud) -> torch.Tensor:
        """Per-point features of one cloud, (M, C) or (M, 2C) with attention."""
        points, enc_nbr, mra_nbr, keypoints = self._prepared(cloud)
        dtype = next(self.parameters()).dtype
        feats = self.encoder(to_tensor(points, dtype=dtype).unsqueeze(0), enc_nbr)
        if self.attention is not None:
            feats = self.attention(feats, mra_nbr, keypoints)
        return feats.squeeze(0)


def support_features(model: SegmentationModel, episode: Episode):
    """Stacked support features and class labels (way i -> label i+1)."""
    chunks, labels = [], []
    k = episode.shot_count
    for way in range(episode.way_count):
        for shot in range(k):
            lc = episode.support[way * k + shot]
            chunks.append(model.cloud_features(lc.cloud))
            labels.append(torch.as_tensor(lc.labels.copy(), dtype=torch.long) * (way + 1))
    return torch.cat(chunks, dim=0), torch.cat(labels, dim=0)


def query_features(model: SegmentationModel, episode: Episode):
    chunks, labels, sizes = [], [], []
    for lc in episode.query:
        chunks.append(model.cloud_features(lc.cloud))
        labels.append(torch.as_tensor(lc.labels.copy(), dtype=torch.long))
        sizes.append(lc.n_points)
    return torch.cat(chunks, dim=0), torch.cat(labels, dim=0), sizes


def episode_forward(
    model: SegmentationModel, episode: Episode, settings: EpisodeSettings
) -> EpisodeOutput:
    """Losses and query probabilities for one episode.

    Total loss is the propagation cross-entropy plus ``center_weight`` times
    the center loss; with the center term disabled the total equals the
    cross-entropy exactly.
    """
    n_classes = episode.way_count + 1
    sup_feats, sup_labels = support_features(model, episode)
    if settings.use_center_loss:
        reg = center_loss(
            sup_feats,
            sup_labels,
            n_classes,
            settings.center_eta,
            detach_centers=not settings.backprop_centers,
        )
    else:
        reg = torch.zeros((), dtype=sup_feats.dtype)
    protos = generate_prototypes(sup_feats, sup_labels, n_classes, settings.proto_count)

    q_feats, q_labels, sizes = query_features(model, episode)
    graph = build_graph(protos, q_feats, settings.gamma, settings.sparsify_k)
    probs = softmax_map(propagate(graph))
    q_probs = query_slice(graph, probs)
    label_loss = ce_loss(q_probs, q_labels)
    total = label_loss if not settings.use_center_loss else label_loss + settings.center_weight * reg
    return EpisodeOutput(
        label_loss=label_loss,
        center_loss=reg,
        total_loss=total,
        query_probs=q_probs,
        query_sizes=sizes,
        prototypes=protos,
    )


def split_by_sizes(flat: np.ndarray, sizes: list[int]) -> list[np.ndarray]:
    out, at = [], 0
    for s in sizes:
        out.append(flat[at : at + s])
        at += s
    return out


def predict_episode(
    model: SegmentationModel, episode: Episode, settings: EpisodeSettings
) -> list[np.ndarray]:
    """Predicted labels per query cloud via graph propagation."""
    with torch.no_grad():
        out = episode_forward(model, episode, settings)
    return split_by_sizes(predict(out.query_probs), out.query_sizes)


def predict_nearest_prototype(
    model: SegmentationModel, episode: Episode, settings: EpisodeSettings
) -> list[np.ndarray]:
    """Baseline: label each query point by its nearest prototype's class."""
    with torch.no_grad():
        sup_feats, sup_labels = support_features(model, episode)
        protos = generate_prototypes(
            sup_feats, sup_labels, episode.way_count + 1, settings.proto_count
        )
        proto_feats, proto_labels = protos.stacked()
        q_feats, _, sizes = query_features(model, episode)
        nearest = torch.cdist(q_feats, proto_feats).argmin(dim=1)
        labels = proto_labels[nearest].cpu().numpy().astype(np.int64)
    return split_by_sizes(labels, sizes)
