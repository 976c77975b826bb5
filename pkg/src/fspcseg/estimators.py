"""Scikit-learn style estimators wrapping the pretrain and few-shot phases.

Both estimators follow the usual conventions: constructors only store
hyperparameters (so ``get_params``/``set_params``/``clone`` work), ``fit``
validates inputs and exposes learned state through trailing-underscore
attributes, and inputs are lists of clouds rather than flat design matrices.
"""

from __future__ import annotations

import logging

import numpy as np
import torch
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import geometry
from .augmentor import PointCloudAugmentor
from .contrastive import pretrain_step
from .data import (
    DEFAULT_SPLIT,
    ClassSplit,
    Episode,
    LabeledCloud,
    PointCloud,
    normalize_cloud,
    sample_episode,
)
from .encoder import ClassifierHead, PointEncoder
from .errors import DegenerateGraphError, InputError, NonFiniteLossError
from .model import (
    EpisodeSettings,
    SegmentationModel,
    episode_forward,
    predict_episode,
)
from .nnutil import to_tensor

log = logging.getLogger(__name__)


def _as_labeled_clouds(X) -> list[LabeledCloud]:
    if not isinstance(X, (list, tuple)) or not X:
        raise InputError("expected a non-empty list of clouds")
    out = []
    for item in X:
        if isinstance(item, LabeledCloud):
            out.append(item)
        elif isinstance(item, PointCloud):
            out.append(LabeledCloud(item, np.zeros(item.n_points, dtype=np.int32)))
        else:
            raise InputError(f"expected PointCloud/LabeledCloud items, got {type(item)!r}")
    return out


class ContrastivePretrainer(BaseEstimator):
    """Self-supervised encoder pretraining on two views of each cloud.

    ``fit`` trains the encoder and classifier head to tell each point of a
    cloud apart from all other points of its augmented copy, while the
    augmentor adversarially strengthens the augmentation subject to a warp
    penalty. Only the encoder is meant to be reused downstream.
    """

    def __init__(
        self,
        feature_dim=64,
        hidden_dim=64,
        encoder_layers=2,
        encoder_knn=16,
        n_classes=None,
        epochs=30,
        batch_size=16,
        lr=1e-3,
        augmentor_lr=1e-3,
        embed_dim=64,
        noise_dim=16,
        max_shift=0.1,
        jitter_sigma=0.01,
        deform_weight=1.0,
        freeze_augmentor=False,
        feature_space_contrast=False,
        temperature=1.0,
        edge_relative_only=False,
        random_state=0,
    ):
        self.feature_dim = feature_dim
        self.hidden_dim = hidden_dim
        self.encoder_layers = encoder_layers
        self.encoder_knn = encoder_knn
        self.n_classes = n_classes
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.augmentor_lr = augmentor_lr
        self.embed_dim = embed_dim
        self.noise_dim = noise_dim
        self.max_shift = max_shift
        self.jitter_sigma = jitter_sigma
        self.deform_weight = deform_weight
        self.freeze_augmentor = freeze_augmentor
        self.feature_space_contrast = feature_space_contrast
        self.temperature = temperature
        self.edge_relative_only = edge_relative_only
        self.random_state = random_state

    def fit(self, X, y=None):
        clouds = _as_labeled_clouds(X)
        n_classes = self.n_classes
        if n_classes is None:
            n_classes = max(int(lc.labels.max(initial=0)) for lc in clouds) + 1
            n_classes = max(n_classes, 2)
        in_channels = clouds[0].cloud.n_channels

        self.encoder_ = PointEncoder(
            in_channels=in_channels,
            hidden_dim=self.hidden_dim,
            feature_dim=self.feature_dim,
            n_layers=self.encoder_layers,
            edge_relative_only=self.edge_relative_only,
            seed=self.random_state,
        )
        self.head_ = ClassifierHead(self.feature_dim, n_classes, seed=self.random_state)
        self.augmentor_ = PointCloudAugmentor(
            embed_dim=self.embed_dim,
            noise_dim=self.noise_dim,
            max_shift=self.max_shift,
            jitter_sigma=self.jitter_sigma,
            seed=self.random_state,
        )
        self.n_classes_ = n_classes

        encoder_opt = torch.optim.Adam(
            list(self.encoder_.parameters()) + list(self.head_.parameters()), lr=self.lr
        )
        augmentor_opt = (
            None
            if self.freeze_augmentor
            else torch.optim.Adam(self.augmentor_.parameters(), lr=self.augmentor_lr)
        )

        # Precompute normalized tensors and neighbour graphs; batch by size.
        prepared = []
        for lc in clouds:
            cloud = normalize_cloud(lc.cloud)
            pts = to_tensor(cloud.points)
            nbr = torch.as_tensor(geometry.knn(cloud.xyz, min(self.encoder_knn, cloud.n_points - 1)))
            prepared.append((pts, nbr))
        buckets: dict[tuple[int, int], list[int]] = {}
        for i, (pts, nbr) in enumerate(prepared):
            buckets.setdefault((pts.shape[0], nbr.shape[1]), []).append(i)

        rng = np.random.default_rng([self.random_state, 31])
        self.loss_curve_ = []
        iteration = 0
        for _epoch in range(self.epochs):
            order = []
            for key in sorted(buckets):
                idx = np.array(buckets[key])
                rng.shuffle(idx)
                order.extend(
                    idx[at : at + self.batch_size] for at in range(0, len(idx), self.batch_size)
                )
            for batch in order:
                points = torch.stack([prepared[i][0] for i in batch])
                neighbors = torch.stack([prepared[i][1] for i in batch])
                try:
                    loss = pretrain_step(
                        self.encoder_,
                        self.head_,
                        self.augmentor_,
                        points,
                        neighbors,
                        [self.random_state, 37, iteration],
                        encoder_opt,
                        augmentor_opt,
                        deform_weight=self.deform_weight,
                        feature_space=self.feature_space_contrast,
                        temperature=self.temperature,
                    )
                except NonFiniteLossError as exc:
                    raise NonFiniteLossError(
                        f"pretrain aborted at iteration {iteration}: {exc}",
                        iteration=iteration,
                        seed=exc.seed,
                        loss=exc.loss,
                    ) from exc
                self.loss_curve_.append((iteration, loss))
                iteration += 1
        return self

    def transform(self, X):
        """Per-cloud feature matrices from the pretrained encoder."""
        check_is_fitted(self, "encoder_")
        out = []
        with torch.no_grad():
            for lc in _as_labeled_clouds(X):
                cloud = normalize_cloud(lc.cloud)
                pts = to_tensor(cloud.points).unsqueeze(0)
                nbr = torch.as_tensor(
                    geometry.knn(cloud.xyz, min(self.encoder_knn, cloud.n_points - 1))
                ).unsqueeze(0)
                out.append(self.encoder_(pts, nbr).squeeze(0).numpy())
        return out


class FewShotSegmenter(BaseEstimator):
    """Episodically trained few-shot point cloud segmenter.

    ``fit`` samples N-way K-shot episodes from the train split and descends
    the propagation cross-entropy plus the weighted center loss with Adam
    (per-module learning rates). ``predict`` labels the query clouds of an
    episode through prototype graph propagation.
    """

    def __init__(
        self,
        ways=2,
        shots=1,
        query_count=1,
        episodes=2000,
        feature_dim=64,
        hidden_dim=64,
        encoder_layers=2,
        encoder_knn=16,
        use_mra=True,
        mra_neighbors=32,
        mra_fps_ratio=0.4,
        attention_heads=1,
        scaled_attention=False,
        proto_count=100,
        use_center_loss=True,
        center_weight=0.1,
        center_eta=1.0,
        backprop_centers=False,
        gamma=0.9,
        sparsify_k=None,
        encoder_lr=5e-4,
        module_lr=1e-3,
        encoder_init=None,
        edge_relative_only=False,
        min_class_points=1,
        random_state=0,
    ):
        self.ways = ways
        self.shots = shots
        self.query_count = query_count
        self.episodes = episodes
        self.feature_dim = feature_dim
        self.hidden_dim = hidden_dim
        self.encoder_layers = encoder_layers
        self.encoder_knn = encoder_knn
        self.use_mra = use_mra
        self.mra_neighbors = mra_neighbors
        self.mra_fps_ratio = mra_fps_ratio
        self.attention_heads = attention_heads
        self.scaled_attention = scaled_attention
        self.proto_count = proto_count
        self.use_center_loss = use_center_loss
        self.center_weight = center_weight
        self.center_eta = center_eta
        self.backprop_centers = backprop_centers
        self.gamma = gamma
        self.sparsify_k = sparsify_k
        self.encoder_lr = encoder_lr
        self.module_lr = module_lr
        self.encoder_init = encoder_init
        self.edge_relative_only = edge_relative_only
        self.min_class_points = min_class_points
        self.random_state = random_state

    def _settings(self) -> EpisodeSettings:
        return EpisodeSettings(
            proto_count=self.proto_count,
            gamma=self.gamma,
            sparsify_k=self.sparsify_k,
            use_center_loss=self.use_center_loss,
            center_weight=self.center_weight,
            center_eta=self.center_eta,
            backprop_centers=self.backprop_centers,
        )

    def _build_model(self, in_channels: int) -> SegmentationModel:
        model = SegmentationModel(
            in_channels=in_channels,
            hidden_dim=self.hidden_dim,
            feature_dim=self.feature_dim,
            encoder_layers=self.encoder_layers,
            encoder_knn=self.encoder_knn,
            edge_relative_only=self.edge_relative_only,
            use_attention=self.use_mra,
            attention_heads=self.attention_heads,
            scaled_attention=self.scaled_attention,
            mra_neighbors=self.mra_neighbors,
            mra_fps_ratio=self.mra_fps_ratio,
            seed=self.random_state,
        )
        if self.encoder_init is not None:
            from .pipeline import load_encoder_into

            load_encoder_into(model.encoder, self.encoder_init)
        return model

    def fit(self, X, y=None, split: ClassSplit = DEFAULT_SPLIT):
        dataset = _as_labeled_clouds(X)
        model = self._build_model(dataset[0].cloud.n_channels)
        settings = self._settings()

        groups = [{"params": list(model.encoder.parameters()), "lr": self.encoder_lr}]
        if model.attention is not None:
            groups.append({"params": list(model.attention.parameters()), "lr": self.module_lr})
        optimizer = torch.optim.Adam(groups)

        self.metrics_ = []
        self.skipped_ = 0
        for i in range(self.episodes):
            episode = sample_episode(
                dataset,
                split,
                self.ways,
                self.shots,
                self.query_count,
                [self.random_state, 101, i],
                use="train",
                min_class_points=self.min_class_points,
            )
            try:
                out = episode_forward(model, episode, settings)
            except (InputError, DegenerateGraphError) as exc:
                self.skipped_ += 1
                log.warning("episode %d skipped: %s", i, exc)
                continue
            total = out.total_loss
            if not torch.isfinite(total):
                raise NonFiniteLossError(
                    f"non-finite loss at episode {i}",
                    iteration=i,
                    seed=[self.random_state, 101, i],
                    loss=float(total.detach()),
                )
            optimizer.zero_grad()
            total.backward()
            optimizer.step()
            self.metrics_.append(
                (i, float(out.label_loss.detach()), float(out.center_loss.detach()), float(total.detach()))
            )
        self.model_ = model
        self.split_ = split
        return self

    def predict(self, episode: Episode) -> list[np.ndarray]:
        check_is_fitted(self, "model_")
        return predict_episode(self.model_, episode, self._settings())

    def evaluate(self, X, split=None, episode_count=200, seed=0, use="test"):
        from .pipeline import evaluate as _evaluate

        check_is_fitted(self, "model_")
        split = split if split is not None else self.split_
        return _evaluate(
            self.model_,
            self._settings(),
            _as_labeled_clouds(X),
            split,
            ways=self.ways,
            shots=self.shots,
            query_count=self.query_count,
            episode_count=episode_count,
            seed=seed,
            use=use,
            min_class_points=self.min_class_points,
        )

    def score(self, X, y=None):
        """Foreground mean IoU over 50 seeded test episodes."""
        return self.evaluate(X, episode_count=50, seed=self.random_state).foreground_mean_iou
