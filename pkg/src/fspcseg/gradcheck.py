"""Finite-difference verification of analytic gradients.

Every component builds a tiny float64 instance and a loss closure that is a
pure function of its parameter tensors; central differences with step 1e-6
are compared against autograd. The relative error is the max-norm of the
difference over the larger of the two gradient max-norms.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .data import Episode, LabeledCloud, PointCloud
from .errors import InputError
from .labelprop import build_graph, ce_loss, propagate, query_slice, softmax_map
from .model import EpisodeSettings, SegmentationModel, episode_forward
from .nnutil import seeded_generator
from .prototypes import PrototypeSet, center_loss, class_centers

STEP = 1e-6
DEFAULT_TOLERANCE = 1e-4


@dataclass
class GradCheckResult:
    component: str
    max_rel_error: float
    n_params: int
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def max_relative_error(analytic, numeric) -> float:
    a = np.concatenate([np.asarray(x, dtype=np.float64).ravel() for x in analytic])
    n = np.concatenate([np.asarray(x, dtype=np.float64).ravel() for x in numeric])
    if a.shape != n.shape:
        raise InputError("gradient shapes differ")
    scale = max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0), 1e-12)
    return float(np.abs(a - n).max(initial=0.0) / scale)


def central_difference(fn, params, step=STEP):
    """Per-coordinate central differences of a scalar closure."""
    grads = []
    with torch.no_grad():
        for p in params:
            flat = p.reshape(-1)
            g = torch.zeros_like(flat)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + step
                hi = float(fn())
                flat[i] = orig - step
                lo = float(fn())
                flat[i] = orig
                g[i] = (hi - lo) / (2.0 * step)
            grads.append(g.reshape(p.shape).numpy())
    return grads


def compare(fn, params, tolerance=DEFAULT_TOLERANCE, component="custom") -> GradCheckResult:
    loss = fn()
    analytic = torch.autograd.grad(loss, params)
    numeric = central_difference(fn, params)
    err = max_relative_error([g.detach().numpy() for g in analytic], numeric)
    return GradCheckResult(
        component=component,
        max_rel_error=err,
        n_params=sum(p.numel() for p in params),
        tolerance=tolerance,
    )


def _rng_tensor(rng, *shape, scale=1.0):
    return torch.tensor(rng.normal(scale=scale, size=shape), dtype=torch.float64)


def _build_linear(seed=0):
    rng = np.random.default_rng([seed, 41])
    x = _rng_tensor(rng, 5, 3)
    w = _rng_tensor(rng, 3, 4).requires_grad_(True)
    target = _rng_tensor(rng, 5, 4)

    def fn():
        return ((x @ w - target) ** 2).sum()

    return fn, [w]


def _build_contrastive(seed=0):
    from .contrastive import pointwise_contrastive_loss

    rng = np.random.default_rng([seed, 43])
    orig = _rng_tensor(rng, 8, 4).requires_grad_(True)
    aug = _rng_tensor(rng, 8, 4).requires_grad_(True)

    def fn():
        return pointwise_contrastive_loss(orig, aug)

    return fn, [orig, aug]


def _build_center(seed=0):
    # Centers fixed at their unperturbed values: the production loss treats
    # them as constants during differentiation.
    rng = np.random.default_rng([seed, 47])
    feats = _rng_tensor(rng, 6, 4).requires_grad_(True)
    labels = torch.tensor([0, 0, 0, 1, 1, 1])
    with torch.no_grad():
        fixed, _ = class_centers(feats, labels, 2)

    def fn():
        d2 = torch.cdist(feats, fixed).pow(2)
        own = d2.gather(1, labels.view(-1, 1)).squeeze(1)
        return 0.5 * (own / (d2.sum(dim=1) - own + 1.0)).sum()

    result_fn = fn
    # Sanity: the closure at the base point equals the production loss.
    assert torch.allclose(result_fn(), center_loss(feats, labels, 2, 1.0))
    return result_fn, [feats]


def _build_labelprop(seed=0):
    rng = np.random.default_rng([seed, 53])
    protos = [
        _rng_tensor(rng, 2, 4).requires_grad_(True) for _ in range(3)
    ]  # 3 classes x 2 prototypes
    query = _rng_tensor(rng, 6, 4).requires_grad_(True)
    labels = torch.tensor([0, 1, 2, 1, 0, 2])

    def fn():
        graph = build_graph(PrototypeSet([p for p in protos]), query, gamma=0.5)
        probs = softmax_map(propagate(graph))
        return ce_loss(query_slice(graph, probs), labels)

    return fn, protos + [query]


def _tiny_cloud(rng, m=16, n_channels=3) -> PointCloud:
    return PointCloud(rng.uniform(-1.0, 1.0, size=(m, n_channels)).astype(np.float32))


def _build_encoder(seed=0):
    from .encoder import PointEncoder, cloud_neighbors

    rng = np.random.default_rng([seed, 59])
    cloud = _tiny_cloud(rng, 16)
    encoder = PointEncoder(hidden_dim=6, feature_dim=4, n_layers=2, seed=seed).double()
    points = torch.tensor(np.asarray(cloud.points), dtype=torch.float64).unsqueeze(0)
    neighbors = cloud_neighbors(cloud, 4)
    target = _rng_tensor(rng, 16, 4)

    def fn():
        return ((encoder(points, neighbors).squeeze(0) - target) ** 2).sum()

    return fn, [p for p in encoder.parameters()]


def _build_augmentor(seed=0):
    from .augmentor import PointCloudAugmentor

    rng = np.random.default_rng([seed, 61])
    augmentor = PointCloudAugmentor(embed_dim=6, noise_dim=3, seed=seed).double()
    points = torch.tensor(rng.uniform(-1, 1, size=(1, 8, 3)), dtype=torch.float64)

    def fn():
        result = augmentor(points, generator=seeded_generator(seed, 63))
        return result.augmented.pow(2).sum()

    return fn, [p for p in augmentor.parameters()]


def _build_mra(seed=0):
    from .mra import MultiResolutionAttention, mra_forward

    rng = np.random.default_rng([seed, 67])
    cloud = _tiny_cloud(rng, 12)
    block = MultiResolutionAttention(8, seed=seed).double()
    feats = _rng_tensor(rng, 12, 8)

    def fn():
        return mra_forward(block, feats, cloud, n_k=3, fps_ratio=0.5).pow(2).sum()

    return fn, [p for p in block.parameters()]


def tiny_episode(seed=0, m=14) -> Episode:
    """Hand-size 2-way 1-shot episode on random clouds."""
    rng = np.random.default_rng([seed, 71])

    def labeled(way):
        cloud = _tiny_cloud(rng, m)
        labels = np.zeros(m, dtype=np.int32)
        labels[way::3] = 1  # a deterministic point subset marks the class
        return LabeledCloud(cloud, labels)

    support = (labeled(0), labeled(1))
    q_cloud = _tiny_cloud(rng, m)
    q_labels = rng.integers(0, 3, size=m).astype(np.int32)
    query = (LabeledCloud(q_cloud, q_labels),)
    return Episode(support=support, query=query, way_count=2, shot_count=1)


def _build_endtoend(seed=0):
    episode = tiny_episode(seed)
    model = SegmentationModel(
        hidden_dim=6,
        feature_dim=4,
        encoder_layers=2,
        encoder_knn=3,
        mra_neighbors=3,
        mra_fps_ratio=0.5,
        seed=seed,
    ).double()
    # Centers enter the graph here so FD and autograd see the same function.
    settings = EpisodeSettings(
        proto_count=2, gamma=0.5, center_weight=0.1, backprop_centers=True
    )

    def fn():
        return episode_forward(model, episode, settings).total_loss

    return fn, [p for p in model.parameters()]


COMPONENTS = {
    "linear": _build_linear,
    "contrastive": _build_contrastive,
    "center": _build_center,
    "labelprop": _build_labelprop,
    "encoder": _build_encoder,
    "augmentor": _build_augmentor,
    "mra": _build_mra,
    "endtoend": _build_endtoend,
}


def check_component(name: str, tolerance: float = DEFAULT_TOLERANCE, seed: int = 0) -> GradCheckResult:
    if name not in COMPONENTS:
        raise InputError(f"unknown component {name!r}; choose from {sorted(COMPONENTS)}")
    fn, params = COMPONENTS[name](seed)
    return compare(fn, params, tolerance=tolerance, component=name)


def run_checks(components="all", tolerance: float = DEFAULT_TOLERANCE, seed: int = 0):
    names = sorted(COMPONENTS) if components == "all" else list(components)
    return [check_component(n, tolerance=tolerance, seed=seed) for n in names]
