"""Center-regularized support features and multi-prototype generation.

The center loss pulls every support feature toward its class mean relative
to its distance from the other class means. Prototypes are built per class
by farthest-point sampling in feature space followed by nearest-seed
grouping and group means, so every prototype is a mean of that class's
features. Class 0 (background) takes part like any other class.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import torch

from . import geometry
from .errors import InputError


@dataclass
class PrototypeSet:
    """Per-class prototype matrices in feature space, classes 0..N in order."""

    per_class: list[torch.Tensor]

    @property
    def n_classes(self) -> int:
        return len(self.per_class)

    @property
    def total(self) -> int:
        return sum(int(p.shape[0]) for p in self.per_class)

    def stacked(self) -> tuple[torch.Tensor, torch.Tensor]:
        """All prototypes stacked class-major plus their class-id vector."""
        feats = torch.cat(self.per_class, dim=0)
        labels = torch.cat(
            [
                torch.full((p.shape[0],), c, dtype=torch.long)
                for c, p in enumerate(self.per_class)
            ]
        )
        return feats, labels


def class_counts(labels: torch.Tensor, num_classes: int) -> torch.Tensor:
    return torch.bincount(labels, minlength=num_classes)[:num_classes]


def class_centers(
    features: torch.Tensor, labels: torch.Tensor, num_classes: int
) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-class feature means; absent classes are NaN rows flagged in the mask."""
    if features.shape[0] != labels.shape[0]:
        raise InputError("features and labels must align row-wise")
    counts = class_counts(labels, num_classes)
    present = counts > 0
    centers = torch.full(
        (num_classes, features.shape[1]), float("nan"), dtype=features.dtype
    )
    for c in range(num_classes):
        if present[c]:
            centers[c] = features[labels == c].mean(dim=0)
    return centers, present


def center_loss(
    features: torch.Tensor,
    labels: torch.Tensor,
    num_classes: int,
    eta: float = 1.0,
    *,
    detach_centers: bool = True,
) -> torch.Tensor:
    """Half the sum over points of own-center distance over other-center mass.

    For point x of class n:  0.5 * ||x - C_n||^2 / (sum_{j != n} ||x - C_j||^2 + eta).
    Centers come from the same batch; by default they are treated as
    constants during differentiation (``detach_centers=False`` backprops
    through them for ablations).
    """
    if eta <= 0:
        raise InputError(f"eta={eta} must be positive")
    labels = labels.long()
    centers, present = class_centers(features, labels, num_classes)
    if not bool(present.all()):
        missing = int(torch.nonzero(~present)[0])
        raise InputError(f"class {missing} has no support points")
    if detach_centers:
        centers = centers.detach()
    d2 = torch.cdist(features, centers).pow(2)  # (S, num_classes)
    own = d2.gather(1, labels.view(-1, 1)).squeeze(1)
    others = d2.sum(dim=1) - own
    return 0.5 * (own / (others + eta)).sum()


def generate_prototypes(
    features: torch.Tensor,
    labels: torch.Tensor,
    num_classes: int,
    proto_count: int,
    seed=None,
) -> PrototypeSet:
    """Feature-space FPS seeds + nearest-seed groups + group means, per class.

    ``proto_count`` is clamped to the class size with a warning. The FPS start
    is the class's lowest point index and all ties break by lower index, so
    the procedure is deterministic; ``seed`` is accepted for interface
    stability but unused.
    """
    if proto_count < 1:
        raise InputError(f"proto_count={proto_count} must be >= 1")
    labels = labels.long()
    per_class: list[torch.Tensor] = []
    for c in range(num_classes):
        rows = torch.nonzero(labels == c, as_tuple=False).squeeze(1)
        if rows.numel() == 0:
            raise InputError(f"class {c} has no support points")
        feats_c = features[rows]
        n_c = int(rows.numel())
        count = min(proto_count, n_c)
        if count < proto_count:
            warnings.warn(
                f"class {c}: proto_count {proto_count} clamped to class size {n_c}",
                stacklevel=2,
            )
        if count == n_c:
            per_class.append(feats_c)
            continue
        coords = feats_c.detach().cpu().numpy().astype(np.float64)
        seeds = geometry.fps(coords, count, start=0)
        seed_coords = coords[seeds]  # (count, D)
        d2 = ((coords[:, None, :] - seed_coords[None, :, :]) ** 2).sum(-1)
        assign = d2.argmin(axis=1)  # ties -> lower seed index
        groups = []
        for g in range(count):
            members = np.nonzero(assign == g)[0]
            if members.size == 0:  # duplicate features collapsed onto another seed
                groups.append(feats_c[int(seeds[g])])
            else:
                groups.append(feats_c[torch.as_tensor(members, dtype=torch.long)].mean(dim=0))
        per_class.append(torch.stack(groups))
    return PrototypeSet(per_class)
