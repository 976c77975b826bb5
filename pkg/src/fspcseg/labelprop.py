"""Transductive label propagation from prototype nodes to query points.

Nodes are stacked prototypes-first; prototype rows of the reference matrix
are one-hot class indicators and query rows are zero. Affinities are
Gaussian in feature distance with a single global bandwidth (the standard
deviation of all pairwise node distances). The damped propagation system is
solved as a linear system in float64 (never via an explicit inverse) and the
result is turned into per-node class probabilities by a row softmax.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import torch

from .errors import DegenerateGraphError, InputError, SolverError
from .prototypes import PrototypeSet

RESIDUAL_BOUND = 1e-8


@dataclass
class PropagationGraph:
    node_features: torch.Tensor  # (Z, D), prototypes first
    affinity: torch.Tensor  # (Z, Z) W, entries in (0, 1]
    reference: torch.Tensor  # (Z, n_classes) one-hot prototype rows, zero query rows
    gamma: float
    sigma: float
    n_labeled: int

    @property
    def size(self) -> int:
        return int(self.node_features.shape[0])

    @property
    def n_classes(self) -> int:
        return int(self.reference.shape[1])


def pairwise_distance_sigma(features: torch.Tensor) -> torch.Tensor:
    """Population std of the distances over all unordered node pairs."""
    return _distance_sigma(torch.cdist(features, features))


def _distance_sigma(dists: torch.Tensor) -> torch.Tensor:
    # Moment form over the Z^2 - Z off-diagonal entries; each unordered pair
    # appears twice, which leaves mean and variance unchanged. float64 keeps
    # the E[d^2] - E[d]^2 cancellation stable.
    z = dists.shape[0]
    n = z * (z - 1)
    if n == 0:
        return torch.zeros((), dtype=torch.float64)
    d = dists.to(torch.float64)
    s1 = d.sum()  # diagonal is zero
    s2 = (d * d).sum()
    mean = s1 / n
    var = torch.clamp(s2 / n - mean * mean, min=0.0)
    return torch.sqrt(var)


def build_graph(
    prototypes: PrototypeSet,
    query_features: torch.Tensor,
    gamma: float = 0.9,
    sparsify_k: int | None = None,
) -> PropagationGraph:
    """Assemble node features, Gaussian affinities and the reference matrix.

    ``gamma`` = 0 is accepted as a test-only value (propagation reduces to
    the reference matrix); the operating range is (0, 1).
    """
    if not 0.0 <= gamma < 1.0:
        raise InputError(f"gamma={gamma} outside [0, 1)")
    proto_feats, proto_labels = prototypes.stacked()
    if query_features.ndim != 2 or query_features.shape[1] != proto_feats.shape[1]:
        raise InputError(
            f"query features must be (Q, {proto_feats.shape[1]}), got {tuple(query_features.shape)}"
        )
    if not torch.isfinite(query_features).all():
        raise InputError("query features contain non-finite entries")
    feats = torch.cat([proto_feats, query_features], dim=0)
    z = feats.shape[0]

    dists = torch.cdist(feats, feats)
    sigma = _distance_sigma(dists)
    if float(sigma.detach()) <= 0.0:
        raise DegenerateGraphError(
            "all node features are identical (sigma = 0); perturb inputs or skip the episode"
        )
    sigma = sigma.to(feats.dtype)
    affinity = torch.exp(-dists.pow(2) / (2.0 * sigma**2))
    if sparsify_k is not None:
        if sparsify_k < 1:
            raise InputError(f"sparsify_k={sparsify_k} must be >= 1")
        k = min(sparsify_k, z)
        keep = torch.zeros_like(affinity, dtype=torch.bool)
        top = torch.topk(affinity, k, dim=1).indices
        keep.scatter_(1, top, True)
        keep.fill_diagonal_(True)
        affinity = torch.where(keep, affinity, torch.zeros_like(affinity))

    n_classes = prototypes.n_classes
    reference = torch.zeros(z, n_classes, dtype=feats.dtype)
    reference[torch.arange(proto_labels.shape[0]), proto_labels] = 1.0
    return PropagationGraph(
        node_features=feats,
        affinity=affinity,
        reference=reference,
        gamma=float(gamma),
        sigma=float(sigma.detach()),
        n_labeled=int(proto_labels.shape[0]),
    )


def propagate(graph: PropagationGraph) -> torch.Tensor:
    """Solve (I - gamma * S) F = L with S the symmetrized normalized affinity.

    Runs in float64 and enforces the max-norm residual bound; raises
    SolverError with a condition estimate if the solve cannot meet it.
    """
    w2 = (graph.affinity + graph.affinity.transpose(0, 1)).to(torch.float64)
    deg = w2.sum(dim=1)
    if bool((deg <= 0).any()):
        raise SolverError("graph has an isolated node with zero degree")
    inv_sqrt = deg.rsqrt()
    s = w2 * inv_sqrt.view(-1, 1) * inv_sqrt.view(1, -1)
    system = torch.eye(graph.size, dtype=torch.float64) - graph.gamma * s
    rhs = graph.reference.to(torch.float64)
    try:
        solution = torch.linalg.solve(system, rhs)
    except Exception as exc:  # singular factorization
        cond = float(np.linalg.cond(system.detach().numpy()))
        raise SolverError(f"propagation solve failed (condition estimate {cond:.3e})") from exc
    residual = float((system.detach() @ solution.detach() - rhs.detach()).abs().max())
    if not np.isfinite(residual) or residual >= RESIDUAL_BOUND:
        cond = float(np.linalg.cond(system.detach().numpy()))
        raise SolverError(
            f"solve residual {residual:.3e} exceeds {RESIDUAL_BOUND:.0e} "
            f"(condition estimate {cond:.3e})"
        )
    return solution


def softmax_map(scores: torch.Tensor) -> torch.Tensor:
    """Row-stochastic class probabilities from propagated scores."""
    return torch.softmax(scores, dim=-1)


def ce_loss(query_probs: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean over query points of -log probability of the true class.

    Probabilities below 1e-12 are clamped with a warning: a finite-score
    softmax cannot reach exact zero, so hitting the clamp signals upstream
    corruption.
    """
    labels = labels.long()
    if labels.min() < 0 or labels.max() >= query_probs.shape[1]:
        raise InputError(
            f"labels must lie in [0, {query_probs.shape[1]}), got [{labels.min()}, {labels.max()}]"
        )
    picked = query_probs.gather(1, labels.view(-1, 1)).squeeze(1)
    if bool((picked.detach() < 1e-12).any()):
        warnings.warn("clamping true-class probabilities below 1e-12", stacklevel=2)
        picked = picked.clamp_min(1e-12)
    return -torch.log(picked).mean()


def predict(query_probs: torch.Tensor) -> np.ndarray:
    """Argmax class per query row; ties resolve to the lower class id."""
    return np.argmax(query_probs.detach().cpu().numpy(), axis=1).astype(np.int64)


def query_slice(graph: PropagationGraph, matrix: torch.Tensor) -> torch.Tensor:
    """Rows of a node-indexed matrix belonging to query points."""
    return matrix[graph.n_labeled :]


def write_graph(path, graph: PropagationGraph) -> None:
    """Dump the affinity matrix as '<Z> <n_classes>' plus coordinate triplets."""
    w = graph.affinity.detach().cpu().numpy()
    lines = [f"{graph.size} {graph.n_classes}"]
    for i, j in zip(*np.nonzero(w)):
        lines.append(f"{int(i)} {int(j)} {w[i, j]!r}")
    with open(path, "w", encoding="ascii") as fh:
        fh.write("\n".join(lines) + "\n")
