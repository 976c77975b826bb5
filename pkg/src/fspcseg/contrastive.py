"""Point-wise contrastive objective for the self-supervised pretrain phase.

For index-aligned outputs O (original view) and O' (augmented view), each
point's own row in O' is the positive and every other row of O' is a
negative; the loss is the mean over points of the softmax cross-entropy on
the dot-product similarities. Computed with the max-subtraction trick, so it
is finite for any finite inputs.
"""

from __future__ import annotations

import torch
from torch.nn import functional as F

from . import geometry
from .augmentor import deformation_penalty
from .errors import InputError, NonFiniteLossError
from .nnutil import seeded_generator


def pointwise_contrastive_loss(
    orig_out: torch.Tensor, aug_out: torch.Tensor, temperature: float = 1.0
) -> torch.Tensor:
    """Mean over i of -log softmax_j(o_i . o'_j at j = i); rows are points."""
    if orig_out.shape != aug_out.shape:
        raise InputError(
            f"view shapes differ: {tuple(orig_out.shape)} vs {tuple(aug_out.shape)}"
        )
    if orig_out.dim() == 2:
        orig_out = orig_out.unsqueeze(0)
        aug_out = aug_out.unsqueeze(0)
    m = orig_out.shape[1]
    if m < 2:
        raise InputError("need at least 2 points to form negatives")
    if temperature <= 0:
        raise InputError(f"temperature={temperature} must be positive")
    sim = torch.bmm(orig_out, aug_out.transpose(1, 2)) / temperature  # (B, M, M)
    targets = torch.arange(m, device=sim.device).expand(sim.shape[0], m)
    return F.cross_entropy(sim.reshape(-1, m), targets.reshape(-1))


def pretrain_forward(
    encoder,
    head,
    augmentor,
    points: torch.Tensor,
    neighbors: torch.Tensor,
    generator: torch.Generator,
    *,
    feature_space: bool = False,
    temperature: float = 1.0,
):
    """Both views through encoder+head; returns (loss, warp penalty).

    ``points`` is a (B, M, f) batch sharing one neighbour index layout
    (B, M, k). With ``feature_space`` the contrast is computed on encoder
    features instead of classifier logits.
    """
    result = augmentor(points, generator=generator)
    aug_pts = result.augmented
    # The augmented view moved, so its neighbour graph is recomputed on xyz.
    aug_neighbors = torch.stack(
        [
            torch.as_tensor(geometry.knn(aug_pts[b, :, :3].detach().numpy(), neighbors.shape[-1]))
            for b in range(aug_pts.shape[0])
        ]
    )
    feats = encoder(points, neighbors)
    aug_feats = encoder(aug_pts, aug_neighbors)
    if feature_space:
        out, aug_out = feats, aug_feats
    else:
        out, aug_out = head(feats), head(aug_feats)
    loss = pointwise_contrastive_loss(out, aug_out, temperature=temperature)
    penalty = deformation_penalty(points, result.warped)
    return loss, penalty


def pretrain_step(
    encoder,
    head,
    augmentor,
    points: torch.Tensor,
    neighbors: torch.Tensor,
    seed,
    encoder_opt,
    augmentor_opt=None,
    *,
    deform_weight: float = 1.0,
    feature_space: bool = False,
    temperature: float = 1.0,
) -> float:
    """One alternating update; returns the pre-update contrastive loss.

    The encoder and head descend the contrastive loss while the augmentor
    ascends it minus ``deform_weight`` times the warp penalty; both gradients
    are taken at the same pre-update point. ``augmentor_opt=None`` freezes
    the augmentor.
    """
    loss, penalty = pretrain_forward(
        encoder,
        head,
        augmentor,
        points,
        neighbors,
        seeded_generator(seed, 23),
        feature_space=feature_space,
        temperature=temperature,
    )
    loss_value = float(loss.detach())
    if not torch.isfinite(loss):
        raise NonFiniteLossError(
            f"contrastive loss is {loss_value} (seed={seed})", seed=seed, loss=loss_value
        )

    enc_params = [p for group in encoder_opt.param_groups for p in group["params"]]
    enc_grads = torch.autograd.grad(loss, enc_params, retain_graph=augmentor_opt is not None)
    aug_grads = None
    if augmentor_opt is not None:
        aug_params = [p for group in augmentor_opt.param_groups for p in group["params"]]
        adv = deform_weight * penalty - loss  # minimize => ascend loss, bound the warp
        aug_grads = torch.autograd.grad(adv, aug_params, allow_unused=True)

    encoder_opt.zero_grad()
    for p, g in zip(enc_params, enc_grads):
        p.grad = g
    encoder_opt.step()
    if augmentor_opt is not None:
        augmentor_opt.zero_grad()
        for p, g in zip(aug_params, aug_grads):
            p.grad = g if g is not None else torch.zeros_like(p)
        augmentor_opt.step()
    return loss_value
