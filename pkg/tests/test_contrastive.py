import math

import numpy as np
import pytest
import torch

from fspcseg import geometry
from fspcseg.augmentor import PointCloudAugmentor
from fspcseg.contrastive import pointwise_contrastive_loss, pretrain_step
from fspcseg.encoder import ClassifierHead, PointEncoder
from fspcseg.errors import InputError
from fspcseg.gradcheck import check_component


def naive_loss(orig, aug):
    """Double-loop evaluation of the point-wise softmax cross entropy."""
    orig = np.asarray(orig, dtype=np.float64)
    aug = np.asarray(aug, dtype=np.float64)
    m = orig.shape[0]
    total = 0.0
    for i in range(m):
        logits = np.array([orig[i] @ aug[j] for j in range(m)])
        shifted = logits - logits.max()
        total += -(shifted[i] - math.log(np.exp(shifted).sum()))
    return total / m


class TestPointwiseContrastiveLoss:
    def test_identical_rows_give_log_m(self):
        row = torch.tensor([0.3, -1.2, 0.7])
        out = row.expand(6, 3)
        loss = pointwise_contrastive_loss(out, out.clone())
        assert abs(float(loss) - math.log(6)) < 1e-6

    def test_saturated_diagonal_near_zero(self):
        orig = torch.tensor([[10.0, 0.0], [0.0, 10.0]], dtype=torch.float64)
        loss = pointwise_contrastive_loss(orig, orig.clone())
        # diagonal dominates by e^100 : loss collapses to ~3.7e-44
        assert float(loss) < 1e-12
        assert float(loss) >= 0.0

    def test_matches_naive_double_loop(self, rng):
        orig = torch.tensor(rng.normal(size=(8, 4)))
        aug = torch.tensor(rng.normal(size=(8, 4)))
        loss = float(pointwise_contrastive_loss(orig, aug))
        assert abs(loss - naive_loss(orig, aug)) < 1e-12

    def test_finite_for_huge_logits(self):
        orig = torch.full((4, 3), 500.0, dtype=torch.float64)
        assert math.isfinite(float(pointwise_contrastive_loss(orig, orig.clone())))

    def test_single_point_rejected(self):
        with pytest.raises(InputError):
            pointwise_contrastive_loss(torch.ones(1, 3), torch.ones(1, 3))

    def test_shape_mismatch_rejected(self):
        with pytest.raises(InputError):
            pointwise_contrastive_loss(torch.ones(3, 2), torch.ones(4, 2))

    def test_row_permutation_invariance(self, rng):
        orig = torch.tensor(rng.normal(size=(10, 5)))
        aug = torch.tensor(rng.normal(size=(10, 5)))
        perm = torch.as_tensor(rng.permutation(10))
        a = float(pointwise_contrastive_loss(orig, aug))
        b = float(pointwise_contrastive_loss(orig[perm], aug[perm]))
        assert abs(a - b) < 1e-10

    def test_positive_scaling_preserves_argmax(self, rng):
        orig = torch.tensor(rng.normal(size=(6, 4)))
        aug = torch.tensor(rng.normal(size=(6, 4)))
        sims = orig @ aug.T
        scaled = orig @ (2.5 * aug).T
        assert torch.equal(sims.argmax(dim=1), scaled.argmax(dim=1))

    def test_temperature_scales_logits(self, rng):
        orig = torch.tensor(rng.normal(size=(5, 3)))
        aug = torch.tensor(rng.normal(size=(5, 3)))
        a = float(pointwise_contrastive_loss(orig, aug, temperature=2.0))
        b = float(pointwise_contrastive_loss(orig / 2.0, aug))
        assert abs(a - b) < 1e-10


def _tiny_setup(seed=0, m=24, n_clouds=2):
    rng = np.random.default_rng(seed)
    pts = torch.tensor(rng.uniform(-1, 1, size=(n_clouds, m, 3)), dtype=torch.float32)
    nbr = torch.stack(
        [torch.as_tensor(geometry.knn(pts[b].numpy(), 4)) for b in range(n_clouds)]
    )
    encoder = PointEncoder(hidden_dim=8, feature_dim=8, seed=seed)
    head = ClassifierHead(8, 5, seed=seed)
    augmentor = PointCloudAugmentor(embed_dim=8, noise_dim=2, seed=seed)
    return encoder, head, augmentor, pts, nbr


class TestPretrainStep:
    def test_zero_learning_rates_leave_params_unchanged(self):
        encoder, head, augmentor, pts, nbr = _tiny_setup()
        before = [p.detach().clone() for p in encoder.parameters()]
        before_aug = [p.detach().clone() for p in augmentor.parameters()]
        enc_opt = torch.optim.Adam(list(encoder.parameters()) + list(head.parameters()), lr=0.0)
        aug_opt = torch.optim.Adam(augmentor.parameters(), lr=0.0)
        loss = pretrain_step(encoder, head, augmentor, pts, nbr, 0, enc_opt, aug_opt)
        assert math.isfinite(loss)
        for p, q in zip(encoder.parameters(), before):
            assert torch.equal(p.detach(), q)
        for p, q in zip(augmentor.parameters(), before_aug):
            assert torch.equal(p.detach(), q)

    def test_frozen_augmentor_params_unchanged(self):
        encoder, head, augmentor, pts, nbr = _tiny_setup()
        before = [p.detach().clone() for p in augmentor.parameters()]
        enc_opt = torch.optim.Adam(list(encoder.parameters()) + list(head.parameters()), lr=1e-3)
        pretrain_step(encoder, head, augmentor, pts, nbr, 0, enc_opt, augmentor_opt=None)
        for p, q in zip(augmentor.parameters(), before):
            assert torch.equal(p.detach(), q)

    def test_encoder_step_changes_params(self):
        encoder, head, augmentor, pts, nbr = _tiny_setup()
        before = [p.detach().clone() for p in encoder.parameters()]
        enc_opt = torch.optim.Adam(list(encoder.parameters()) + list(head.parameters()), lr=1e-2)
        pretrain_step(encoder, head, augmentor, pts, nbr, 0, enc_opt)
        assert any(not torch.equal(p.detach(), q) for p, q in zip(encoder.parameters(), before))

    def test_loss_decreases_over_training(self):
        # Smoke run: after a few hundred alternating steps the contrastive
        # loss must sit strictly below its first value.
        encoder, head, augmentor, pts, nbr = _tiny_setup(seed=3, m=24, n_clouds=4)
        enc_opt = torch.optim.Adam(list(encoder.parameters()) + list(head.parameters()), lr=1e-3)
        aug_opt = torch.optim.Adam(augmentor.parameters(), lr=1e-3)
        losses = [
            pretrain_step(encoder, head, augmentor, pts, nbr, it, enc_opt, aug_opt)
            for it in range(200)
        ]
        assert losses[-1] < losses[0]


def test_gradients_match_finite_differences():
    result = check_component("contrastive")
    assert result.passed, f"max rel error {result.max_rel_error}"
