import numpy as np
import pytest
import torch

from fspcseg.augmentor import PointCloudAugmentor, augment, deformation_penalty
from fspcseg.gradcheck import check_component
from fspcseg.nnutil import seeded_generator

from conftest import random_cloud


@pytest.fixture
def fresh():
    return PointCloudAugmentor(embed_dim=16, noise_dim=4, seed=0)


class TestHeads:
    def test_zero_embedding_with_zero_parameters(self, fresh):
        with torch.no_grad():
            for p in fresh.embed.parameters():
                p.zero_()
        out = fresh.embed_points(torch.randn(1, 16, 3))
        assert torch.equal(out, torch.zeros(1, 16, 16))

    def test_embedding_shape_and_permutation(self, fresh, rng):
        xyz = torch.randn(1, 16, 3)
        emb = fresh.embed_points(xyz)
        assert emb.shape == (1, 16, 16)
        perm = torch.as_tensor(rng.permutation(16))
        assert torch.allclose(fresh.embed_points(xyz[:, perm]), emb[:, perm])

    def test_identity_transform_at_init(self, fresh):
        emb = fresh.embed_points(torch.randn(1, 20, 3))
        noise = torch.randn(1, 4)
        ts = fresh.shape_transform(emb, noise)
        assert torch.allclose(ts.squeeze(0), torch.eye(3))

    def test_transform_deterministic_and_permutation_invariant(self, fresh, rng):
        with torch.no_grad():  # non-trivial head
            fresh.shape_out.weight.normal_(std=0.1, generator=seeded_generator(1))
        xyz = torch.randn(1, 12, 3)
        noise = torch.randn(1, 4)
        a = fresh.shape_transform(fresh.embed_points(xyz), noise)
        b = fresh.shape_transform(fresh.embed_points(xyz), noise)
        assert torch.equal(a, b)
        perm = torch.as_tensor(rng.permutation(12))
        c = fresh.shape_transform(fresh.embed_points(xyz[:, perm]), noise)
        assert torch.allclose(a, c, atol=1e-6)

    def test_zero_displacement_at_init(self, fresh):
        emb = fresh.embed_points(torch.randn(1, 16, 3))
        pooled = emb.max(dim=1).values
        disp = fresh.point_displacement(emb, pooled, torch.randn(1, 4))
        assert torch.equal(disp, torch.zeros(1, 16, 3))
        assert disp.shape == (1, 16, 3)


class TestAugment:
    def test_identity_without_random_layers(self, fresh):
        pts = torch.randn(1, 10, 3)
        result = fresh(pts, generator=seeded_generator(0), apply_random=False)
        assert torch.allclose(result.augmented, pts, atol=1e-6)
        assert torch.allclose(result.warped, pts, atol=1e-6)

    def test_translation_only_is_constant_row(self):
        aug = PointCloudAugmentor(embed_dim=8, noise_dim=2, max_shift=0.1, jitter_sigma=0.0, seed=0)
        pts = torch.randn(1, 12, 3)
        result = aug(pts, generator=seeded_generator(5))
        delta = (result.augmented - pts).squeeze(0)
        assert torch.allclose(delta, delta[0].expand_as(delta), atol=1e-6)
        assert float(delta.detach().abs().max()) <= 0.1 + 1e-6

    def test_seeded_outputs_reproducible(self, fresh, rng):
        cloud = random_cloud(rng, m=14)
        a = augment(fresh, cloud, seed=9)
        b = augment(fresh, cloud, seed=9)
        assert np.array_equal(a.augmented.points, b.augmented.points)

    def test_matches_stepwise_recomputation(self, rng):
        # Independent re-application: embed, warp, displace, then the random
        # layers replayed from the same generator stream.
        aug = PointCloudAugmentor(embed_dim=8, noise_dim=3, max_shift=0.05, jitter_sigma=0.01, seed=2)
        with torch.no_grad():
            aug.shape_out.weight.normal_(std=0.05, generator=seeded_generator(3))
            aug.point_out.weight.normal_(std=0.05, generator=seeded_generator(4))
        pts = torch.randn(1, 9, 3, dtype=torch.float64)
        aug = aug.double()
        result = aug(pts, generator=seeded_generator(7, 19))

        gen = seeded_generator(7, 19)
        noise = torch.randn(1, 6, generator=gen, dtype=torch.float64)
        emb = aug.embed_points(pts)
        ts = aug.shape_transform(emb, noise[:, :3])
        pooled = emb.max(dim=1).values
        disp = aug.point_displacement(emb, pooled, noise[:, 3:])
        warped = pts @ ts.squeeze(0) + disp
        shift = torch.empty(1, 1, 3, dtype=torch.float64).uniform_(-0.05, 0.05, generator=gen)
        jitter = (torch.randn(1, 9, 3, generator=gen, dtype=torch.float64) * 0.01).clamp(-0.03, 0.03)
        expected = warped + shift + jitter
        assert torch.allclose(result.augmented, expected, atol=1e-12)

    def test_extra_channels_copied(self, fresh, rng):
        pts = torch.randn(1, 8, 5)
        result = fresh(pts, generator=seeded_generator(1))
        assert torch.equal(result.augmented[..., 3:], pts[..., 3:])

    def test_row_correspondence_shapes(self, fresh, rng):
        cloud = random_cloud(rng, m=11, channels=4)
        pair = augment(fresh, cloud, seed=0)
        assert pair.augmented.points.shape == pair.original.points.shape


class TestDeformationPenalty:
    def test_identity_is_zero(self, rng):
        pts = torch.randn(6, 3)
        assert float(deformation_penalty(pts, pts)) == 0.0

    def test_unit_translation_is_one(self):
        pts = torch.randn(5, 3)
        moved = pts + torch.tensor([1.0, 0.0, 0.0])
        assert abs(float(deformation_penalty(pts, moved)) - 1.0) < 1e-6

    def test_matches_hand_formula(self, rng):
        a = torch.as_tensor(rng.normal(size=(7, 3)))
        b = torch.as_tensor(rng.normal(size=(7, 3)))
        expected = float(np.mean(np.sum((b.numpy() - a.numpy()) ** 2, axis=1)))
        assert abs(float(deformation_penalty(a, b)) - expected) < 1e-12


def test_gradients_match_finite_differences():
    result = check_component("augmentor")
    assert result.passed, f"max rel error {result.max_rel_error}"
