import numpy as np
import pytest
import torch

from fspcseg.data import PointCloud
from fspcseg.encoder import ClassifierHead, PointEncoder, classify, cloud_neighbors, encode
from fspcseg.errors import ConfigurationError, InputError
from fspcseg.gradcheck import check_component

from conftest import random_cloud


class TestEncode:
    def test_output_shape_and_finite(self, rng):
        cloud = random_cloud(rng, m=64)
        enc = PointEncoder(feature_dim=32, hidden_dim=16)
        feats = encode(enc, cloud, 8)
        assert feats.shape == (64, 32)
        assert torch.isfinite(feats).all()

    def test_deterministic(self, rng):
        cloud = random_cloud(rng, m=32)
        enc = PointEncoder(seed=3)
        a = encode(enc, cloud, 6)
        b = encode(enc, cloud, 6)
        assert torch.equal(a, b)

    def test_k_too_large_rejected(self, rng):
        cloud = random_cloud(rng, m=16)
        with pytest.raises(InputError):
            encode(PointEncoder(), cloud, 16)

    def test_channel_mismatch_is_configuration_error(self, rng):
        cloud = random_cloud(rng, m=16, channels=4)
        with pytest.raises(ConfigurationError):
            encode(PointEncoder(in_channels=3), cloud, 4)

    def test_permutation_equivariance(self, rng):
        cloud = random_cloud(rng, m=24)
        enc = PointEncoder(hidden_dim=16, feature_dim=8).double()
        perm = rng.permutation(24)
        permuted = PointCloud(np.asarray(cloud.points)[perm])
        base = encode(enc, cloud, 5).detach().numpy()
        out = encode(enc, permuted, 5).detach().numpy()
        assert np.allclose(out, base[perm], atol=1e-12)

    def test_translation_invariance_with_relative_edges(self, rng):
        enc = PointEncoder(edge_relative_only=True, hidden_dim=16, feature_dim=8).double()
        cloud = random_cloud(rng, m=20)
        moved = PointCloud(np.asarray(cloud.points) + np.array([5.0, -3.0, 2.0], dtype=np.float32))
        a = encode(enc, cloud, 4).detach().numpy()
        b = encode(enc, moved, 4).detach().numpy()
        assert np.allclose(a, b, atol=1e-5)

    def test_translation_changes_default_features(self, rng):
        enc = PointEncoder(hidden_dim=16, feature_dim=8)
        cloud = random_cloud(rng, m=20)
        moved = PointCloud(np.asarray(cloud.points) + np.float32(4.0))
        a = encode(enc, cloud, 4).detach().numpy()
        b = encode(enc, moved, 4).detach().numpy()
        assert not np.allclose(a, b, atol=1e-4)


class TestClassify:
    def test_zero_head_gives_zero_logits(self, rng):
        head = ClassifierHead(8, 5)
        with torch.no_grad():
            head.linear.weight.zero_()
            head.linear.bias.zero_()
        logits = classify(head, torch.randn(10, 8))
        assert torch.equal(logits, torch.zeros(10, 5))

    def test_identity_like_head(self):
        head = ClassifierHead(4, 4)
        with torch.no_grad():
            head.linear.weight.copy_(torch.eye(4))
            head.linear.bias.zero_()
        x = torch.randn(6, 4)
        assert torch.allclose(classify(head, x), x)

    def test_shape_contract(self, rng):
        head = ClassifierHead(64, 6)
        out = classify(head, torch.randn(64, 64))
        assert out.shape == (64, 6)
        assert torch.isfinite(out).all()

    def test_width_mismatch_rejected(self):
        head = ClassifierHead(8, 3)
        with pytest.raises(ConfigurationError):
            classify(head, torch.randn(4, 9))


def test_initialization_bounds():
    enc = PointEncoder(seed=0)
    for name, p in enc.named_parameters():
        if name.endswith("bias"):
            assert torch.equal(p, torch.zeros_like(p))
        else:
            fan_out, fan_in = p.shape
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            assert float(p.detach().abs().max()) <= bound


def test_neighbors_tensor_shape(rng):
    cloud = random_cloud(rng, m=12)
    nbr = cloud_neighbors(cloud, 3)
    assert nbr.shape == (1, 12, 3)


def test_gradients_match_finite_differences():
    result = check_component("encoder")
    assert result.passed, f"max rel error {result.max_rel_error}"
