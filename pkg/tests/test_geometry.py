import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fspcseg import geometry
from fspcseg.errors import InputError

from conftest import random_cloud


def brute_force_knn(coords, k):
    """All-pairs distances, full sort by (distance, index), self excluded."""
    coords = np.asarray(coords, dtype=np.float64)
    m = coords.shape[0]
    out = np.empty((m, k), dtype=np.int64)
    for i in range(m):
        d = np.array([np.sum((coords[j] - coords[i]) ** 2) for j in range(m)])
        order = sorted((dist, j) for j, dist in enumerate(d) if j != i)
        out[i] = [j for _, j in order[:k]]
    return out


def brute_force_fps(coords, count, start):
    """Greedy max-min selection, re-scanning all candidates every round."""
    coords = np.asarray(coords, dtype=np.float64)
    m = coords.shape[0]
    chosen = [start]
    for _ in range(count - 1):
        best, best_d = None, -1.0
        for j in range(m):
            if j in chosen:
                continue
            d = min(np.sum((coords[j] - coords[s]) ** 2) for s in chosen)
            if d > best_d:
                best, best_d = j, d
        chosen.append(best)
    return np.array(chosen, dtype=np.int64)


class TestKnn:
    def test_colinear_forced_neighbours(self):
        pts = np.array([[0, 0, 0], [1, 0, 0], [2, 0, 0], [10, 0, 0]], dtype=np.float32)
        assert geometry.knn(pts, 1).ravel().tolist() == [1, 0, 1, 2]

    def test_full_k_is_permutation_of_others(self, rng):
        cloud = random_cloud(rng, m=17)
        idx = geometry.knn(cloud, 16)
        for i in range(17):
            assert sorted(idx[i].tolist()) == sorted(set(range(17)) - {i})

    def test_matches_brute_force(self, rng):
        cloud = random_cloud(rng, m=128)
        assert np.array_equal(geometry.knn(cloud, 8), brute_force_knn(cloud.xyz, 8))

    def test_k_out_of_range(self, rng):
        cloud = random_cloud(rng, m=8)
        with pytest.raises(InputError):
            geometry.knn(cloud, 8)
        with pytest.raises(InputError):
            geometry.knn(cloud, 0)

    def test_tie_broken_by_lower_index(self):
        # Points 1 and 2 are equidistant from point 0.
        pts = np.array([[0, 0, 0], [1, 0, 0], [-1, 0, 0], [5, 0, 0]], dtype=np.float32)
        assert geometry.knn(pts, 2)[0].tolist() == [1, 2]


class TestFps:
    def test_extremes_forced(self):
        pts = np.array([[0, 0, 0], [1, 0, 0], [2, 0, 0], [10, 0, 0]], dtype=np.float32)
        assert set(geometry.fps(pts, 2, start=0).tolist()) == {0, 3}

    def test_count_equals_m_is_permutation(self, rng):
        cloud = random_cloud(rng, m=20)
        assert sorted(geometry.fps(cloud, 20).tolist()) == list(range(20))

    def test_matches_brute_force(self, rng):
        cloud = random_cloud(rng, m=64)
        got = geometry.fps(cloud, 16, start=3)
        assert np.array_equal(got, brute_force_fps(cloud.xyz, 16, start=3))

    def test_count_out_of_range(self, rng):
        cloud = random_cloud(rng, m=8)
        with pytest.raises(InputError):
            geometry.fps(cloud, 9)
        with pytest.raises(InputError):
            geometry.fps(cloud, 1, start=8)

    def test_maxmin_radius_nonincreasing(self, rng):
        coords = np.asarray(random_cloud(rng, m=48).xyz, dtype=np.float64)

        def radius(count):
            sel = coords[geometry.fps(coords, count)]
            d = np.linalg.norm(coords[:, None, :] - sel[None, :, :], axis=-1)
            return d.min(axis=1).max()

        radii = [radius(c) for c in range(1, 20)]
        assert all(a >= b - 1e-12 for a, b in zip(radii, radii[1:]))


class TestFpsRatio:
    def test_rounding_rule(self):
        assert geometry.fps_count(10, 0.4) == 4
        assert geometry.fps_count(1024, 0.4) == 410
        assert geometry.fps_count(3, 0.01) == 1

    def test_ratio_one_selects_all(self, rng):
        cloud = random_cloud(rng, m=12)
        assert sorted(geometry.fps_ratio(cloud, 1.0).tolist()) == list(range(12))

    @pytest.mark.parametrize("ratio", [0.0, -0.2, 1.2])
    def test_ratio_rejected(self, rng, ratio):
        with pytest.raises(InputError):
            geometry.fps_ratio(random_cloud(rng, m=10), ratio)


@settings(max_examples=20, deadline=None)
@given(shift=st.tuples(*[st.floats(-50, 50, allow_nan=False) for _ in range(3)]), seed=st.integers(0, 2**16))
def test_rigid_translation_invariance(shift, seed):
    rng = np.random.default_rng(seed)
    coords = rng.uniform(-1, 1, size=(24, 3))
    moved = coords + np.asarray(shift)
    assert np.array_equal(geometry.knn(coords, 5), geometry.knn(moved, 5))
    assert np.array_equal(geometry.fps(coords, 7, start=2), geometry.fps(moved, 7, start=2))
