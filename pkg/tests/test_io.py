import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fspcseg.data import LabeledCloud, PointCloud
from fspcseg.errors import BadHeaderError, LabelMismatchError, TruncatedPayloadError
from fspcseg.io import export_ply, load_archive, load_cloud, save_archive, save_cloud

from conftest import random_cloud


class TestCloudRoundTrip:
    def test_labeled_round_trip_binary_equal(self, rng, tmp_path):
        cloud = random_cloud(rng, m=40, channels=5)
        lc = LabeledCloud(cloud, rng.integers(0, 4, size=40).astype(np.int32))
        path = tmp_path / "c.fspc"
        save_cloud(path, lc)
        back = load_cloud(path)
        assert np.array_equal(back.cloud.points, lc.cloud.points)
        assert back.cloud.points.dtype == np.float32
        assert np.array_equal(back.labels, lc.labels)

    def test_unlabeled_round_trip(self, rng, tmp_path):
        cloud = random_cloud(rng, m=7)
        path = tmp_path / "c.fspc"
        save_cloud(path, cloud)
        back = load_cloud(path)
        assert isinstance(back, PointCloud)
        assert np.array_equal(back.points, cloud.points)

    def test_unknown_magic_rejected(self, tmp_path):
        path = tmp_path / "bad.fspc"
        path.write_bytes(b"NOPE1 3 3 0\n" + b"\x00" * 36)
        with pytest.raises(BadHeaderError):
            load_cloud(path)

    def test_malformed_header_values(self, tmp_path):
        path = tmp_path / "bad.fspc"
        path.write_bytes(b"FSPC1 x 3 0\n")
        with pytest.raises(BadHeaderError):
            load_cloud(path)
        path.write_bytes(b"FSPC1 3 3 7\n")
        with pytest.raises(BadHeaderError):
            load_cloud(path)

    def test_truncated_points_detected(self, rng, tmp_path):
        path = tmp_path / "c.fspc"
        save_cloud(path, random_cloud(rng, m=4))
        data = path.read_bytes()
        path.write_bytes(data[: len(data) - 12])  # drop one point
        with pytest.raises(TruncatedPayloadError):
            load_cloud(path)

    def test_declared_4_points_stored_3(self, tmp_path):
        payload = np.zeros((3, 3), dtype="<f4").tobytes()
        path = tmp_path / "c.fspc"
        path.write_bytes(b"FSPC1 4 3 0\n" + payload)
        with pytest.raises(TruncatedPayloadError):
            load_cloud(path)

    def test_missing_labels_detected(self, rng, tmp_path):
        lc = LabeledCloud(random_cloud(rng, m=4), np.ones(4, dtype=np.int32))
        path = tmp_path / "c.fspc"
        save_cloud(path, lc)
        data = path.read_bytes()
        path.write_bytes(data[:-8])  # drop two labels
        with pytest.raises(LabelMismatchError):
            load_cloud(path)

    def test_trailing_garbage_detected(self, rng, tmp_path):
        path = tmp_path / "c.fspc"
        save_cloud(path, random_cloud(rng, m=4))
        path.write_bytes(path.read_bytes() + b"xx")
        with pytest.raises(LabelMismatchError):
            load_cloud(path)


@settings(max_examples=15, deadline=None)
@given(m=st.integers(1, 30), f=st.integers(3, 6), seed=st.integers(0, 2**16))
def test_round_trip_property(tmp_path_factory, m, f, seed):
    rng = np.random.default_rng(seed)
    lc = LabeledCloud(
        PointCloud(rng.normal(size=(m, f)).astype(np.float32)),
        rng.integers(0, 6, size=m).astype(np.int32),
    )
    path = tmp_path_factory.mktemp("rt") / "c.fspc"
    save_cloud(path, lc)
    back = load_cloud(path)
    assert np.array_equal(back.cloud.points, lc.cloud.points)
    assert np.array_equal(back.labels, lc.labels)


class TestPly:
    def test_header_and_row_count(self, rng, tmp_path):
        cloud = random_cloud(rng, m=5)
        path = tmp_path / "out.ply"
        export_ply(path, cloud, np.array([0, 1, 2, 1, 0]))
        lines = path.read_text().splitlines()
        assert lines[0] == "ply"
        assert "element vertex 5" in lines
        body = lines[lines.index("end_header") + 1 :]
        assert len(body) == 5
        assert all(len(row.split()) == 6 for row in body)

    def test_label_length_checked(self, rng, tmp_path):
        with pytest.raises(Exception):
            export_ply(tmp_path / "x.ply", random_cloud(rng, m=5), np.zeros(4, dtype=int))


class TestArchive:
    def test_round_trip_arrays_and_manifest(self, rng, tmp_path):
        arrays = {
            "encoder/w": rng.normal(size=(3, 4)),
            "encoder/b": rng.normal(size=(4,)),
        }
        manifest = {"feature_dim": 4, "encoder_layers": 2}
        path = tmp_path / "p.ckpt"
        save_archive(path, arrays, manifest)
        back, mf = load_archive(path)
        assert set(back) == set(arrays)
        for k in arrays:
            assert back[k].dtype == np.float64
            assert np.array_equal(back[k], arrays[k])
        assert mf["feature_dim"] == "4"

    def test_missing_manifest_rejected(self, tmp_path):
        import zipfile

        path = tmp_path / "bad.ckpt"
        with zipfile.ZipFile(path, "w") as zf:
            zf.writestr("w.npy", b"junk")
        with pytest.raises(BadHeaderError):
            load_archive(path)
