"""File formats: FSPC1 clouds, ascii PLY exports and parameter archives.

FSPC1 layout: one ascii header line ``FSPC1 <M> <f> <has_labels:0|1>\\n``
followed by M*f little-endian float32 point values and, when labelled,
M little-endian int32 labels.

Parameter archives are zip files holding one shape-tagged ``.npy`` entry
(little-endian float64) per named array plus a one-line ``manifest.txt``.
"""

from __future__ import annotations

import io as _io
import zipfile
from pathlib import Path

import numpy as np

from .data import LabeledCloud, PointCloud
from .errors import BadHeaderError, InputError, LabelMismatchError, TruncatedPayloadError

MAGIC = "FSPC1"

# One fixed color per class id for PLY exports; cycles past the palette end.
CLASS_COLORS = np.array(
    [
        (128, 128, 128),  # background: grey
        (228, 26, 28),
        (55, 126, 184),
        (77, 175, 74),
        (152, 78, 163),
        (255, 127, 0),
        (255, 217, 47),
        (166, 86, 40),
    ],
    dtype=np.uint8,
)


def save_cloud(path, item: LabeledCloud | PointCloud) -> None:
    if isinstance(item, LabeledCloud):
        cloud, labels = item.cloud, item.labels
    else:
        cloud, labels = item, None
    m, f = cloud.points.shape
    header = f"{MAGIC} {m} {f} {0 if labels is None else 1}\n"
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(np.ascontiguousarray(cloud.points, dtype="<f4").tobytes())
        if labels is not None:
            fh.write(np.ascontiguousarray(labels, dtype="<i4").tobytes())


def load_cloud(path) -> LabeledCloud | PointCloud:
    with open(path, "rb") as fh:
        header = fh.readline()
        try:
            text = header.decode("ascii").strip()
        except UnicodeDecodeError as exc:
            raise BadHeaderError(f"{path}: header is not ascii") from exc
        parts = text.split()
        if len(parts) != 4 or parts[0] != MAGIC:
            raise BadHeaderError(f"{path}: expected '{MAGIC} M f has_labels', got {text!r}")
        try:
            m, f, has_labels = int(parts[1]), int(parts[2]), int(parts[3])
        except ValueError as exc:
            raise BadHeaderError(f"{path}: non-integer header fields in {text!r}") from exc
        if m < 1 or f < 3 or has_labels not in (0, 1):
            raise BadHeaderError(f"{path}: invalid header values {text!r}")

        payload = fh.read(4 * m * f)
        if len(payload) != 4 * m * f:
            raise TruncatedPayloadError(
                f"{path}: declared {m} points x {f} channels, payload holds "
                f"{len(payload) // (4 * f)} complete points"
            )
        points = np.frombuffer(payload, dtype="<f4").reshape(m, f).copy()
        if not has_labels:
            if fh.read(1):
                raise LabelMismatchError(f"{path}: trailing bytes after unlabelled payload")
            return PointCloud(points)

        raw = fh.read(4 * m)
        if len(raw) != 4 * m:
            raise LabelMismatchError(
                f"{path}: declared {m} labels, found {len(raw) // 4}"
            )
        if fh.read(1):
            raise LabelMismatchError(f"{path}: trailing bytes after label block")
        labels = np.frombuffer(raw, dtype="<i4").copy()
    return LabeledCloud(PointCloud(points), labels)


def export_ply(path, cloud: PointCloud, labels) -> None:
    """Write an ascii PLY of xyz plus a per-class uchar RGB color."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (cloud.n_points,):
        raise InputError(
            f"labels shape {labels.shape} does not match cloud with {cloud.n_points} points"
        )
    colors = CLASS_COLORS[labels % len(CLASS_COLORS)]
    lines = [
        "ply",
        "format ascii 1.0",
        f"element vertex {cloud.n_points}",
        "property float x",
        "property float y",
        "property float z",
        "property uchar red",
        "property uchar green",
        "property uchar blue",
        "end_header",
    ]
    xyz = cloud.xyz
    for i in range(cloud.n_points):
        x, y, z = (float(v) for v in xyz[i])
        r, g, b = (int(v) for v in colors[i])
        lines.append(f"{x} {y} {z} {r} {g} {b}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="ascii")


def save_archive(path, arrays: dict[str, np.ndarray], manifest: dict) -> None:
    """Save named arrays as float64 .npy entries plus a one-line manifest."""
    manifest_line = " ".join(f"{k}={manifest[k]}" for k in sorted(manifest))
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        zf.writestr("manifest.txt", manifest_line + "\n")
        for name in sorted(arrays):
            buf = _io.BytesIO()
            np.save(buf, np.ascontiguousarray(arrays[name], dtype="<f8"))
            zf.writestr(name + ".npy", buf.getvalue())


def load_archive(path) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    arrays: dict[str, np.ndarray] = {}
    with zipfile.ZipFile(path, "r") as zf:
        names = zf.namelist()
        if "manifest.txt" not in names:
            raise BadHeaderError(f"{path}: archive has no manifest.txt")
        line = zf.read("manifest.txt").decode("ascii").strip()
        manifest = dict(kv.split("=", 1) for kv in line.split()) if line else {}
        for name in names:
            if name == "manifest.txt":
                continue
            if not name.endswith(".npy"):
                raise BadHeaderError(f"{path}: unexpected archive entry {name!r}")
            arrays[name[: -len(".npy")]] = np.load(_io.BytesIO(zf.read(name)))
    return arrays, manifest
