"""Domain types, procedural synthetic scenes, splits and episode sampling.

Scenes are generated from six surface primitives placed on a ground plane;
class 0 is always the background plane. All generation is a pure function of
the seed, so datasets can be rebuilt bit-identically and scenes may be
generated in parallel across seeds.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import InputError, SamplingError
from .validation import check_labels, check_points, check_positive_int, readonly

# Primitive name -> class id; 0 is reserved for the background plane.
PRIMITIVES = {
    "sphere": 1,
    "cuboid": 2,
    "cylinder": 3,
    "cone": 4,
    "torus": 5,
    "ridge": 6,
}
CLASS_NAMES = {0: "background", **{v: k for k, v in PRIMITIVES.items()}}

DEFAULT_TRAIN_CLASSES = frozenset({1, 2, 3, 4})
DEFAULT_TEST_CLASSES = frozenset({5, 6})


@dataclass(frozen=True)
class PointCloud:
    """An M x f matrix of points; the first three columns are xyz."""

    points: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "points", readonly(check_points(self.points)))

    @property
    def n_points(self) -> int:
        return self.points.shape[0]

    @property
    def n_channels(self) -> int:
        return self.points.shape[1]

    @property
    def xyz(self) -> np.ndarray:
        return self.points[:, :3]


@dataclass(frozen=True)
class LabeledCloud:
    """A point cloud plus one integer label per point (0 = background)."""

    cloud: PointCloud
    labels: np.ndarray

    def __post_init__(self):
        object.__setattr__(
            self, "labels", readonly(check_labels(self.labels, self.cloud.n_points))
        )

    @property
    def n_points(self) -> int:
        return self.cloud.n_points

    def classes_present(self) -> set[int]:
        return set(int(c) for c in np.unique(self.labels))


@dataclass(frozen=True)
class ClassSplit:
    """Disjoint train/test class-id sets."""

    train_classes: frozenset[int]
    test_classes: frozenset[int]

    def __post_init__(self):
        train = frozenset(int(c) for c in self.train_classes)
        test = frozenset(int(c) for c in self.test_classes)
        overlap = train & test
        if overlap:
            raise InputError(f"train/test class sets overlap: {sorted(overlap)}")
        if 0 in train or 0 in test:
            raise InputError("class 0 is the background and belongs to no split")
        object.__setattr__(self, "train_classes", train)
        object.__setattr__(self, "test_classes", test)

    def side(self, use: str) -> frozenset[int]:
        if use == "train":
            return self.train_classes
        if use == "test":
            return self.test_classes
        raise InputError(f"use must be 'train' or 'test', got {use!r}")


DEFAULT_SPLIT = ClassSplit(DEFAULT_TRAIN_CLASSES, DEFAULT_TEST_CLASSES)


@dataclass(frozen=True)
class Episode:
    """One N-way K-shot task: masked support clouds plus labelled queries.

    ``support`` is way-major (way 0 shots first); each support cloud carries a
    binary mask selecting only that way's class. Query labels live in
    {0, ..., way_count} after remapping, with 0 the background.
    """

    support: tuple[LabeledCloud, ...]
    query: tuple[LabeledCloud, ...]
    way_count: int
    shot_count: int
    class_ids: tuple[int, ...] = field(default=())

    def __post_init__(self):
        n, k = self.way_count, self.shot_count
        if len(self.support) != n * k:
            raise InputError(
                f"support must hold way_count*shot_count={n * k} clouds, got {len(self.support)}"
            )
        for sc in self.support:
            if not np.isin(sc.labels, (0, 1)).all():
                raise InputError("support masks must be binary")
            if int(sc.labels.sum()) == 0:
                raise InputError("a support mask selects no points")
        if not self.query:
            raise InputError("episode has no query clouds")
        for qc in self.query:
            if int(qc.labels.max(initial=0)) > n:
                raise InputError(f"query labels must lie in 0..{n}")
        if self.class_ids and len(self.class_ids) != n:
            raise InputError("class_ids must list one original class per way")

    def support_for_way(self, way: int) -> tuple[LabeledCloud, ...]:
        k = self.shot_count
        return self.support[way * k : (way + 1) * k]


def scene_rng(seed) -> np.random.Generator:
    return np.random.default_rng(seed)


def _unit_disk(rng, n):
    ang = rng.uniform(0.0, 2.0 * np.pi, n)
    rad = np.sqrt(rng.uniform(0.0, 1.0, n))
    return rad * np.cos(ang), rad * np.sin(ang)


def _sample_sphere(rng, n, radius):
    v = rng.normal(size=(n, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    pts = v * radius
    pts[:, 2] += radius  # rest on the plane
    return pts


def _sample_cuboid(rng, n, w, d, h):
    # Six faces sampled proportionally to area.
    areas = np.array([w * d, w * d, w * h, w * h, d * h, d * h], dtype=float)
    face = rng.choice(6, size=n, p=areas / areas.sum())
    u = rng.uniform(-0.5, 0.5, n)
    v = rng.uniform(-0.5, 0.5, n)
    pts = np.empty((n, 3))
    for i, f in enumerate(face):
        if f < 2:  # bottom/top
            pts[i] = (u[i] * w, v[i] * d, 0.0 if f == 0 else h)
        elif f < 4:  # front/back
            pts[i] = (u[i] * w, -d / 2 if f == 2 else d / 2, (v[i] + 0.5) * h)
        else:  # left/right
            pts[i] = (-w / 2 if f == 4 else w / 2, u[i] * d, (v[i] + 0.5) * h)
    return pts


def _sample_cylinder(rng, n, radius, height):
    ang = rng.uniform(0.0, 2.0 * np.pi, n)
    z = rng.uniform(0.0, height, n)
    return np.column_stack([radius * np.cos(ang), radius * np.sin(ang), z])


def _sample_cone(rng, n, radius, height):
    # Lateral surface; uniform by area means slant position s ~ sqrt(U).
    ang = rng.uniform(0.0, 2.0 * np.pi, n)
    s = np.sqrt(rng.uniform(0.0, 1.0, n))
    r = radius * s
    z = height * (1.0 - s)
    return np.column_stack([r * np.cos(ang), r * np.sin(ang), z])


def _sample_torus(rng, n, major, minor, arc=1.5 * np.pi):
    # Rejection sampling keeps the density uniform by surface area.
    pts = np.empty((n, 3))
    filled = 0
    while filled < n:
        m = 2 * (n - filled) + 8
        u = rng.uniform(0.0, arc, m)
        v = rng.uniform(0.0, 2.0 * np.pi, m)
        accept = rng.uniform(0.0, 1.0, m) < (major + minor * np.cos(v)) / (major + minor)
        u, v = u[accept], v[accept]
        take = min(len(u), n - filled)
        r = major + minor * np.cos(v[:take])
        pts[filled : filled + take, 0] = r * np.cos(u[:take])
        pts[filled : filled + take, 1] = r * np.sin(u[:take])
        pts[filled : filled + take, 2] = minor * np.sin(v[:take]) + minor
        filled += take
    return pts


def _sample_ridge(rng, n, width, span, height):
    # Tent: two rectangles of equal area meeting at an apex line along x.
    side = rng.integers(0, 2, n)
    x = rng.uniform(-width / 2, width / 2, n)
    t = rng.uniform(0.0, 1.0, n)  # 0 at eaves, 1 at apex
    y = np.where(side == 0, -(1.0 - t) * span, (1.0 - t) * span)
    z = t * height
    return np.column_stack([x, y, z])


def _sample_primitive(rng, name, n):
    if name == "sphere":
        return _sample_sphere(rng, n, radius=rng.uniform(0.14, 0.2))
    if name == "cuboid":
        return _sample_cuboid(
            rng, n, w=rng.uniform(0.25, 0.4), d=rng.uniform(0.25, 0.4), h=rng.uniform(0.2, 0.35)
        )
    if name == "cylinder":
        return _sample_cylinder(rng, n, radius=rng.uniform(0.1, 0.16), height=rng.uniform(0.4, 0.6))
    if name == "cone":
        return _sample_cone(rng, n, radius=rng.uniform(0.16, 0.24), height=rng.uniform(0.35, 0.55))
    if name == "torus":
        return _sample_torus(rng, n, major=rng.uniform(0.18, 0.26), minor=rng.uniform(0.05, 0.08))
    if name == "ridge":
        return _sample_ridge(
            rng, n, width=rng.uniform(0.35, 0.55), span=rng.uniform(0.15, 0.25), height=rng.uniform(0.25, 0.4)
        )
    raise InputError(f"unknown primitive id {name!r}")


def _resolve_pool(class_pool) -> list[str]:
    """Accept primitive names or class ids; return canonical names."""
    id_to_name = {v: k for k, v in PRIMITIVES.items()}
    pool = []
    for entry in class_pool:
        if isinstance(entry, str):
            if entry not in PRIMITIVES:
                raise InputError(f"unknown primitive id {entry!r}")
            pool.append(entry)
        elif int(entry) in id_to_name:
            pool.append(id_to_name[int(entry)])
        else:
            raise InputError(f"unknown primitive id {entry!r}")
    return pool


def generate_scene(
    seed,
    class_pool: Sequence = tuple(PRIMITIVES),
    points_per_object: int = 256,
    background_points: int = 512,
    *,
    min_objects: int = 1,
    max_objects: int = 3,
    centroid_margin: float = 0.6,
    geom_noise: float = 0.005,
    plane_extent: float = 2.0,
) -> LabeledCloud:
    """Build one synthetic scene: a ground plane plus 1-3 surface primitives.

    Identical arguments (including the seed) produce a bit-identical scene.
    Foreground objects are placed with pairwise centroid distance at least
    ``centroid_margin``; every point receives additive normal noise of scale
    ``geom_noise``.
    """
    pool = _resolve_pool(class_pool)
    if not pool:
        raise InputError("class_pool must not be empty")
    check_positive_int(points_per_object, "points_per_object")
    check_positive_int(background_points, "background_points")
    if not 1 <= min_objects <= max_objects:
        raise InputError("need 1 <= min_objects <= max_objects")

    rng = scene_rng(seed)
    n_objects = int(rng.integers(min_objects, max_objects + 1))
    names = [pool[int(i)] for i in rng.integers(0, len(pool), n_objects)]

    # Rejection-sample xy anchors until all pairwise distances clear the margin.
    half = plane_extent / 2.0 - 0.35
    for _ in range(1000):
        anchors = rng.uniform(-half, half, size=(n_objects, 2))
        if n_objects == 1:
            break
        d = np.linalg.norm(anchors[:, None, :] - anchors[None, :, :], axis=-1)
        if d[np.triu_indices(n_objects, 1)].min() >= centroid_margin:
            break
    else:
        raise SamplingError(
            f"could not place {n_objects} objects with margin {centroid_margin}"
        )

    bx, by = rng.uniform(-plane_extent / 2, plane_extent / 2, (2, background_points))
    chunks = [np.column_stack([bx, by, np.zeros(background_points)])]
    labels = [np.zeros(background_points, dtype=np.int32)]
    for name, anchor in zip(names, anchors):
        pts = _sample_primitive(rng, name, points_per_object)
        # Anchor the xy point centroid so the margin bounds centroid distances.
        pts[:, :2] -= pts[:, :2].mean(axis=0)
        pts[:, 0] += anchor[0]
        pts[:, 1] += anchor[1]
        chunks.append(pts)
        labels.append(np.full(points_per_object, PRIMITIVES[name], dtype=np.int32))

    points = np.concatenate(chunks, axis=0)
    points += rng.normal(scale=geom_noise, size=points.shape)
    return LabeledCloud(PointCloud(points.astype(np.float32)), np.concatenate(labels))


def generate_dataset(
    seed,
    n_scenes: int,
    class_pool: Sequence = tuple(PRIMITIVES),
    **scene_kwargs,
) -> list[LabeledCloud]:
    """Generate ``n_scenes`` scenes with per-scene seeds derived from ``seed``."""
    check_positive_int(n_scenes, "n_scenes")
    return [
        generate_scene([seed, i], class_pool, **scene_kwargs) for i in range(n_scenes)
    ]


def normalize_cloud(cloud: PointCloud) -> PointCloud:
    """Zero-center xyz at the bounding-box center and scale the box to unit size.

    Applied once before encoding; extra channels pass through unchanged.
    """
    pts = np.array(cloud.points, dtype=np.float32, copy=True)
    xyz = pts[:, :3]
    lo, hi = xyz.min(axis=0), xyz.max(axis=0)
    scale = float((hi - lo).max())
    if scale <= 0.0:
        scale = 1.0
    pts[:, :3] = (xyz - (lo + hi) / 2.0) / scale
    return PointCloud(pts)


def clouds_with_class(dataset: Sequence[LabeledCloud], class_id: int, min_points: int = 1):
    return [
        i
        for i, lc in enumerate(dataset)
        if int((lc.labels == class_id).sum()) >= min_points
    ]


def sample_episode(
    dataset: Sequence[LabeledCloud],
    split: ClassSplit,
    ways: int,
    shots: int,
    query_count: int,
    seed,
    *,
    use: str = "train",
    classes: Sequence[int] | None = None,
    min_class_points: int = 1,
) -> Episode:
    """Sample one N-way K-shot episode from the chosen side of the split.

    ``query_count`` query clouds are drawn per way; support and query clouds
    are disjoint. Episode classes are remapped to 1..N in sampled order and
    every other label becomes background 0.
    """
    ways = check_positive_int(ways, "ways")
    shots = check_positive_int(shots, "shots")
    query_count = check_positive_int(query_count, "query_count")
    side = split.side(use)
    rng = scene_rng(seed)

    need = shots + query_count
    eligible = {
        c: clouds_with_class(dataset, c, min_class_points)
        for c in sorted(side)
    }
    if classes is not None:
        classes = [int(c) for c in classes]
        if len(classes) != ways:
            raise SamplingError(f"requested {len(classes)} classes for {ways} ways")
        for c in classes:
            if c not in side:
                raise SamplingError(f"class {c} is not in the {use} split")
            if len(eligible[c]) < need:
                raise SamplingError(
                    f"class {c} has only {len(eligible[c])} clouds, needs {need}"
                )
        chosen = [int(c) for c in rng.permutation(classes)]
    else:
        usable = [c for c in sorted(side) if len(eligible[c]) >= need]
        if len(usable) < ways:
            short = [c for c in sorted(side) if len(eligible[c]) < need]
            raise SamplingError(
                f"class {short[0]} has only {len(eligible[short[0]])} clouds, needs {need}"
                if short
                else f"split has {len(usable)} usable classes, needs {ways}"
            )
        chosen = [usable[int(i)] for i in rng.choice(len(usable), ways, replace=False)]

    remap = {c: i + 1 for i, c in enumerate(chosen)}
    taken: set[int] = set()
    support: list[LabeledCloud] = []
    query_idx: list[int] = []
    for c in chosen:
        free = [i for i in eligible[c] if i not in taken]
        if len(free) < need:
            raise SamplingError(f"class {c} has only {len(free)} free clouds, needs {need}")
        picks = [free[int(j)] for j in rng.choice(len(free), need, replace=False)]
        taken.update(picks)
        for i in picks[:shots]:
            lc = dataset[i]
            support.append(LabeledCloud(lc.cloud, (lc.labels == c).astype(np.int32)))
        query_idx.extend(picks[shots:])

    query = []
    for i in query_idx:
        lc = dataset[i]
        q_labels = np.zeros(lc.n_points, dtype=np.int32)
        for c, way_label in remap.items():
            q_labels[lc.labels == c] = way_label
        query.append(LabeledCloud(lc.cloud, q_labels))

    return Episode(
        support=tuple(support),
        query=tuple(query),
        way_count=ways,
        shot_count=shots,
        class_ids=tuple(chosen),
    )
