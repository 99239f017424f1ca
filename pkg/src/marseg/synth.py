"""Deterministic synthetic LiDAR sequences with velocity-derived motion labels.

Objects are axis-aligned boxes translating in the xy-plane. Each frame samples
the ground plane and the box faces visible from the sensor, then expresses the
points in the sensor frame. Output coordinates and intensities are rounded to
float32 so that a dataset round trip is bitwise exact.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .align import Pose, invert_pose
from .core import DEFAULT_TAXONOMY, ClassTaxonomy, ConfigError, MarsegError, PointCloud, compose_label

DEFAULT_MOTION_THRESHOLD = 0.5

# per-class reflectance ranges, keyed by class name
INTENSITY_RANGES = {
    "car": (0.55, 0.70),
    "pedestrian": (0.30, 0.42),
    "cyclist": (0.42, 0.55),
    "ground": (0.05, 0.18),
    "building": (0.18, 0.30),
    "vegetation": (0.70, 0.85),
    "pole": (0.85, 1.00),
}
_FALLBACK_RANGE = (0.0, 1.0)

# object surfaces are hit more densely than the ground per unit area
OBJECT_DENSITY_FACTOR = 3.0


class EmptySceneError(MarsegError, ValueError):
    pass


@dataclass(frozen=True)
class ObjectSpec:
    class_id: int
    center: tuple[float, float]  # footprint centre at t = 0
    size: tuple[float, float, float]  # extent along x, y, z
    velocity: tuple[float, float] = (0.0, 0.0)  # metres per frame

    def __post_init__(self):
        if len(self.size) != 3 or min(self.size) <= 0:
            raise ConfigError(f"object sizes must be positive, got {self.size}")

    @property
    def speed(self) -> float:
        return float(np.hypot(*self.velocity))

    def center_at(self, t: float) -> np.ndarray:
        return np.asarray(self.center, dtype=np.float64) + t * np.asarray(self.velocity, dtype=np.float64)

    def footprint_at(self, t: float) -> tuple[np.ndarray, np.ndarray]:
        c = self.center_at(t)
        half = np.asarray(self.size[:2]) / 2
        return c - half, c + half


@dataclass(frozen=True)
class SceneSpec:
    extent: float
    objects: tuple[ObjectSpec, ...]
    sensor_path: tuple[Pose, ...]
    points_per_frame: int = 2000
    noise_sigma: float = 0.02
    motion_threshold: float = DEFAULT_MOTION_THRESHOLD
    taxonomy: ClassTaxonomy = field(default=DEFAULT_TAXONOMY)
    ground_class: int = 3

    def __post_init__(self):
        object.__setattr__(self, "objects", tuple(self.objects))
        object.__setattr__(self, "sensor_path", tuple(self.sensor_path))
        if not self.extent > 0:
            raise ConfigError("extent must be positive")
        if len(self.sensor_path) < 1:
            raise ConfigError("sensor path needs at least one pose")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be non-negative")
        if self.taxonomy.is_movable(self.ground_class):
            raise ConfigError("the ground class must be non-movable")
        for obj in self.objects:
            if not 0 <= obj.class_id < self.taxonomy.num_classes:
                raise ConfigError(f"unknown class id {obj.class_id}")
            if obj.speed > 0 and not self.taxonomy.is_movable(obj.class_id):
                raise ConfigError(f"non-movable class {obj.class_id} given a velocity")

    @property
    def k(self) -> int:
        return len(self.sensor_path)

    def is_moving(self, obj: ObjectSpec) -> bool:
        """Displacement over the whole window exceeds the motion threshold."""
        return obj.speed * (self.k - 1) > self.motion_threshold


def _intensity(rng: np.random.Generator, tax: ClassTaxonomy, class_id: int, n: int) -> np.ndarray:
    lo, hi = INTENSITY_RANGES.get(tax.classes[class_id].name, _FALLBACK_RANGE)
    return rng.uniform(lo, hi, size=n)


def _visible_faces(obj: ObjectSpec, t: int, sensor_xy: np.ndarray) -> list[tuple[str, float]]:
    """Faces hit by a sweep from ``sensor_xy``: outward-facing sides plus the top."""
    lo, hi = obj.footprint_at(t)
    sx, sy, sz = obj.size
    faces = [("top", sx * sy)]
    if sensor_xy[0] < lo[0]:
        faces.append(("-x", sy * sz))
    if sensor_xy[0] > hi[0]:
        faces.append(("+x", sy * sz))
    if sensor_xy[1] < lo[1]:
        faces.append(("-y", sx * sz))
    if sensor_xy[1] > hi[1]:
        faces.append(("+y", sx * sz))
    return faces


def _sample_face(rng, obj: ObjectSpec, t: int, face: str, n: int) -> np.ndarray:
    lo, hi = obj.footprint_at(t)
    h = obj.size[2]
    u = rng.uniform(size=(n, 2))
    if face == "top":
        return np.column_stack([lo[0] + u[:, 0] * (hi[0] - lo[0]), lo[1] + u[:, 1] * (hi[1] - lo[1]), np.full(n, h)])
    axis = 0 if face[1] == "x" else 1
    fixed = hi[axis] if face[0] == "+" else lo[axis]
    other = 1 - axis
    pts = np.empty((n, 3))
    pts[:, axis] = fixed
    pts[:, other] = lo[other] + u[:, 0] * (hi[other] - lo[other])
    pts[:, 2] = u[:, 1] * h
    return pts


def _sample_ground(rng, spec: SceneSpec, t: int, n: int) -> np.ndarray:
    E = spec.extent
    boxes = [o.footprint_at(t) for o in spec.objects]
    out = np.empty((0, 2))
    while len(out) < n:
        cand = rng.uniform(-E, E, size=(2 * (n - len(out)) + 16, 2))
        free = np.ones(len(cand), dtype=bool)
        for lo, hi in boxes:
            free &= ~np.all((cand >= lo) & (cand <= hi), axis=1)
        out = np.vstack([out, cand[free]])
    out = out[:n]
    return np.column_stack([out, np.zeros(n)])


def sample_surfaces(spec: SceneSpec, t: int, sensor: Pose, seed: int) -> PointCloud:
    """One labelled frame at time ``t``, expressed in the ``sensor`` frame."""
    if not 0 <= t < spec.k:
        raise ConfigError(f"time {t} outside 0..{spec.k - 1}")
    rng = np.random.default_rng(np.random.SeedSequence([seed, t]))
    tax = spec.taxonomy
    sensor_xy = sensor.translation[:2]

    parts = [("ground", None, None, (2 * spec.extent) ** 2)]
    for oi, obj in enumerate(spec.objects):
        for face, area in _visible_faces(obj, t, sensor_xy):
            parts.append(("face", oi, face, area * OBJECT_DENSITY_FACTOR))
    weights = np.array([p[3] for p in parts])
    counts = rng.multinomial(spec.points_per_frame, weights / weights.sum())

    xyz, inten, codes = [], [], []
    for (kind, oi, face, _), n in zip(parts, counts):
        if n == 0:
            continue
        if kind == "ground":
            xyz.append(_sample_ground(rng, spec, t, n))
            inten.append(_intensity(rng, tax, spec.ground_class, n))
            codes.append(np.full(n, compose_label(spec.ground_class, False, tax)))
        else:
            obj = spec.objects[oi]
            xyz.append(_sample_face(rng, obj, t, face, n))
            inten.append(_intensity(rng, tax, obj.class_id, n))
            codes.append(np.full(n, compose_label(obj.class_id, spec.is_moving(obj), tax)))
    world = np.vstack(xyz)
    if spec.noise_sigma > 0:
        world = world + np.clip(rng.normal(size=world.shape), -3.0, 3.0) * spec.noise_sigma
    local = invert_pose(sensor).apply(world)
    return PointCloud(
        local.astype(np.float32).astype(np.float64),
        np.clip(np.concatenate(inten), 0.0, 1.0).astype(np.float32).astype(np.float64),
        np.concatenate(codes),
        frame_index=t,
    )


def generate_sequence(spec: SceneSpec, seed: int) -> tuple[list[PointCloud], list[Pose], ClassTaxonomy]:
    if not spec.objects:
        raise EmptySceneError("scene has no objects")
    frames = [sample_surfaces(spec, t, pose, seed) for t, pose in enumerate(spec.sensor_path)]
    return frames, list(spec.sensor_path), spec.taxonomy


# (class name, count range, size ranges xyz, speed range when moving)
_OBJECT_TABLE = [
    ("car", (2, 4), ((3.6, 4.8), (1.6, 2.0), (1.4, 1.7)), (0.5, 1.2)),
    ("pedestrian", (1, 3), ((0.5, 0.7), (0.5, 0.7), (1.6, 1.9)), (0.3, 0.6)),
    ("cyclist", (1, 2), ((1.6, 1.9), (0.5, 0.7), (1.5, 1.8)), (0.4, 0.9)),
    ("building", (1, 2), ((3.0, 6.0), (3.0, 6.0), (3.0, 6.0)), None),
    ("vegetation", (1, 3), ((1.0, 3.0), (1.0, 3.0), (1.5, 3.0)), None),
    ("pole", (1, 3), ((0.2, 0.3), (0.2, 0.3), (3.0, 5.0)), None),
]


def _swept_box(obj: ObjectSpec, k: int, margin: float) -> tuple[np.ndarray, np.ndarray]:
    lo0, hi0 = obj.footprint_at(0)
    lo1, hi1 = obj.footprint_at(k - 1)
    return np.minimum(lo0, lo1) - margin, np.maximum(hi0, hi1) + margin


def random_scene_spec(
    seed: int,
    k: int = 3,
    extent: float = 10.0,
    points_per_frame: int = 2000,
    noise_sigma: float = 0.02,
    motion_threshold: float = DEFAULT_MOTION_THRESHOLD,
    taxonomy: ClassTaxonomy = DEFAULT_TAXONOMY,
) -> SceneSpec:
    """Random desk-scale street scene with at least one moving object.

    The sensor drives a short straight segment with a slight yaw drift and
    ends near the world origin at the target frame.
    """
    for attempt in range(16):
        spec = _random_scene(seed, attempt, k, extent, points_per_frame, noise_sigma, motion_threshold, taxonomy)
        if any(spec.is_moving(o) for o in spec.objects):
            return spec
    return spec


def _random_scene(seed, attempt, k, extent, points_per_frame, noise_sigma, motion_threshold, taxonomy) -> SceneSpec:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5CE7E, attempt]))
    name_to_id = {c.name: c.class_id for c in taxonomy.classes}

    heading = rng.uniform(-0.2, 0.2)
    dyaw = rng.uniform(-0.05, 0.05)
    ego_speed = rng.uniform(0.0, 0.8)
    end = rng.uniform(-0.5, 0.5, size=2)
    direction = np.array([np.cos(heading), np.sin(heading)])
    sensor_path = []
    for t in range(k):
        xy = end - (k - 1 - t) * ego_speed * direction
        sensor_path.append(Pose.from_yaw(heading + (t - (k - 1)) * dyaw, (xy[0], xy[1], 0.0)))
    sensor_xy = np.array([p.translation[:2] for p in sensor_path])

    wanted = []
    for name, (lo, hi), sizes, speeds in _OBJECT_TABLE:
        if name not in name_to_id:
            continue
        for _ in range(rng.integers(lo, hi + 1)):
            wanted.append((name, sizes, speeds, bool(speeds is not None and rng.uniform() < 0.5)))
    movable = [i for i, w in enumerate(wanted) if w[2] is not None]
    if movable and not any(wanted[i][3] for i in movable):
        i = movable[rng.integers(len(movable))]
        wanted[i] = wanted[i][:3] + (True,)

    placed: list[ObjectSpec] = []
    for name, sizes, speeds, moving in wanted:
        for _attempt in range(200):
            size = tuple(float(rng.uniform(*r)) for r in sizes)
            velocity = (0.0, 0.0)
            if moving:
                speed = rng.uniform(*speeds)
                ang = rng.uniform(-np.pi, np.pi)
                velocity = (float(speed * np.cos(ang)), float(speed * np.sin(ang)))
                # boxes face their direction of travel along the dominant axis
                if abs(np.sin(ang)) > abs(np.cos(ang)):
                    size = (size[1], size[0], size[2])
            half = max(size[0], size[1]) / 2
            span = extent - half - np.hypot(*velocity) * (k - 1) - 0.5
            if span <= 0:
                continue
            center = tuple(float(v) for v in rng.uniform(-span, span, size=2))
            cand = ObjectSpec(name_to_id[name], center, size, velocity)
            lo, hi = _swept_box(cand, k, 0.3)
            if np.any(lo < -extent) or np.any(hi > extent):
                continue
            near_sensor = np.any(np.all((sensor_xy > lo - 1.5) & (sensor_xy < hi + 1.5), axis=1))
            if near_sensor:
                continue
            clash = False
            for other in placed:
                olo, ohi = _swept_box(other, k, 0.3)
                if np.all(lo < ohi) and np.all(olo < hi):
                    clash = True
                    break
            if not clash:
                placed.append(cand)
                break
    return SceneSpec(
        extent=extent,
        objects=tuple(placed),
        sensor_path=tuple(sensor_path),
        points_per_frame=points_per_frame,
        noise_sigma=noise_sigma,
        motion_threshold=motion_threshold,
        taxonomy=taxonomy,
    )


def scene_seed(dataset_seed: int, index: int) -> int:
    """Per-scene seed derived from the dataset seed; distinct datasets get unrelated scenes."""
    return int(np.random.SeedSequence([dataset_seed, index]).generate_state(1)[0])


def generate_dataset(root, scenes: int, seed: int, k: int = 3, extent: float = 10.0, points_per_frame: int = 2000):
    """Write ``scenes`` random sequences of ``k`` frames under ``root``; returns the manifest."""
    from .dataset_io import write_sequence

    if scenes < 1:
        raise ConfigError("need at least one scene")
    manifest = None
    for i in range(scenes):
        s = scene_seed(seed, i)
        spec = random_scene_spec(s, k=k, extent=extent, points_per_frame=points_per_frame)
        frames, poses, tax = generate_sequence(spec, s)
        manifest = write_sequence(frames, poses, tax, root, seq_id=i)
    return manifest
