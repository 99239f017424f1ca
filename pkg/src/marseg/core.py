"""Shared domain types: point clouds, the class taxonomy, composite labels."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Iterable, NamedTuple, Optional, Sequence

import numpy as np


class MarsegError(Exception):
    """Base class for all package errors."""


class InvalidLabelError(MarsegError, ValueError):
    pass


class ArityError(MarsegError, ValueError):
    pass


class ShapeError(MarsegError, ValueError):
    pass


class ConfigError(MarsegError, ValueError):
    pass


class DataError(MarsegError):
    """Unreadable, truncated or inconsistent on-disk data."""


class ManifestMismatchError(DataError):
    pass


class Point(NamedTuple):
    x: float
    y: float
    z: float
    intensity: float


@dataclass(frozen=True)
class ClassInfo:
    class_id: int
    name: str
    movable: bool


@dataclass(frozen=True)
class CompositeLabel:
    semantic_id: int
    moving: bool


@dataclass(frozen=True)
class ClassTaxonomy:
    """Semantic classes and which of them can move.

    Composite codes are ``semantic_id + C * moving`` where ``C`` is the
    number of semantic classes.
    """

    classes: tuple[ClassInfo, ...]

    def __post_init__(self):
        ids = [c.class_id for c in self.classes]
        if ids != list(range(len(ids))):
            raise ConfigError(f"class ids must be dense 0..C-1, got {ids}")
        if len({c.name for c in self.classes}) != len(ids):
            raise ConfigError("class names must be unique")
        movable = [c.movable for c in self.classes]
        if not any(movable) or all(movable):
            raise ConfigError("need at least one movable and one non-movable class")

    @classmethod
    def from_rows(cls, rows: Iterable[tuple[int, str, bool]]) -> "ClassTaxonomy":
        return cls(tuple(ClassInfo(int(i), str(n), bool(m)) for i, n, m in rows))

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    @property
    def names(self) -> list[str]:
        return [c.name for c in self.classes]

    @property
    def movable_mask(self) -> np.ndarray:
        return np.array([c.movable for c in self.classes], dtype=bool)

    @property
    def movable_ids(self) -> list[int]:
        return [c.class_id for c in self.classes if c.movable]

    def is_movable(self, semantic_id: int) -> bool:
        return self.classes[semantic_id].movable

    def valid_codes(self) -> list[int]:
        """All valid composite codes in dense confusion-matrix order."""
        C = self.num_classes
        return list(range(C)) + [C + i for i in self.movable_ids]

    def code_name(self, code: int) -> str:
        lab = decompose_label(code, self)
        name = self.classes[lab.semantic_id].name
        return f"moving-{name}" if lab.moving else name

    def to_text(self) -> str:
        lines = [f"{c.class_id} {c.name} {int(c.movable)}" for c in self.classes]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "ClassTaxonomy":
        rows = []
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 3 or parts[2] not in ("0", "1"):
                raise DataError(f"taxonomy line {lineno}: expected 'id name 0|1', got {line!r}")
            try:
                rows.append((int(parts[0]), parts[1], parts[2] == "1"))
            except ValueError as exc:
                raise DataError(f"taxonomy line {lineno}: {exc}") from None
        try:
            return cls.from_rows(rows)
        except ConfigError as exc:
            raise DataError(f"invalid taxonomy: {exc}") from None

    def digest(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:16]


DEFAULT_TAXONOMY = ClassTaxonomy.from_rows(
    [
        (0, "car", True),
        (1, "pedestrian", True),
        (2, "cyclist", True),
        (3, "ground", False),
        (4, "building", False),
        (5, "vegetation", False),
        (6, "pole", False),
    ]
)


def compose_label(semantic_id: int, moving: bool, tax: ClassTaxonomy) -> int:
    C = tax.num_classes
    if not 0 <= semantic_id < C:
        raise InvalidLabelError(f"semantic id {semantic_id} outside 0..{C - 1}")
    if moving and not tax.is_movable(semantic_id):
        raise InvalidLabelError(f"class {tax.classes[semantic_id].name!r} cannot be moving")
    return int(semantic_id) + C * int(bool(moving))


def decompose_label(code: int, tax: ClassTaxonomy) -> CompositeLabel:
    C = tax.num_classes
    if not 0 <= code < 2 * C:
        raise InvalidLabelError(f"code {code} outside 0..{2 * C - 1}")
    semantic_id, moving = int(code) % C, code >= C
    if moving and not tax.is_movable(semantic_id):
        raise InvalidLabelError(f"code {code}: class {tax.classes[semantic_id].name!r} cannot be moving")
    return CompositeLabel(semantic_id, bool(moving))


def compose_labels(semantic: np.ndarray, moving: np.ndarray, tax: ClassTaxonomy) -> np.ndarray:
    """Vectorised :func:`compose_label`."""
    semantic = np.asarray(semantic, dtype=np.int64)
    moving = np.asarray(moving, dtype=bool)
    C = tax.num_classes
    if semantic.size and (semantic.min() < 0 or semantic.max() >= C):
        raise InvalidLabelError("semantic id out of range")
    if np.any(moving & ~tax.movable_mask[semantic]):
        raise InvalidLabelError("moving flag set on a non-movable class")
    return semantic + C * moving.astype(np.int64)


def decompose_labels(codes: np.ndarray, tax: ClassTaxonomy) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised :func:`decompose_label`; returns ``(semantic, moving)``."""
    codes = np.asarray(codes, dtype=np.int64)
    check_codes(codes, tax)
    C = tax.num_classes
    return codes % C, codes >= C


def check_codes(codes: np.ndarray, tax: ClassTaxonomy) -> None:
    C = tax.num_classes
    codes = np.asarray(codes)
    if codes.size == 0:
        return
    if codes.min() < 0 or codes.max() >= 2 * C:
        raise InvalidLabelError("composite code out of range")
    moving = codes >= C
    if np.any(moving & ~tax.movable_mask[codes % C]):
        raise InvalidLabelError("composite code marks a non-movable class as moving")


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class PointCloud:
    """One LiDAR frame: ``xyz`` (N, 3) in metres, ``intensity`` (N,) in [0, 1],
    optional composite label codes (N,).
    """

    xyz: np.ndarray
    intensity: np.ndarray
    labels: Optional[np.ndarray] = None
    frame_index: int = 0

    def __post_init__(self):
        xyz = np.array(self.xyz, dtype=np.float64).reshape(-1, 3)
        intensity = np.array(self.intensity, dtype=np.float64).reshape(-1)
        if len(intensity) != len(xyz):
            raise ShapeError(f"{len(xyz)} points but {len(intensity)} intensities")
        if not np.all(np.isfinite(xyz)):
            raise ValueError("point coordinates must be finite")
        if intensity.size and (intensity.min() < 0.0 or intensity.max() > 1.0):
            raise ValueError("intensity must lie in [0, 1]")
        object.__setattr__(self, "xyz", _frozen(xyz))
        object.__setattr__(self, "intensity", _frozen(intensity))
        if self.labels is not None:
            labels = np.array(self.labels, dtype=np.int64).reshape(-1)
            if len(labels) != len(xyz):
                raise ShapeError(f"{len(xyz)} points but {len(labels)} labels")
            object.__setattr__(self, "labels", _frozen(labels))

    def __len__(self) -> int:
        return len(self.xyz)

    @classmethod
    def from_points(
        cls,
        points: Sequence[Point],
        labels: Optional[Sequence[int]] = None,
        frame_index: int = 0,
    ) -> "PointCloud":
        arr = np.array([tuple(p) for p in points], dtype=np.float64).reshape(-1, 4)
        return cls(arr[:, :3], arr[:, 3], None if labels is None else np.asarray(labels), frame_index)

    def point(self, i: int) -> Point:
        x, y, z = self.xyz[i]
        return Point(float(x), float(y), float(z), float(self.intensity[i]))

    def with_xyz(self, xyz: np.ndarray) -> "PointCloud":
        return PointCloud(xyz, self.intensity, self.labels, self.frame_index)

    def with_labels(self, labels: Optional[np.ndarray]) -> "PointCloud":
        return PointCloud(self.xyz, self.intensity, labels, self.frame_index)
