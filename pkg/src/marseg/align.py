"""Rigid SE(3) poses and alignment of a frame window into the target frame."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import ArityError, DataError, MarsegError, PointCloud

_ORTHO_TOL = 1e-9


class InvalidPoseError(MarsegError, ValueError):
    pass


@dataclass(frozen=True)
class Pose:
    """Maps sensor-frame coordinates to world coordinates: ``p' = R p + t``."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.array(self.rotation, dtype=np.float64)
        t = np.array(self.translation, dtype=np.float64).reshape(-1)
        if R.shape != (3, 3) or t.shape != (3,):
            raise InvalidPoseError(f"bad pose shapes {R.shape}, {t.shape}")
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(t))):
            raise InvalidPoseError("pose contains non-finite values")
        if np.abs(R.T @ R - np.eye(3)).max() > _ORTHO_TOL:
            raise InvalidPoseError("rotation is not orthonormal")
        if abs(np.linalg.det(R) - 1.0) > _ORTHO_TOL:
            raise InvalidPoseError("rotation determinant is not +1")
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_yaw(cls, yaw: float, translation=(0.0, 0.0, 0.0)) -> "Pose":
        c, s = np.cos(yaw), np.sin(yaw)
        R = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
        return cls(R, np.asarray(translation, dtype=np.float64))

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> "Pose":
        m = np.asarray(m, dtype=np.float64).reshape(3, 4)
        return cls(m[:, :3], m[:, 3])

    def as_matrix(self) -> np.ndarray:
        """Row-major 3x4 ``[R | t]``."""
        return np.hstack([self.rotation, self.translation[:, None]])

    def compose(self, other: "Pose") -> "Pose":
        """``self ∘ other``: apply ``other`` first."""
        return Pose(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation)

    def apply(self, xyz: np.ndarray) -> np.ndarray:
        return np.asarray(xyz, dtype=np.float64) @ self.rotation.T + self.translation

    def is_identity(self) -> bool:
        return bool(np.array_equal(self.rotation, np.eye(3)) and not self.translation.any())


def invert_pose(pose: Pose) -> Pose:
    Rt = pose.rotation.T
    return Pose(Rt, -Rt @ pose.translation)


def transform_cloud(cloud: PointCloud, pose: Pose) -> PointCloud:
    if not isinstance(pose, Pose):
        raise InvalidPoseError(f"expected Pose, got {type(pose).__name__}")
    if pose.is_identity():
        return cloud
    return cloud.with_xyz(pose.apply(cloud.xyz))


@dataclass(frozen=True)
class AlignedSequence:
    """k frames in the target (last) frame's coordinate system."""

    frames: tuple[PointCloud, ...]

    def __post_init__(self):
        if len(self.frames) < 1:
            raise ArityError("an aligned sequence needs at least one frame")
        idx = [f.frame_index for f in self.frames]
        if any(b <= a for a, b in zip(idx, idx[1:])):
            raise ArityError(f"frame indices must increase strictly, got {idx}")

    @property
    def k(self) -> int:
        return len(self.frames)

    @property
    def target_index(self) -> int:
        return self.k - 1

    @property
    def target(self) -> PointCloud:
        return self.frames[-1]


def align_sequence(frames: Sequence[PointCloud], poses: Sequence[Pose]) -> AlignedSequence:
    """Map every frame through ``inv(pose_target) ∘ pose_i``.

    The target frame itself is returned untouched, so it is fixed bitwise.
    """
    if len(frames) != len(poses) or not frames:
        raise ArityError(f"{len(frames)} frames but {len(poses)} poses")
    to_target = invert_pose(poses[-1])
    out = [transform_cloud(f, to_target.compose(p)) for f, p in zip(frames[:-1], poses[:-1])]
    out.append(frames[-1])
    return AlignedSequence(tuple(out))


def write_poses(path: Path, poses: Sequence[Pose]) -> None:
    lines = [" ".join(repr(float(v)) for v in p.as_matrix().ravel()) for p in poses]
    Path(path).write_text("\n".join(lines) + "\n")


def read_poses(path: Path) -> list[Pose]:
    poses = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 12:
            raise DataError(f"{path}:{lineno}: expected 12 numbers, got {len(parts)}")
        try:
            poses.append(Pose.from_matrix(np.array([float(v) for v in parts])))
        except (ValueError, InvalidPoseError) as exc:
            raise DataError(f"{path}:{lineno}: {exc}") from None
    return poses
