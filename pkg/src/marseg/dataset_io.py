"""On-disk sequence datasets.

Layout::

    <root>/taxonomy.txt
    <root>/manifest.json
    <root>/seq_<id>/frame_<i>.bin   header + float32 x, y, z, intensity per point
    <root>/seq_<id>/frame_<i>.lbl   uint16 composite code per point
    <root>/seq_<id>/poses.txt       one row-major 3x4 [R|t] per frame

All binary fields are little-endian. The ``.bin`` header is an 8-byte magic,
a one-byte format version, the point count (uint32) and a CRC-32 of the
payload (uint32), so single-byte corruption is detected rather than misread.
"""
from __future__ import annotations

import hashlib
import json
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .align import Pose, read_poses, write_poses
from .core import ArityError, ClassTaxonomy, DataError, InvalidLabelError, PointCloud, check_codes

FORMAT_VERSION = 1
BIN_MAGIC = b"MARSPTS\x00"
_HEADER = struct.Struct("<8sBII")
_RECORD = 16  # 4 x float32

TAXONOMY_FILE = "taxonomy.txt"
MANIFEST_FILE = "manifest.json"
POSES_FILE = "poses.txt"


@dataclass(frozen=True)
class SequenceManifest:
    sequences: tuple[tuple[str, int], ...]  # (sequence id, frame count)
    taxonomy_hash: str
    format_version: int = FORMAT_VERSION

    def to_json(self) -> str:
        doc = {
            "format_version": self.format_version,
            "taxonomy_hash": self.taxonomy_hash,
            "sequences": [{"id": s, "frames": n} for s, n in self.sequences],
        }
        return json.dumps(doc, indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "SequenceManifest":
        try:
            doc = json.loads(text)
            seqs = tuple((str(d["id"]), int(d["frames"])) for d in doc["sequences"])
            return cls(seqs, str(doc["taxonomy_hash"]), int(doc["format_version"]))
        except (ValueError, KeyError, TypeError) as exc:
            raise DataError(f"malformed manifest: {exc}") from None


def seq_name(seq_id) -> str:
    return seq_id if isinstance(seq_id, str) and seq_id.startswith("seq_") else f"seq_{int(seq_id):04d}"


def frame_stem(i: int) -> str:
    return f"frame_{i:04d}"


def write_frame(seq_dir: Path, cloud: PointCloud) -> None:
    payload = np.column_stack([cloud.xyz, cloud.intensity]).astype("<f4").tobytes()
    header = _HEADER.pack(BIN_MAGIC, FORMAT_VERSION, len(cloud), zlib.crc32(payload))
    stem = seq_dir / frame_stem(cloud.frame_index)
    stem.with_suffix(".bin").write_bytes(header + payload)
    if cloud.labels is not None:
        if len(cloud) and (cloud.labels.min() < 0 or cloud.labels.max() > 0xFFFF):
            raise InvalidLabelError("label codes must fit in 16 bits")
        stem.with_suffix(".lbl").write_bytes(cloud.labels.astype("<u2").tobytes())


def read_frame(seq_dir: Path, i: int, taxonomy: ClassTaxonomy | None = None) -> PointCloud:
    stem = Path(seq_dir) / frame_stem(i)
    bin_path = stem.with_suffix(".bin")
    try:
        raw = bin_path.read_bytes()
    except OSError:
        raise DataError(f"missing point file {bin_path}") from None
    if len(raw) < _HEADER.size:
        raise DataError(f"{bin_path}: truncated header")
    magic, version, n, crc = _HEADER.unpack_from(raw)
    if magic != BIN_MAGIC:
        raise DataError(f"{bin_path}: bad magic")
    if version != FORMAT_VERSION:
        raise DataError(f"{bin_path}: unsupported format version {version}")
    payload = raw[_HEADER.size :]
    if len(payload) % _RECORD:
        raise DataError(f"{bin_path}: payload of {len(payload)} bytes is not a multiple of {_RECORD}")
    if len(payload) != n * _RECORD:
        raise DataError(f"{bin_path}: header says {n} points, payload holds {len(payload) // _RECORD}")
    if zlib.crc32(payload) != crc:
        raise DataError(f"{bin_path}: checksum mismatch")
    arr = np.frombuffer(payload, dtype="<f4").reshape(n, 4).astype(np.float64)

    labels = None
    lbl_path = stem.with_suffix(".lbl")
    if lbl_path.exists():
        lraw = lbl_path.read_bytes()
        if len(lraw) % 2:
            raise DataError(f"{lbl_path}: odd byte length")
        if len(lraw) != 2 * n:
            raise DataError(f"{lbl_path}: {len(lraw) // 2} labels for {n} points")
        labels = np.frombuffer(lraw, dtype="<u2").astype(np.int64)
        if taxonomy is not None:
            try:
                check_codes(labels, taxonomy)
            except InvalidLabelError as exc:
                raise DataError(f"{lbl_path}: {exc}") from None
    try:
        return PointCloud(arr[:, :3], arr[:, 3], labels, frame_index=i)
    except ValueError as exc:
        raise DataError(f"{bin_path}: {exc}") from None


def read_taxonomy(root: Path) -> ClassTaxonomy:
    path = Path(root) / TAXONOMY_FILE
    try:
        return ClassTaxonomy.from_text(path.read_text())
    except OSError:
        raise DataError(f"missing taxonomy file {path}") from None


def read_manifest(root: Path) -> SequenceManifest:
    path = Path(root) / MANIFEST_FILE
    try:
        return SequenceManifest.from_json(path.read_text())
    except OSError:
        raise DataError(f"missing manifest {path}") from None


def scan_manifest(root: Path, taxonomy: ClassTaxonomy) -> SequenceManifest:
    seqs = []
    for d in sorted(Path(root).glob("seq_*")):
        if d.is_dir():
            seqs.append((d.name, len(list(d.glob("frame_*.bin")))))
    return SequenceManifest(tuple(seqs), taxonomy.digest())


def write_sequence(
    frames: Sequence[PointCloud],
    poses: Sequence[Pose],
    taxonomy: ClassTaxonomy,
    root: Path,
    seq_id=0,
) -> SequenceManifest:
    """Write one sequence under ``root`` and refresh the dataset manifest."""
    if not frames:
        raise ArityError("cannot write an empty sequence")
    if len(frames) != len(poses):
        raise ArityError(f"{len(frames)} frames but {len(poses)} poses")
    root = Path(root)
    try:
        root.mkdir(parents=True, exist_ok=True)
        tax_path = root / TAXONOMY_FILE
        if tax_path.exists():
            if read_taxonomy(root) != taxonomy:
                raise DataError(f"{tax_path} holds a different taxonomy")
        else:
            tax_path.write_text(taxonomy.to_text())
        seq_dir = root / seq_name(seq_id)
        seq_dir.mkdir(exist_ok=True)
        for i, cloud in enumerate(frames):
            if cloud.frame_index != i:
                cloud = PointCloud(cloud.xyz, cloud.intensity, cloud.labels, frame_index=i)
            write_frame(seq_dir, cloud)
        write_poses(seq_dir / POSES_FILE, poses)
        manifest = scan_manifest(root, taxonomy)
        (root / MANIFEST_FILE).write_text(manifest.to_json())
    except OSError as exc:
        raise DataError(f"cannot write dataset at {root}: {exc}") from None
    return manifest


def validate_dataset(root: Path) -> tuple[SequenceManifest, ClassTaxonomy]:
    """Check manifest, taxonomy hash and per-frame file presence."""
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset directory {root} does not exist")
    manifest = read_manifest(root)
    taxonomy = read_taxonomy(root)
    if manifest.format_version != FORMAT_VERSION:
        raise DataError(f"unsupported dataset format version {manifest.format_version}")
    if manifest.taxonomy_hash != taxonomy.digest():
        raise DataError("manifest taxonomy hash does not match taxonomy.txt")
    for seq, n in manifest.sequences:
        d = root / seq
        for i in range(n):
            for suffix in (".bin", ".lbl"):
                if not (d / frame_stem(i)).with_suffix(suffix).exists():
                    raise DataError(f"{seq}: missing {frame_stem(i)}{suffix}")
        if not (d / POSES_FILE).exists():
            raise DataError(f"{seq}: missing {POSES_FILE}")
    return manifest, taxonomy


def read_sequence(path: Path, k: int, target_index: int) -> tuple[list[PointCloud], list[Pose]]:
    """The ``k`` consecutive frames ending at ``target_index`` (target last)."""
    path = Path(path)
    if k < 1 or target_index < k - 1:
        raise ArityError(f"window of {k} frames cannot end at frame {target_index}")
    taxonomy = read_taxonomy(path.parent) if (path.parent / TAXONOMY_FILE).exists() else None
    try:
        poses = read_poses(path / POSES_FILE)
    except OSError:
        raise DataError(f"missing {path / POSES_FILE}") from None
    if target_index >= len(poses):
        raise DataError(f"{path}: target frame {target_index} but only {len(poses)} poses")
    idx = range(target_index - k + 1, target_index + 1)
    frames = [read_frame(path, i, taxonomy) for i in idx]
    return frames, [poses[i] for i in idx]


def list_samples(root: Path, k: int) -> list[tuple[Path, int]]:
    """Every ``(sequence dir, target index)`` with a full ``k``-frame window."""
    manifest, _ = validate_dataset(root)
    return [(Path(root) / seq, t) for seq, n in manifest.sequences for t in range(k - 1, n)]


def dataset_hash(root: Path) -> str:
    h = hashlib.sha256()
    root = Path(root)
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode() + b"\0")
            h.update(p.read_bytes())
    return h.hexdigest()
