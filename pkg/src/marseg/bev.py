"""Pillarization of aligned point clouds into three-channel BEV grids.

Column index follows x, row index follows y. Cells are half-open
``[lo, lo + cell)``; points on the high edge of the extent are dropped.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import ConfigError, DataError, PointCloud

OUT_OF_BOUNDS = -1


@dataclass(frozen=True)
class BevConfig:
    height: int = 160
    width: int = 160
    cell_size: float = 0.5
    origin: tuple[float, float] | None = None

    def __post_init__(self):
        if self.height < 1 or self.width < 1:
            raise ConfigError(f"BEV size must be positive, got {self.height}x{self.width}")
        if not self.cell_size > 0:
            raise ConfigError(f"cell size must be positive, got {self.cell_size}")
        if self.origin is None:
            # centred on the target-frame sensor
            object.__setattr__(
                self, "origin", (-self.width * self.cell_size / 2, -self.height * self.cell_size / 2)
            )
        else:
            object.__setattr__(self, "origin", (float(self.origin[0]), float(self.origin[1])))

    @property
    def shape(self) -> tuple[int, int]:
        return self.height, self.width

    def cell_center(self, row, col):
        ox, oy = self.origin
        return ox + (np.asarray(col) + 0.5) * self.cell_size, oy + (np.asarray(row) + 0.5) * self.cell_size

    def to_dict(self) -> dict:
        return {"height": self.height, "width": self.width, "cell_size": self.cell_size, "origin": list(self.origin)}

    @classmethod
    def from_dict(cls, d: dict) -> "BevConfig":
        return cls(int(d["height"]), int(d["width"]), float(d["cell_size"]), tuple(d["origin"]))


@dataclass(frozen=True)
class BevGrid:
    data: np.ndarray  # (H, W, 3)
    config: BevConfig
    frame_index: int = 0
    dropped: int = 0

    @property
    def occupied(self) -> np.ndarray:
        return np.any(self.data != 0, axis=-1)


def points_to_pixels(xy: np.ndarray, config: BevConfig) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised binning; out-of-extent entries get ``OUT_OF_BOUNDS`` in both."""
    xy = np.asarray(xy, dtype=np.float64).reshape(-1, 2)
    ox, oy = config.origin
    col = np.floor((xy[:, 0] - ox) / config.cell_size)
    row = np.floor((xy[:, 1] - oy) / config.cell_size)
    ok = (col >= 0) & (col < config.width) & (row >= 0) & (row < config.height)
    row = np.where(ok, row, OUT_OF_BOUNDS).astype(np.int64)
    col = np.where(ok, col, OUT_OF_BOUNDS).astype(np.int64)
    return row, col


def point_to_pixel(x: float, y: float, config: BevConfig) -> tuple[int, int] | None:
    """Pillar ``(row, col)`` holding ``(x, y)``, or ``None`` when outside the grid."""
    row, col = points_to_pixels(np.array([[x, y]]), config)
    if row[0] == OUT_OF_BOUNDS:
        return None
    return int(row[0]), int(col[0])


def flat_pixel_index(xy: np.ndarray, config: BevConfig) -> np.ndarray:
    row, col = points_to_pixels(xy, config)
    return np.where(row >= 0, row * config.width + col, OUT_OF_BOUNDS)


def pillarize(cloud: PointCloud, config: BevConfig) -> BevGrid:
    """Per pillar: mean of ``2Δx/l``, mean of ``2Δy/l``, sum of intensities.

    Δ is the offset from the pillar's grid centre. Empty pillars stay (0, 0, 0).
    """
    H, W, l = config.height, config.width, config.cell_size
    flat = flat_pixel_index(cloud.xyz[:, :2], config)
    keep = flat >= 0
    flat = flat[keep]
    xy = cloud.xyz[keep, :2]
    row, col = np.divmod(flat, W)
    cx, cy = config.cell_center(row, col)
    # clip absorbs last-ulp rounding at cell edges
    dx = np.clip(2.0 * (xy[:, 0] - cx) / l, -1.0, 1.0)
    dy = np.clip(2.0 * (xy[:, 1] - cy) / l, -1.0, 1.0)
    # bincount reduces in input order, so the result is order-deterministic
    n = np.bincount(flat, minlength=H * W).astype(np.float64)
    safe = np.maximum(n, 1.0)
    grid = np.stack(
        [
            np.bincount(flat, weights=dx, minlength=H * W) / safe,
            np.bincount(flat, weights=dy, minlength=H * W) / safe,
            np.bincount(flat, weights=cloud.intensity[keep], minlength=H * W),
        ],
        axis=-1,
    ).reshape(H, W, 3)
    return BevGrid(grid, config, cloud.frame_index, int((~keep).sum()))


def point_counts(cloud: PointCloud, config: BevConfig) -> np.ndarray:
    flat = flat_pixel_index(cloud.xyz[:, :2], config)
    return np.bincount(flat[flat >= 0], minlength=config.height * config.width).reshape(config.shape)


def write_pgm(path: Path, image: np.ndarray) -> None:
    """Binary PGM (P5) from an 8-bit (H, W) array."""
    image = np.asarray(image, dtype=np.uint8)
    h, w = image.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode())
        fh.write(image.tobytes())


def write_ppm(path: Path, image: np.ndarray) -> None:
    """Binary PPM (P6) from an 8-bit (H, W, 3) array."""
    image = np.asarray(image, dtype=np.uint8)
    h, w, _ = image.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(image.tobytes())


def read_pnm(path: Path) -> np.ndarray:
    """Read back a P5/P6 file written by :func:`write_pgm` / :func:`write_ppm`."""
    try:
        magic, dims, maxval, body = Path(path).read_bytes().split(b"\n", 3)
        w, h = (int(v) for v in dims.split())
        if magic not in (b"P5", b"P6") or int(maxval) != 255:
            raise ValueError("unsupported header")
        arr = np.frombuffer(body, dtype=np.uint8)
        return arr.reshape(h, w, 3) if magic == b"P6" else arr.reshape(h, w)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read image {path}: {exc}") from None


def rescale_to_u8(plane: np.ndarray) -> tuple[np.ndarray, float, float]:
    """Min-max rescale to 0..255; a constant plane maps to all zeros."""
    lo, hi = float(plane.min()), float(plane.max())
    if hi <= lo:
        return np.zeros(plane.shape, dtype=np.uint8), lo, hi
    return np.round((plane - lo) / (hi - lo) * 255.0).astype(np.uint8), lo, hi


def dump_grid(grid: BevGrid, prefix: Path) -> list[Path]:
    """Write each channel as ``<prefix>_c<i>.pgm`` plus a ``<prefix>_scale.txt`` sidecar."""
    prefix = Path(prefix)
    paths, lines = [], []
    for c in range(grid.data.shape[-1]):
        img, lo, hi = rescale_to_u8(grid.data[..., c])
        p = prefix.with_name(f"{prefix.name}_c{c}.pgm")
        write_pgm(p, img)
        paths.append(p)
        lines.append(f"channel {c} min {lo!r} max {hi!r}")
    side = prefix.with_name(f"{prefix.name}_scale.txt")
    side.write_text("\n".join(lines) + "\n")
    return paths + [side]
