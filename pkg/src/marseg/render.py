"""Image renderings: BEV discrepancy activation maps and per-pillar error maps."""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .bev import BevConfig, rescale_to_u8, write_pgm, write_ppm
from .core import ArityError, DataError
from .mars import MarsModel, Sample
from .tensor_nn import no_grad

GRAY = (128, 128, 128)
RED = (255, 0, 0)


class UnsupportedSampleError(DataError):
    pass


def discrepancy_activation(model: MarsModel, sample: Sample, channels: int = 8, seed: int = 0) -> np.ndarray:
    """Per-pillar mean ``|D_i|`` over a seeded subset of difference channels, shape (H, W)."""
    cfg = model.config
    if cfg.frames < 2:
        raise UnsupportedSampleError("single-frame samples have no frame differences")
    if not cfg.mafl_active:
        raise UnsupportedSampleError("model has no motion-aware branch to render")
    if sample.bev_frames is None or sample.bev_frames.shape[0] < 2:
        raise UnsupportedSampleError("sample holds fewer than two BEV frames")
    with no_grad():
        diffs = model.forward(sample).diffs.data
    flat = np.abs(diffs.reshape(-1, *diffs.shape[2:]))
    n = flat.shape[0]
    rng = np.random.default_rng(seed)
    pick = np.sort(rng.choice(n, size=min(channels, n), replace=False))
    return flat[pick].mean(axis=0)


def render_bev(model: MarsModel, sample: Sample, out: Path, channels: int = 8, seed: int = 0, header=()) -> np.ndarray:
    """Write the activation map as a PGM plus a ``.txt`` sidecar recording the grey-level scale."""
    plane = discrepancy_activation(model, sample, channels, seed)
    img, lo, hi = rescale_to_u8(plane)
    out = Path(out)
    write_pgm(out, img)
    lines = list(header) + [
        f"# rows follow y, columns follow x; grey 0 = {lo!r}, grey 255 = {hi!r}",
        f"min={lo!r}",
        f"max={hi!r}",
        f"channels={min(channels, (model.config.frames - 1) * model.config.d_u)}",
        f"channel_seed={seed}",
    ]
    sidecar(out).write_text("\n".join(lines) + "\n")
    return img


def error_raster(pred: np.ndarray, gt: np.ndarray, pixels: np.ndarray, config: BevConfig) -> tuple[np.ndarray, dict]:
    """RGB raster: grey pillars hold only correct points, red pillars hold at least one error."""
    pred, gt, pixels = np.asarray(pred), np.asarray(gt), np.asarray(pixels)
    if not (len(pred) == len(gt) == len(pixels)):
        raise ArityError("prediction, label and pixel arrays differ in length")
    H, W = config.shape
    inside = pixels >= 0
    wrong = pred != gt
    occupied = np.bincount(pixels[inside], minlength=H * W) > 0
    bad = np.bincount(pixels[inside & wrong], minlength=H * W) > 0
    img = np.zeros((H * W, 3), dtype=np.uint8)
    img[occupied] = GRAY
    img[bad] = RED
    counts = {
        "correct_points": int(np.sum(~wrong)),
        "wrong_points": int(np.sum(wrong)),
        "outside_points": int(np.sum(~inside)),
        "gray_pixels": int(np.sum(occupied & ~bad)),
        "red_pixels": int(np.sum(bad)),
    }
    return img.reshape(H, W, 3), counts


def render_errors(model: MarsModel, sample: Sample, out: Path, header=()) -> dict:
    if sample.labels is None:
        raise UnsupportedSampleError("sample has no labels to compare against")
    pred = model.infer(sample)
    img, counts = error_raster(pred, sample.labels, sample.target_pixels, model.config.bev)
    out = Path(out)
    write_ppm(out, img)
    lines = list(header) + ["# grey: all points correct, red: at least one wrong point, black: empty"]
    lines += [f"{k}={v}" for k, v in counts.items()]
    sidecar(out).write_text("\n".join(lines) + "\n")
    return counts


def sidecar(image_path: Path) -> Path:
    image_path = Path(image_path)
    return image_path.with_name(image_path.name + ".txt")
