"""2D convolution, pooling and upsampling on (B, C, H, W) tensors."""
from __future__ import annotations

from typing import Optional

import numpy as np

from ..core import ShapeError
from .tensor import Tensor, _result


def _im2col(xd: np.ndarray, k: int) -> np.ndarray:
    """(B, C, H, W) -> (B, C*k*k, H*W) zero-padded patches, one slice copy per tap."""
    B, C, H, W = xd.shape
    p = k // 2
    xp = np.zeros((B, C, H + 2 * p, W + 2 * p))
    xp[:, :, p : p + H, p : p + W] = xd
    cols = np.empty((B, C, k, k, H, W))
    for u in range(k):
        for v in range(k):
            cols[:, :, u, v] = xp[:, :, u : u + H, v : v + W]
    return cols.reshape(B, C * k * k, H * W)


def conv2d(x: Tensor, kernel: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Same-padded cross-correlation with zero padding.

    ``x`` is (C_in, H, W) or (B, C_in, H, W); ``kernel`` is (C_out, C_in, k, k)
    with odd ``k``.
    """
    squeeze = x.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(f"conv2d: input {x.shape}, kernel {kernel.shape}")
    c_out, c_in, k, k2 = kernel.shape
    if k != k2 or k % 2 == 0:
        raise ShapeError(f"conv2d: kernel must be square and odd, got {k}x{k2}")
    if xd.shape[1] != c_in:
        raise ShapeError(f"conv2d: input has {xd.shape[1]} channels, kernel expects {c_in}")
    if bias is not None and bias.shape != (c_out,):
        raise ShapeError(f"conv2d: bias {bias.shape} vs {c_out} output channels")
    B, _, H, W = xd.shape
    w2 = kernel.data.reshape(c_out, -1)
    cols = xd.reshape(B, c_in, H * W) if k == 1 else _im2col(xd, k)
    out = w2 @ cols
    if bias is not None:
        out += bias.data[:, None]
    out = out.reshape(B, c_out, H, W)

    def bw(g):
        g3 = g.reshape(B, c_out, H * W)
        if bias is not None and bias.requires_grad:
            bias._accum(g3.sum(axis=(0, 2)))
        if kernel.requires_grad:
            gw = g3[0] @ cols[0].T
            for b in range(1, B):
                gw += g3[b] @ cols[b].T
            kernel._accum(gw.reshape(kernel.shape))
        if x.requires_grad:
            if k == 1:
                gx = (w2.T @ g3).reshape(B, c_in, H, W)
            else:
                # adjoint of a same-padded correlation: correlate with the flipped kernel
                wf = kernel.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(c_in, -1)
                gx = (wf @ _im2col(g3.reshape(B, c_out, H, W), k)).reshape(B, c_in, H, W)
            x._accum(gx[0] if squeeze else gx)

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return _result(out[0] if squeeze else out, parents, bw)


def max_pool2(x: Tensor) -> Tensor:
    """2x2 max pooling, stride 2, over the last two axes. Ties route to the first maximum."""
    *lead, H, W = x.shape
    if H % 2 or W % 2:
        raise ShapeError(f"max_pool2 needs even spatial dims, got {H}x{W}")
    blocks = x.data.reshape(*lead, H // 2, 2, W // 2, 2)
    blocks = np.moveaxis(blocks, -3, -2).reshape(*lead, H // 2, W // 2, 4)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def bw(g):
        onehot = (np.arange(4) == arg[..., None]) * g[..., None]
        full = onehot.reshape(*lead, H // 2, W // 2, 2, 2)
        full = np.moveaxis(full, -2, -3).reshape(*lead, H, W)
        x._accum(full)

    return _result(out, (x,), bw)


def upsample2(x: Tensor) -> Tensor:
    """Nearest-neighbour 2x upsampling over the last two axes."""
    *lead, H, W = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=-2), 2, axis=-1)

    def bw(g):
        x._accum(g.reshape(*lead, H, 2, W, 2).sum(axis=(-3, -1)))

    return _result(out, (x,), bw)


def gather_pixels(z: Tensor, flat_index: np.ndarray) -> Tensor:
    """Rows ``z[:, idx]`` of a (D, H, W) map as (N, D); index -1 yields zeros."""
    D = z.shape[0]
    flat_index = np.asarray(flat_index, dtype=np.int64)
    zt = z.data.reshape(D, -1).T
    valid = flat_index >= 0
    idx = np.where(valid, flat_index, 0)
    out = zt[idx] * valid[:, None]

    def bw(g):
        full = np.zeros((zt.shape[0], D))
        np.add.at(full, idx[valid], g[valid])
        z._accum(full.T.reshape(z.shape))

    return _result(out, (z,), bw)
