"""Convolution ops: dense 2-D convolution, nearest upsampling, and 3-D
convolution over an index-listed sparse voxel set.

conv2d uses shift-and-accumulate (one small matmul per kernel tap) so the
summation order is fixed and forward values are reproducible.
"""

from __future__ import annotations

import numpy as np

from .ops import RowGather, _op, concat
from .tensor import ShapeError, Tensor, as_tensor


def conv2d(x, w, b=None, stride=1):
    """2-D convolution of x:(H,W,Cin) with w:(kh,kw,Cin,Cout), zero padding
    kh//2 x kw//2, stride 1 or 2."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 3 or w.ndim != 4:
        raise ShapeError(f"conv2d: expected (H,W,Cin) and (kh,kw,Cin,Cout), got {x.shape}, {w.shape}")
    if x.shape[2] != w.shape[2]:
        raise ShapeError(f"conv2d: channel mismatch {x.shape} vs {w.shape}")
    if stride not in (1, 2):
        raise ValueError("conv2d: stride must be 1 or 2")
    H, W, cin = x.shape
    kh, kw, _, cout = w.shape
    ph, pw = kh // 2, kw // 2
    ho = (H + 2 * ph - kh) // stride + 1
    wo = (W + 2 * pw - kw) // stride + 1

    xd = np.zeros((H + 2 * ph, W + 2 * pw, cin), dtype=np.float64)
    xd[ph:ph + H, pw:pw + W] = x.data
    wd = w.data

    acc = np.zeros((ho * wo, cout), dtype=np.float64)
    for dy in range(kh):
        for dx in range(kw):
            xs = xd[dy:dy + stride * (ho - 1) + 1:stride,
                    dx:dx + stride * (wo - 1) + 1:stride]
            acc += xs.reshape(-1, cin) @ wd[dy, dx]
    out = acc.reshape(ho, wo, cout)

    def bw_x(g):
        gf = g.reshape(-1, cout)
        dxp = np.zeros_like(xd)
        for dy in range(kh):
            for dx in range(kw):
                dxp[dy:dy + stride * (ho - 1) + 1:stride,
                    dx:dx + stride * (wo - 1) + 1:stride] += \
                    (gf @ wd[dy, dx].T).reshape(ho, wo, cin)
        return dxp[ph:ph + H, pw:pw + W]

    def bw_w(g):
        gf = g.reshape(-1, cout)
        dw = np.empty_like(wd)
        for dy in range(kh):
            for dx in range(kw):
                xs = xd[dy:dy + stride * (ho - 1) + 1:stride,
                        dx:dx + stride * (wo - 1) + 1:stride]
                dw[dy, dx] = xs.reshape(-1, cin).T @ gf
        return dw

    pairs = [(x, bw_x), (w, bw_w)]
    if b is not None:
        b = as_tensor(b)
        out = out + b.data
        pairs.append((b, lambda g: g.sum(axis=(0, 1))))
    return _op(out, *pairs)


def nearest_upsample2(x):
    """Nearest-neighbor 2x upsampling of (H,W,C)."""
    x = as_tensor(x)
    H, W, C = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=0), 2, axis=1)
    return _op(out, (x, lambda g: g.reshape(H, 2, W, 2, C).sum(axis=(1, 3))))


def sparse_conv3d(codes, neighbor_gather, w, b=None):
    """3-D convolution over an index-listed active voxel set.

    `codes` holds one row per active voxel; `neighbor_gather` is a RowGather
    whose index map lists, per output voxel, the K neighbor rows into a
    zero-padded code table (sentinel row = inactive). w: (K*Cin, Cout).
    """
    codes = as_tensor(codes)
    n, cin = codes.shape
    k = neighbor_gather.idx.shape[1]
    padded = concat([codes, Tensor(np.zeros((1, cin)))], axis=0)
    cols = neighbor_gather(padded)           # (n_out, K, Cin)
    cols = cols.reshape((neighbor_gather.idx.shape[0], k * cin))
    out = cols @ w
    if b is not None:
        out = out + b
    return out
