"""3-D convolution (cross-correlation) and its adjoint.

Layouts: activations are (C, H, W, D); conv weights are (C_out, C_in, k, k, k).

Stride-1 convolutions run on the flattened padded volume: a spatial shift is
a column offset there, so every patch-matrix block is one contiguous-row
slice copy and the whole contraction is a single GEMM (garbage columns from
row wrap-around land outside the cropped interior). The input gradient is
the same kernel applied to the re-padded output gradient with a spatially
flipped, channel-swapped weight. Strided convolutions use a plain gather.

``conv_transpose3d`` applies the exact adjoint of ``conv3d``'s input map with
the same weight layout, so <conv(x), y> == <x, conv_transpose(y)> holds by
construction (the transpose's input has C_out channels).
"""

from __future__ import annotations

import threading

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .tensor import ShapeError, Tensor, _require_same_dtype


def _offsets(k: int):
    return [(a, b, c) for a in range(k) for b in range(k) for c in range(k)]


# Patch-matrix buffers are large and short-lived; recycling them avoids
# re-faulting fresh pages on every conv call. Thread-local, capped per shape.
_tls = threading.local()


def _pool() -> dict:
    if not hasattr(_tls, "pool"):
        _tls.pool = {}
    return _tls.pool


def _take_buffer(shape: tuple, dtype) -> np.ndarray:
    key = (shape, np.dtype(dtype).str)
    stack = _pool().get(key)
    if stack:
        return stack.pop()
    return np.empty(shape, dtype=dtype)


def _give_buffer(arr: np.ndarray | None) -> None:
    if arr is None:
        return
    key = (arr.shape, arr.dtype.str)
    stack = _pool().setdefault(key, [])
    if len(stack) < 2:
        stack.append(arr)


def clear_buffer_pool() -> None:
    _pool().clear()


def _flat_cols(xf: np.ndarray, k: int, pw: int, pd: int, m: int) -> np.ndarray:
    """Offset-major patch matrix from a flattened (C, L) padded volume."""
    c = xf.shape[0]
    cols = _take_buffer((k * k * k * c, m), xf.dtype)
    for i, (a, b, cc) in enumerate(_offsets(k)):
        delta = (a * pw + b) * pd + cc
        cols[i * c : (i + 1) * c] = xf[:, delta : delta + m]
    return cols


def _flat_register(acc: np.ndarray, outs: tuple, pw: int, pd: int) -> np.ndarray:
    """Read a (C, M) flat-frame result back as a contiguous (C, ho, wo, do)."""
    c, m = acc.shape
    it = acc.itemsize
    view = as_strided(
        acc, shape=(c,) + outs, strides=(m * it, pw * pd * it, pd * it, it)
    )
    return np.ascontiguousarray(view)


def _embed_flat(g: np.ndarray, pw: int, pd: int, m: int) -> np.ndarray:
    """Inverse of _flat_register: place (C, ho, wo, do) into a zero (C, M) frame."""
    c, ho, wo, do = g.shape
    out = np.zeros((c, m), dtype=g.dtype)
    it = out.itemsize
    view = as_strided(out, shape=g.shape, strides=(m * it, pw * pd * it, pd * it, it))
    np.copyto(view, g)
    return out


def _conv3d_stride1(x: Tensor, w: Tensor, padding: int, outs: tuple) -> Tensor:
    c_out, c_in, k = w.shape[0], w.shape[1], w.shape[2]
    ho, wo, do = outs
    ph, pw, pd = (e + 2 * padding for e in x.shape[1:])
    m = ((ho - 1) * pw + (wo - 1)) * pd + (do - 1) + 1
    xp = np.pad(x.data, ((0, 0),) + ((padding, padding),) * 3) if padding else x.data
    xf = xp.reshape(c_in, -1)
    cols = _flat_cols(xf, k, pw, pd, m)
    wmat = np.ascontiguousarray(w.data.transpose(0, 2, 3, 4, 1).reshape(c_out, -1))
    out_data = _flat_register(wmat @ cols, outs, pw, pd)
    flops = 2 * c_out * c_in * k ** 3 * ho * wo * do
    if not w.requires_grad:
        _give_buffer(cols)
        cols = None  # retained only for the weight gradient

    def _bw(g):
        if w.requires_grad:
            gf = _embed_flat(g, pw, pd, m)
            dw = (gf @ cols.T).reshape(c_out, k, k, k, c_in)
            _give_buffer(cols)
            w._accum(np.ascontiguousarray(dw.transpose(0, 4, 1, 2, 3)))
        if x.requires_grad:
            # dx = stride-1 conv of g (padded by k-1-p) with the flipped kernel.
            q = k - 1 - padding
            gp = np.pad(g, ((0, 0),) + ((q, q),) * 3) if q else g
            gph, gpw, gpd = gp.shape[1:]
            m2 = ((x.shape[1] - 1) * gpw + (x.shape[2] - 1)) * gpd + (x.shape[3] - 1) + 1
            cols2 = _flat_cols(gp.reshape(c_out, -1), k, gpw, gpd, m2)
            wflip = np.ascontiguousarray(
                w.data[:, :, ::-1, ::-1, ::-1].transpose(1, 2, 3, 4, 0).reshape(c_in, -1)
            )
            x._accum(_flat_register(wflip @ cols2, x.shape[1:], gpw, gpd))
            _give_buffer(cols2)

    return Tensor._from_op(out_data, (x, w), _bw, "conv3d", flops)


def _cols_strided(xp: np.ndarray, k: int, stride: int, outs: tuple) -> np.ndarray:
    """General (strided) patch matrix via 3-D block copies."""
    ho, wo, do = outs
    c = xp.shape[0]
    cols = np.empty((k * k * k * c, ho * wo * do), dtype=xp.dtype)
    for i, (a, b, cc) in enumerate(_offsets(k)):
        block = cols[i * c : (i + 1) * c].reshape(c, ho, wo, do)
        np.copyto(
            block,
            xp[
                :,
                a : a + stride * ho : stride,
                b : b + stride * wo : stride,
                cc : cc + stride * do : stride,
            ],
        )
    return cols


def _conv3d_general(x: Tensor, w: Tensor, stride: int, padding: int, outs: tuple) -> Tensor:
    c_out, c_in, k = w.shape[0], w.shape[1], w.shape[2]
    ho, wo, do = outs
    xp = np.pad(x.data, ((0, 0),) + ((padding, padding),) * 3) if padding else x.data
    cols = _cols_strided(xp, k, stride, outs)
    wmat = np.ascontiguousarray(w.data.transpose(0, 2, 3, 4, 1).reshape(c_out, -1))
    out_data = (wmat @ cols).reshape(c_out, ho, wo, do)
    flops = 2 * c_out * c_in * k ** 3 * ho * wo * do
    pad_shape = xp.shape
    if not w.requires_grad:
        cols = None

    def _bw(g):
        g2d = g.reshape(c_out, -1)
        if w.requires_grad:
            dw = (g2d @ cols.T).reshape(c_out, k, k, k, c_in)
            w._accum(np.ascontiguousarray(dw.transpose(0, 4, 1, 2, 3)))
        if x.requires_grad:
            dcols = wmat.T @ g2d
            buf = np.zeros(pad_shape, dtype=g.dtype)
            for i, (a, b, cc) in enumerate(_offsets(k)):
                buf[
                    :,
                    a : a + stride * ho : stride,
                    b : b + stride * wo : stride,
                    cc : cc + stride * do : stride,
                ] += dcols[i * c_in : (i + 1) * c_in].reshape(c_in, ho, wo, do)
            if padding:
                buf = buf[:, padding:-padding, padding:-padding, padding:-padding]
            x._accum(np.ascontiguousarray(buf))

    return Tensor._from_op(out_data, (x, w), _bw, "conv3d", flops)


def conv3d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    _require_same_dtype(x, w, "conv3d")
    if x.data.ndim != 4 or w.data.ndim != 5:
        raise ShapeError(f"conv3d: expected x (C,H,W,D) and w (Co,Ci,k,k,k), got {x.shape}, {w.shape}")
    c_out, c_in, k, k2, k3 = w.shape
    if k != k2 or k != k3:
        raise ShapeError(f"conv3d: non-cubic kernel {w.shape}")
    if x.shape[0] != c_in:
        raise ShapeError(f"conv3d: input channels {x.shape[0]} != weight channels {c_in}")
    if stride < 1:
        raise ShapeError(f"conv3d: stride must be >= 1, got {stride}")
    outs = []
    for ax, ext in enumerate(x.shape[1:]):
        if ext + 2 * padding < k:
            raise ShapeError(
                f"conv3d: kernel {k} larger than padded extent {ext + 2 * padding} on axis {ax}"
            )
        outs.append((ext + 2 * padding - k) // stride + 1)
    if stride == 1 and padding <= k - 1:
        return _conv3d_stride1(x, w, padding, tuple(outs))
    return _conv3d_general(x, w, stride, padding, tuple(outs))


def conv_transpose3d(x: Tensor, w: Tensor, stride: int = 1) -> Tensor:
    """Adjoint of conv3d: input (C_out, h, w, d) -> output (C_in, (h-1)s + k, ...)."""
    _require_same_dtype(x, w, "conv_transpose3d")
    if x.data.ndim != 4 or w.data.ndim != 5:
        raise ShapeError(
            f"conv_transpose3d: expected x (C,H,W,D) and w (Co,Ci,k,k,k), got {x.shape}, {w.shape}"
        )
    c_out, c_in, k, k2, k3 = w.shape
    if k != k2 or k != k3:
        raise ShapeError(f"conv_transpose3d: non-cubic kernel {w.shape}")
    if x.shape[0] != c_out:
        raise ShapeError(
            f"conv_transpose3d: input channels {x.shape[0]} != weight out-channels {c_out}"
        )
    h, ww, d = x.shape[1:]
    out_ext = tuple((e - 1) * stride + k for e in (h, ww, d))
    x2d = x.data.reshape(c_out, -1)
    out_data = np.zeros((c_in,) + out_ext, dtype=x.data.dtype)
    for a, b, cc in _offsets(k):
        out_data[
            :,
            a : a + stride * h : stride,
            b : b + stride * ww : stride,
            cc : cc + stride * d : stride,
        ] += (w.data[:, :, a, b, cc].T @ x2d).reshape(c_in, h, ww, d)
    flops = 2 * c_out * c_in * k ** 3 * h * ww * d

    def _bw(g):
        dx2d = np.zeros_like(x2d) if x.requires_grad else None
        dw = np.zeros_like(w.data) if w.requires_grad else None
        for a, b, cc in _offsets(k):
            gs = np.ascontiguousarray(
                g[
                    :,
                    a : a + stride * h : stride,
                    b : b + stride * ww : stride,
                    cc : cc + stride * d : stride,
                ]
            ).reshape(c_in, -1)
            if dx2d is not None:
                dx2d += w.data[:, :, a, b, cc] @ gs
            if dw is not None:
                dw[:, :, a, b, cc] = x2d @ gs.T
        if dw is not None:
            w._accum(dw)
        if dx2d is not None:
            x._accum(dx2d.reshape(x.shape))

    return Tensor._from_op(out_data, (x, w), _bw, "conv_transpose3d", flops)
