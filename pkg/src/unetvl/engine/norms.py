"""Fused normalization ops with hand-derived backward rules."""

from __future__ import annotations

import numpy as np

from .tensor import ShapeError, Tensor, _require_same_dtype


def _normalize(x: Tensor, gamma: Tensor, beta: Tensor, axes: tuple, gshape: tuple, eps: float, op: str):
    """Normalize over ``axes`` then apply the affine (gamma, beta).

    gamma/beta are stored flat and broadcast through ``gshape``.
    For y = xhat * gamma + beta with xhat = (x - mu) * istd:
        dx = istd * gamma_b * (dy - mean(dy) - xhat * mean(dy * xhat))
    where the means run over the normalized axes.
    """
    _require_same_dtype(x, gamma, op)
    _require_same_dtype(x, beta, op)
    xd = x.data
    mu = xd.mean(axis=axes, keepdims=True)
    var = ((xd - mu) ** 2).mean(axis=axes, keepdims=True)
    istd = 1.0 / np.sqrt(var + np.array(eps, dtype=xd.dtype))
    xhat = (xd - mu) * istd
    gb = gamma.data.reshape(gshape)
    bb = beta.data.reshape(gshape)
    out_data = xhat * gb + bb
    count = 1
    for ax in axes:
        count *= xd.shape[ax]
    # Axes that gamma is broadcast over (everything not in its own extent).
    reduce_for_affine = tuple(i for i in range(xd.ndim) if gshape[i] == 1)

    def _bw(g):
        gamma._accum((g * xhat).sum(axis=reduce_for_affine).reshape(gamma.shape))
        beta._accum(g.sum(axis=reduce_for_affine).reshape(beta.shape))
        gg = g * gb
        m1 = gg.mean(axis=axes, keepdims=True)
        m2 = (gg * xhat).mean(axis=axes, keepdims=True)
        x._accum(istd * (gg - m1 - xhat * m2))

    flops = 8 * xd.size
    return Tensor._from_op(out_data, (x, gamma, beta), _bw, op, flops)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    k = x.shape[-1]
    if gamma.shape != (k,) or beta.shape != (k,):
        raise ShapeError(
            f"layer_norm: gamma/beta shapes {gamma.shape}/{beta.shape} do not match last axis {k}"
        )
    axes = (x.data.ndim - 1,)
    gshape = (1,) * (x.data.ndim - 1) + (k,)
    return _normalize(x, gamma, beta, axes, gshape, eps, "layer_norm")


def instance_norm3d(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-channel normalization over the spatial axes of a (C, H, W, D) map."""
    if x.data.ndim != 4:
        raise ShapeError(f"instance_norm3d expects (C, H, W, D), got {x.shape}")
    c = x.shape[0]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(
            f"instance_norm3d: gamma/beta shapes {gamma.shape}/{beta.shape} do not match channels {c}"
        )
    return _normalize(x, gamma, beta, (1, 2, 3), (c, 1, 1, 1), eps, "instance_norm3d")
