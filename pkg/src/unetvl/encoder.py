"""3D patch tokenization and the bidirectional matrix-memory encoder.

Sequence convention ("top-left to bottom-right"): patches are rastered
height-major, then width, then depth (depth varies fastest). Backward blocks
are flip(core(flip(x))) of the forward computation with their own weights.

The memory cell keeps, per head, a d x d matrix C, a d-vector normalizer n
and a scalar stabilizer m. Mathematically the update is

    i_t = exp(i~_t)   f_t = exp(f~_t)
    C_t = f_t C_{t-1} + i_t v_t k_t^T      n_t = f_t n_{t-1} + i_t k_t
    h_t = sigmoid(o~_t) * (C_t q_t) / max(|n_t . q_t|, 1)

computed here in log-stabilized form: m_t = max(f~_t + m_{t-1}, i~_t), gates
exp(f~_t + m_{t-1} - m_t) and exp(i~_t - m_t), and normalizer floor
exp(-m_t), which evaluates the same function without overflow (state scales
by exp(-m_t), so the floor condition matches |n.q| vs 1 exactly).
"""

from __future__ import annotations

import numpy as np

from .config import UNETVLConfig
from .engine import (
    NonFiniteError,
    ShapeError,
    Tensor,
    concat,
    cummax,
    cumsum,
    einsum,
    exp,
    layer_norm,
    matmul,
    maximum,
    narrow,
    reshape,
    sigmoid,
    silu,
    stack,
)
from .kan import make_projection
from .module import Module, child_rng, init_weight, init_zeros, init_ones

_MASK_FILL = -1e30  # exp() underflows to exactly 0.0


def _axis_name(i: int) -> str:
    return ("height", "width", "depth")[i]


def patchify(volume: Tensor, patch) -> Tensor:
    """(C, H, W, D) -> (N, C * ph * pw * pd), losslessly, in raster order."""
    if isinstance(patch, int):
        patch = (patch, patch, patch)
    if volume.data.ndim != 4:
        raise ShapeError(f"patchify expects (C, H, W, D), got {volume.shape}")
    c = volume.shape[0]
    exts = volume.shape[1:]
    for i, (ext, p) in enumerate(zip(exts, patch)):
        if p < 1 or ext % p != 0:
            raise ShapeError(f"{_axis_name(i)} extent {ext} not divisible by patch {p}")
    gh, gw, gd = (e // p for e, p in zip(exts, patch))
    ph, pw, pd = patch
    x = reshape(volume, (c, gh, ph, gw, pw, gd, pd))
    x = x.transpose((1, 3, 5, 0, 2, 4, 6))  # (gh, gw, gd, C, ph, pw, pd)
    return reshape(x, (gh * gw * gd, c * ph * pw * pd))


def unpatchify(tokens: Tensor, channels: int, extents, patch) -> Tensor:
    """Exact inverse of patchify."""
    if isinstance(patch, int):
        patch = (patch, patch, patch)
    gh, gw, gd = (e // p for e, p in zip(extents, patch))
    ph, pw, pd = patch
    x = reshape(tokens, (gh, gw, gd, channels, ph, pw, pd))
    x = x.transpose((3, 0, 4, 1, 5, 2, 6))  # (C, gh, ph, gw, pw, gd, pd)
    return reshape(x, (channels, gh * ph, gw * pw, gd * pd))


class PatchEmbed3D(Module):
    """Linear projection of flattened patches plus learnable positions."""

    def __init__(self, config: UNETVLConfig, prng=None, dtype="f32"):
        ph, pw, pd = config.patch
        self.patch = config.patch
        self.row_width = config.in_channels * ph * pw * pd
        self.num_tokens = config.num_tokens
        self.weight = init_weight(prng, (self.row_width, config.embed_dim), dtype)
        self.pos = init_weight(child_rng(prng, "pos"), (self.num_tokens, config.embed_dim), dtype)

    def forward(self, patches: Tensor) -> Tensor:
        if patches.data.ndim != 2 or patches.shape[1] != self.row_width:
            raise ShapeError(
                f"embed: expected (N, {self.row_width}), got {patches.shape}"
            )
        if patches.shape[0] != self.num_tokens:
            raise ShapeError(
                f"embed: expected {self.num_tokens} tokens, got {patches.shape[0]}"
            )
        return matmul(patches, self.weight) + self.pos


# ---------------------------------------------------------------------------
# matrix-memory recurrence
# ---------------------------------------------------------------------------


def _check_state(m: Tensor, step: int) -> None:
    if not np.isfinite(m.data).all():
        raise NonFiniteError(f"memory stabilizer became non-finite at step {step}")


def _recurrent_step(state, q_t, k_t, v_t, ipre_t, fpre_t, step: int):
    """One stabilized update. state = (C, n, m) or None at t = 0."""
    if state is None:
        m_new = ipre_t
        i_act = exp(ipre_t - m_new)  # exactly 1: the first write is unit-normalized
        c_new = reshape(i_act, i_act.shape + (1, 1)) * einsum("hv,hk->hvk", v_t, k_t)
        n_new = reshape(i_act, i_act.shape + (1,)) * k_t
    else:
        c_prev, n_prev, m_prev = state
        m_new = maximum(fpre_t + m_prev, ipre_t)
        f_act = exp(fpre_t + m_prev - m_new)
        i_act = exp(ipre_t - m_new)
        outer = einsum("hv,hk->hvk", v_t, k_t)
        c_new = reshape(f_act, f_act.shape + (1, 1)) * c_prev + reshape(
            i_act, i_act.shape + (1, 1)
        ) * outer
        n_new = reshape(f_act, f_act.shape + (1,)) * n_prev + reshape(
            i_act, i_act.shape + (1,)
        ) * k_t
    _check_state(m_new, step)
    return c_new, n_new, m_new


def _read_state(c, n, m, q_t, osig_t):
    cq = einsum("hvk,hk->hv", c, q_t)
    nq = einsum("hk,hk->h", n, q_t)
    denom = maximum(nq.abs(), exp(-m))
    return osig_t * (cq / reshape(denom, denom.shape + (1,)))


def mlstm_sequence(q: Tensor, k: Tensor, v: Tensor, ipre: Tensor, fpre: Tensor, osig: Tensor) -> Tensor:
    """Sequential recurrence over (N, heads, d) projections.

    ``ipre``/``fpre`` are (N, heads) gate preactivations; ``osig`` is the
    already-sigmoided output gate (N, heads, d). Starts from the zero state.
    Returns hidden states (N, heads, d).
    """
    n_steps = q.shape[0]
    state = None
    hs = []
    for t in range(n_steps):
        state = _recurrent_step(state, q.row(t), k.row(t), v.row(t), ipre.row(t), fpre.row(t), t)
        hs.append(_read_state(*state, q.row(t), osig.row(t)))
    return stack(hs, axis=0)


def mlstm_chunkwise(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    ipre: Tensor,
    fpre: Tensor,
    osig: Tensor,
    chunk_size: int,
) -> Tensor:
    """Chunk-parallel evaluation, numerically equivalent to the sequential path.

    Within a chunk the per-step stabilizers, decay matrix and outputs are
    batched matrix ops; only the (C, n, m) carry crosses chunk boundaries.
    Length-1 chunks reuse the sequential step verbatim, so chunk_size == 1 is
    bitwise identical to ``mlstm_sequence``.
    """
    if chunk_size < 1:
        raise ShapeError(f"chunk_size must be >= 1, got {chunk_size}")
    n_steps, heads, d = q.shape
    state = None
    outputs = []
    start = 0
    while start < n_steps:
        length = min(chunk_size, n_steps - start)
        if length == 1:
            state = _recurrent_step(
                state, q.row(start), k.row(start), v.row(start),
                ipre.row(start), fpre.row(start), start,
            )
            outputs.append(reshape(_read_state(*state, q.row(start), osig.row(start)), (1, heads, d)))
        else:
            qc = narrow(q, 0, start, length)
            kc = narrow(k, 0, start, length)
            vc = narrow(v, 0, start, length)
            ic = narrow(ipre, 0, start, length)
            fc = narrow(fpre, 0, start, length)
            oc = narrow(osig, 0, start, length)

            fcum = cumsum(fc, 0)                  # F_s = sum of forget preacts
            a = ic - fcum                         # i~_r - F_r
            run = cummax(a, 0)
            if state is None:
                mvals = fcum + run
            else:
                _, _, m_in = state
                mvals = fcum + maximum(run, m_in)
            _check_state(mvals, start + length - 1)

            # D[s, r] = exp(a_r + F_s - m_s) for r <= s (0 elsewhere).
            dt = q.data.dtype
            tri = np.tril(np.ones((length, length), dtype=dt))[:, :, None]
            log_d = reshape(a, (1, length, heads)) + reshape(fcum - mvals, (length, 1, heads))
            log_d = log_d * Tensor(tri) + Tensor(_MASK_FILL * (1.0 - tri))
            decay = exp(log_d)                    # (s, r, heads)
            scores = einsum("shd,rhd->srh", qc, kc)
            ds = decay * scores
            num = einsum("srh,rhv->shv", ds, vc)
            nq = ds.sum(axis=1)                   # (s, heads)
            if state is not None:
                c_in, n_in, m_in = state
                bvals = exp((fcum - mvals) + m_in)
                num = num + reshape(bvals, (length, heads, 1)) * einsum("shk,hvk->shv", qc, c_in)
                nq = nq + bvals * einsum("shk,hk->sh", qc, n_in)
            denom = maximum(nq.abs(), exp(-mvals))
            outputs.append(oc * (num / reshape(denom, (length, heads, 1))))

            # carry: scale everything to the chunk-final stabilizer
            m_last = mvals.row(length - 1)
            f_last = fcum.row(length - 1)
            wts = exp(a + reshape(f_last - m_last, (1, heads)))   # (r, heads)
            c_intra = einsum("rhv,rhk->hvk", reshape(wts, (length, heads, 1)) * vc, kc)
            n_intra = einsum("rh,rhk->hk", wts, kc)
            if state is None:
                state = (c_intra, n_intra, m_last)
            else:
                b_last = exp((f_last - m_last) + m_in)
                state = (
                    reshape(b_last, (heads, 1, 1)) * c_in + c_intra,
                    reshape(b_last, (heads, 1)) * n_in + n_intra,
                    m_last,
                )
        start += length
    return concat(outputs, axis=0)


class MLSTMCell(Module):
    """Per-head affine q/k/v/o maps and scalar gates over a token sequence."""

    def __init__(self, inner_dim: int, head_dim: int, prng=None, dtype="f32"):
        if inner_dim % head_dim != 0:
            raise ShapeError(f"inner dim {inner_dim} not divisible by head dim {head_dim}")
        self.inner_dim = inner_dim
        self.head_dim = head_dim
        self.heads = inner_dim // head_dim
        h, d = self.heads, head_dim
        self.wq = init_weight(child_rng(prng, "q"), (h, d, d), dtype)
        self.bq = init_zeros((h, d), dtype)
        self.wk = init_weight(child_rng(prng, "k"), (h, d, d), dtype)
        self.bk = init_zeros((h, d), dtype)
        self.wv = init_weight(child_rng(prng, "v"), (h, d, d), dtype)
        self.bv = init_zeros((h, d), dtype)
        self.wo = init_weight(child_rng(prng, "o"), (h, d, d), dtype)
        self.bo = init_zeros((h, d), dtype)
        self.wi = init_weight(child_rng(prng, "i"), (h, d), dtype)
        self.bi = init_zeros((h,), dtype)
        self.wf = init_weight(child_rng(prng, "f"), (h, d), dtype)
        self.bf = init_zeros((h,), dtype)

    def _project(self, x: Tensor):
        n = x.shape[0]
        xh = reshape(x, (n, self.heads, self.head_dim))
        q = einsum("nhd,hde->nhe", xh, self.wq) + self.bq
        k = (einsum("nhd,hde->nhe", xh, self.wk) + self.bk) * (self.head_dim ** -0.5)
        v = einsum("nhd,hde->nhe", xh, self.wv) + self.bv
        ipre = einsum("nhd,hd->nh", xh, self.wi) + self.bi
        fpre = einsum("nhd,hd->nh", xh, self.wf) + self.bf
        osig = sigmoid(einsum("nhd,hde->nhe", xh, self.wo) + self.bo)
        return q, k, v, ipre, fpre, osig

    def forward(self, x: Tensor, chunk_size: int | None = None) -> Tensor:
        if x.data.ndim != 2 or x.shape[1] != self.inner_dim:
            raise ShapeError(f"mlstm: expected (N, {self.inner_dim}), got {x.shape}")
        q, k, v, ipre, fpre, osig = self._project(x)
        if chunk_size is None:
            h = mlstm_sequence(q, k, v, ipre, fpre, osig)
        else:
            h = mlstm_chunkwise(q, k, v, ipre, fpre, osig, chunk_size)
        return reshape(h, (x.shape[0], self.inner_dim))

    def state_bytes(self, dtype="f32") -> int:
        """Inference-time recurrent state footprint: heads * (d^2 + d + 1)."""
        item = 4 if dtype == "f32" else 8
        return self.heads * (self.head_dim * self.head_dim + self.head_dim + 1) * item


FORWARD = "forward"
BACKWARD = "backward"


class ViLBlock(Module):
    """Pre-norm residual block: up-project, memory mix, gate, down-project.

    The up-projected sequence feeds both the memory branch and a silu gate:
    out = x + down(silu(u) * mlstm(u)) with u = up(norm(x)). Backward-scan
    blocks conjugate the whole core with sequence flips.
    """

    def __init__(self, config: UNETVLConfig, direction: str, prng=None, dtype="f32"):
        if direction not in (FORWARD, BACKWARD):
            raise ValueError(f"direction must be forward|backward, got {direction!r}")
        self.direction = direction
        self.embed_dim = config.embed_dim
        k, inner = config.embed_dim, config.inner_dim
        self.gamma = init_ones((k,), dtype)
        self.beta = init_zeros((k,), dtype)
        self.up_proj = make_projection(
            config.projection, k, inner, degree=config.degree,
            prng=child_rng(prng, "up"), dtype=dtype,
        )
        self.cell = MLSTMCell(inner, config.head_dim, prng=child_rng(prng, "cell"), dtype=dtype)
        self.down_proj = make_projection(
            config.projection, inner, k, degree=config.degree,
            prng=child_rng(prng, "down"), dtype=dtype,
        )

    def _core(self, tokens: Tensor, chunk_size: int | None) -> Tensor:
        u = self.up_proj(layer_norm(tokens, self.gamma, self.beta))
        h = self.cell.forward(u, chunk_size=chunk_size)
        return tokens + self.down_proj(silu(u) * h)

    def forward(self, tokens: Tensor, chunk_size: int | None = None) -> Tensor:
        if tokens.data.ndim != 2 or tokens.shape[1] != self.embed_dim:
            raise ShapeError(f"vil block: expected (N, {self.embed_dim}), got {tokens.shape}")
        if self.direction == BACKWARD:
            return self._core(tokens.flip(0), chunk_size).flip(0)
        return self._core(tokens, chunk_size)


class Encoder(Module):
    """Stack of alternating-direction blocks with multi-scale taps."""

    def __init__(self, config: UNETVLConfig, prng=None, dtype="f32"):
        self.depth = config.depth
        self.taps = tuple(config.taps)
        if self.taps and self.taps[-1] > self.depth:
            raise ShapeError(f"tap {self.taps[-1]} exceeds depth {self.depth}")
        self.blocks = [
            ViLBlock(
                config,
                FORWARD if i % 2 == 0 else BACKWARD,
                prng=child_rng(prng, "block", i),
                dtype=dtype,
            )
            for i in range(config.depth)
        ]

    def forward(self, tokens: Tensor, chunk_size: int | None = None) -> dict[int, Tensor]:
        """Run all blocks; return {tap_index: tokens_after_that_block}."""
        taps: dict[int, Tensor] = {}
        x = tokens
        for i, block in enumerate(self.blocks, start=1):
            x = block.forward(x, chunk_size=chunk_size)
            if i in self.taps:
                taps[i] = x
        return taps
