"""Full segmentation model: encoder taps -> 3D grids -> CNN decoder -> logits.

Decoder layout (UNETR lineage): the deepest tap enters at patch-grid
resolution; each stage is a stride-2 transposed conv followed by skip
concatenation and two conv+norm+activation blocks. The tap merged at stage s
is upsampled by s (deconv + conv) units, i.e. its distance from the
bottleneck; a conv stem on the raw input joins the final full-resolution
merge. Stage widths are {K, K/2, K/4, ...} clamped below at 16.
"""

from __future__ import annotations

import numpy as np

from .config import UNETVLConfig
from .engine import (
    ShapeError,
    Tensor,
    concat,
    conv3d,
    conv_transpose3d,
    instance_norm3d,
    leaky_relu,
    reshape,
)
from .encoder import Encoder, PatchEmbed3D, patchify
from .module import Module, child_rng, init_ones, init_weight, init_zeros


def tokens_to_grid(tokens: Tensor, grid: tuple[int, int, int]) -> Tensor:
    """(N, K) -> (K, gh, gw, gd), inverting the patch raster order."""
    gh, gw, gd = grid
    n, k = tokens.shape
    if n != gh * gw * gd:
        raise ShapeError(f"tokens_to_grid: {n} tokens do not fill grid {grid}")
    x = reshape(tokens, (gh, gw, gd, k))
    return x.transpose((3, 0, 1, 2))


def grid_to_tokens(grid_tensor: Tensor) -> Tensor:
    """Inverse of tokens_to_grid."""
    k, gh, gw, gd = grid_tensor.shape
    return reshape(grid_tensor.transpose((1, 2, 3, 0)), (gh * gw * gd, k))


class ConvUnit(Module):
    """conv3d(k=3, pad=1) + instance norm + leaky relu."""

    def __init__(self, in_ch: int, out_ch: int, prng=None, dtype="f32"):
        self.w = init_weight(prng, (out_ch, in_ch, 3, 3, 3), dtype)
        self.gamma = init_ones((out_ch,), dtype)
        self.beta = init_zeros((out_ch,), dtype)

    def forward(self, x: Tensor) -> Tensor:
        return leaky_relu(instance_norm3d(conv3d(x, self.w, 1, 1), self.gamma, self.beta))


class StemUnit(Module):
    """One upsampling unit of a tap stem: stride-2 deconv then a conv block."""

    def __init__(self, in_ch: int, out_ch: int, prng=None, dtype="f32"):
        self.deconv = init_weight(prng, (in_ch, out_ch, 2, 2, 2), dtype)
        self.conv = ConvUnit(out_ch, out_ch, prng=child_rng(prng, "conv"), dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return self.conv(conv_transpose3d(x, self.deconv, 2))


class TapStem(Module):
    """Upsamples a tap grid to the scale where the decoder consumes it."""

    def __init__(self, in_ch: int, out_ch: int, n_units: int, prng=None, dtype="f32"):
        self.units = [
            StemUnit(in_ch if i == 0 else out_ch, out_ch, prng=child_rng(prng, "unit", i), dtype=dtype)
            for i in range(n_units)
        ]

    def forward(self, x: Tensor) -> Tensor:
        for unit in self.units:
            x = unit(x)
        return x


class DecoderStage(Module):
    """Stride-2 upsample, concatenate skips, and refine with two conv blocks."""

    def __init__(self, in_ch: int, out_ch: int, skip_ch: int, prng=None, dtype="f32"):
        self.deconv = init_weight(prng, (in_ch, out_ch, 2, 2, 2), dtype)
        self.conv1 = ConvUnit(out_ch + skip_ch, out_ch, prng=child_rng(prng, "c1"), dtype=dtype)
        self.conv2 = ConvUnit(out_ch, out_ch, prng=child_rng(prng, "c2"), dtype=dtype)

    def forward(self, x: Tensor, skips: list[Tensor]) -> Tensor:
        x = conv_transpose3d(x, self.deconv, 2)
        if skips:
            x = concat([x] + skips, axis=0)
        return self.conv2(self.conv1(x))


class OutputHead(Module):
    """1x1x1 conv to per-class logits."""

    def __init__(self, in_ch: int, num_classes: int, prng=None, dtype="f32"):
        self.w = init_weight(prng, (num_classes, in_ch, 1, 1, 1), dtype)
        self.b = init_zeros((num_classes,), dtype)

    def forward(self, x: Tensor) -> Tensor:
        logits = conv3d(x, self.w)
        return logits + reshape(self.b, (self.b.shape[0], 1, 1, 1))


class UNETVL(Module):
    """Patch embed -> bidirectional memory encoder -> tap stems -> CNN decoder.

    Construct with ``prng=None`` for zero-initialized weights (cheap when only
    parameter counts are needed).
    """

    def __init__(self, config: UNETVLConfig, prng=None, dtype="f32"):
        config.validate()
        self._config = config
        self._dtype = dtype
        n_stages = config.decoder_stages()
        k = config.embed_dim
        taps = list(config.taps)
        n_taps = len(taps)
        widths = [max(k // (1 << (s - 1)), 16) for s in range(1, n_stages + 1)]

        self.embed = PatchEmbed3D(config, prng=child_rng(prng, "embed"), dtype=dtype)
        self.encoder = Encoder(config, prng=child_rng(prng, "encoder"), dtype=dtype)

        # stage s (1-based) merges the tap at distance s from the bottleneck
        self._stage_tap = {}
        self.stems = []
        for s in range(1, n_stages + 1):
            tap_pos = n_taps - 1 - s  # index into taps[] for the skip at stage s
            if tap_pos >= 0:
                self._stage_tap[s] = taps[tap_pos]
                self.stems.append(
                    TapStem(k, widths[s - 1], s, prng=child_rng(prng, "stem", s), dtype=dtype)
                )
        self.input_stem = ConvUnit(
            config.in_channels, widths[-1], prng=child_rng(prng, "input_stem"), dtype=dtype
        )
        self.stages = []
        for s in range(1, n_stages + 1):
            in_ch = k if s == 1 else widths[s - 2]
            skip_ch = (widths[s - 1] if s in self._stage_tap else 0) + (
                widths[-1] if s == n_stages else 0
            )
            self.stages.append(
                DecoderStage(in_ch, widths[s - 1], skip_ch, prng=child_rng(prng, "stage", s), dtype=dtype)
            )
        self.head = OutputHead(widths[-1], config.num_classes, prng=child_rng(prng, "head"), dtype=dtype)

    @property
    def config(self) -> UNETVLConfig:
        return self._config

    @property
    def dtype(self) -> str:
        return self._dtype

    def forward(self, volume: Tensor, chunk_size: int | None = None) -> Tensor:
        cfg = self._config
        expect = (cfg.in_channels, cfg.h, cfg.w, cfg.d)
        if volume.shape != expect:
            raise ShapeError(f"model forward: expected volume {expect}, got {volume.shape}")
        tokens = self.embed(patchify(volume, cfg.patch))
        taps = self.encoder.forward(tokens, chunk_size=chunk_size)
        return self.decode(taps, volume)

    def decode(self, taps: dict[int, Tensor], volume: Tensor) -> Tensor:
        """Decoder path from encoder taps (+ raw volume for the input stem)."""
        cfg = self._config
        grid = cfg.grid
        bottleneck = taps[cfg.taps[-1]]
        x = tokens_to_grid(bottleneck, grid)
        n_stages = len(self.stages)
        stem_iter = iter(self.stems)
        for s, stage in enumerate(self.stages, start=1):
            try:
                skips = []
                if s in self._stage_tap:
                    stem = next(stem_iter)
                    skips.append(stem(tokens_to_grid(taps[self._stage_tap[s]], grid)))
                if s == n_stages:
                    skips.append(self.input_stem(volume))
                x = stage(x, skips)
            except ShapeError as err:
                raise ShapeError(f"decoder stage {s}: {err}") from None
        logits = self.head(x)
        expect = (cfg.num_classes, cfg.h, cfg.w, cfg.d)
        if logits.shape != expect:
            raise ShapeError(f"head produced {logits.shape}, expected {expect}")
        return logits


def count_parameters(model: UNETVL) -> tuple[dict[str, int], int]:
    """Learnable-scalar counts grouped by component, plus the total."""
    groups = {"embed": 0, "encoder": 0, "projections": 0, "decoder": 0}
    for name, t in model.named_parameters():
        if name.startswith("embed."):
            groups["embed"] += t.size
        elif name.startswith("encoder."):
            if ".up_proj." in name or ".down_proj." in name:
                groups["projections"] += t.size
            else:
                groups["encoder"] += t.size
        else:
            groups["decoder"] += t.size
    return groups, sum(groups.values())


def parameter_table(model: UNETVL) -> str:
    groups, total = count_parameters(model)
    width = max(len(k) for k in groups)
    lines = [f"{name.ljust(width)}  {count:>12,}" for name, count in groups.items()]
    lines.append(f"{'total'.ljust(width)}  {total:>12,}")
    return "\n".join(lines)
