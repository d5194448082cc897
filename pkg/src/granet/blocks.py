"""Building blocks: dense block, region-aware non-local block, merging block.

Blocks are plain functions of ``(input, config, weights, prefix)``. Weights
live in a flat ``{name: Tensor}`` map; ``prefix`` selects the block's entries
(``<prefix>.<layer>.weight`` / ``<prefix>.<layer>.bias``).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, MutableMapping, Optional

import numpy as np

from .tensor import (
    ShapeError,
    Tensor,
    add,
    concat,
    concat_channels,
    conv2d,
    matmul,
    relu,
    reshape,
    scalar_scale,
    softmax,
    transpose,
)

Params = MutableMapping[str, Tensor]


@dataclass(frozen=True)
class DenseBlockConfig:
    in_channels: int
    out_channels: int
    growth_channels: int = 16
    num_layers: int = 4

    def __post_init__(self):
        if self.in_channels < 1 or self.out_channels < 1 or self.growth_channels < 1:
            raise ValueError(f"dense block channel counts must be >= 1: {self}")
        if self.num_layers < 0:
            raise ValueError(f"num_layers must be >= 0, got {self.num_layers}")

    @property
    def concat_channels(self) -> int:
        return self.in_channels + self.num_layers * self.growth_channels


@dataclass(frozen=True)
class RegionGrid:
    rows: int
    cols: int

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise ValueError(f"region grid must be at least 1x1, got {self.rows}x{self.cols}")

    @classmethod
    def parse(cls, text: str) -> "RegionGrid":
        r, _, c = text.strip().lower().partition("x")
        return cls(int(r), int(c or r))

    def __str__(self) -> str:
        return f"{self.rows}x{self.cols}"


@dataclass(frozen=True)
class RABlockConfig:
    channels: int
    grid: RegionGrid = RegionGrid(1, 1)
    embed_channels: Optional[int] = None

    def __post_init__(self):
        if self.embed_channels is None:
            object.__setattr__(self, "embed_channels", max(1, self.channels // 2))
        if self.embed_channels < 1:
            raise ValueError("embed_channels must be >= 1")


@dataclass(frozen=True)
class MergingConfig:
    k: int
    in_channels: int

    def __post_init__(self):
        if self.k < 1:
            raise ValueError(f"merging factor k must be >= 1, got {self.k}")
        if self.in_channels % self.k:
            raise ValueError(f"merging block: {self.in_channels} channels are not divisible by k={self.k}")

    @property
    def out_channels(self) -> int:
        return self.in_channels // self.k


# --------------------------------------------------------------------------
# parameter initialisation
# --------------------------------------------------------------------------


def init_conv(params: Params, name: str, c_out: int, c_in: int, k: int, rng: np.random.Generator, dtype=np.float32):
    """Zero-mean uniform weights with variance 2 / fan_in, zero bias."""
    fan_in = c_in * k * k
    bound = np.sqrt(6.0 / fan_in)
    params[f"{name}.weight"] = Tensor(rng.uniform(-bound, bound, size=(c_out, c_in, k, k)).astype(dtype), requires_grad=True)
    params[f"{name}.bias"] = Tensor(np.zeros(c_out, dtype=dtype), requires_grad=True)


def apply_conv(x: Tensor, weights: Mapping[str, Tensor], name: str) -> Tensor:
    return conv2d(x, weights[f"{name}.weight"], weights.get(f"{name}.bias"))


def init_dense_block(params: Params, prefix: str, cfg: DenseBlockConfig, rng, dtype=np.float32) -> None:
    width = cfg.in_channels
    for t in range(cfg.num_layers):
        init_conv(params, f"{prefix}.layer{t}", cfg.growth_channels, width, 3, rng, dtype)
        width += cfg.growth_channels
    init_conv(params, f"{prefix}.transition", cfg.out_channels, width, 1, rng, dtype)


def init_ra_block(params: Params, prefix: str, cfg: RABlockConfig, rng, dtype=np.float32) -> None:
    for proj in ("theta", "phi", "g"):
        init_conv(params, f"{prefix}.{proj}", cfg.embed_channels, cfg.channels, 1, rng, dtype)
    init_conv(params, f"{prefix}.z", cfg.channels, cfg.embed_channels, 1, rng, dtype)


# --------------------------------------------------------------------------
# dense block
# --------------------------------------------------------------------------


def dense_block(x: Tensor, cfg: DenseBlockConfig, weights: Mapping[str, Tensor], prefix: str) -> Tensor:
    """Densely connected 3x3 conv+ReLU layers followed by a 1x1 transition.

    Layer t sees the concatenation of the block input and the outputs of
    layers 0..t-1. The transition is linear.
    """
    if x.shape[1] != cfg.in_channels:
        raise ShapeError(f"dense block {prefix}: input has {x.shape[1]} channels, expected {cfg.in_channels}")
    features = [x]
    for t in range(cfg.num_layers):
        inp = features[0] if len(features) == 1 else concat_channels(features)
        features.append(relu(apply_conv(inp, weights, f"{prefix}.layer{t}")))
    inp = features[0] if len(features) == 1 else concat_channels(features)
    return apply_conv(inp, weights, f"{prefix}.transition")


# --------------------------------------------------------------------------
# region-aware non-local block
# --------------------------------------------------------------------------


def _split(n: int, parts: int) -> list[tuple[int, int]]:
    base = n // parts
    edges = [i * base for i in range(parts)] + [n]
    return list(zip(edges[:-1], edges[1:]))


def region_partition(h: int, w: int, grid: RegionGrid) -> list[tuple[int, int, int, int]]:
    """Tiles ``(row0, row1, col0, col1)`` in row-major order.

    Tiles are floor(h / rows) tall except the last row, which takes the
    remainder; widths follow the same rule.
    """
    if h < grid.rows or w < grid.cols:
        raise ValueError(f"region grid {grid} is larger than the {h}x{w} feature map")
    return [(r0, r1, c0, c1) for r0, r1 in _split(h, grid.rows) for c0, c1 in _split(w, grid.cols)]


def _tile_attention(theta: Tensor, phi: Tensor, g: Tensor) -> tuple[Tensor, Tensor]:
    # theta, phi, g: (b, e, P) -> y (b, e, P), attention (b, P, P)
    aff = matmul(transpose(theta, (0, 2, 1)), phi)
    att = softmax(aff, axis=-1)
    y = matmul(att, transpose(g, (0, 2, 1)))
    return transpose(y, (0, 2, 1)), att


def _regional_nonlocal(theta: Tensor, phi: Tensor, g: Tensor, grid: RegionGrid) -> tuple[Tensor, list]:
    n, e, h, w = theta.shape
    R, C = grid.rows, grid.cols
    if h % R == 0 and w % C == 0:
        th, tw = h // R, w // C

        def tiles(t: Tensor) -> Tensor:
            t = reshape(t, (n, e, R, th, C, tw))
            t = transpose(t, (0, 2, 4, 1, 3, 5))
            return reshape(t, (n * R * C, e, th * tw))

        y, att = _tile_attention(tiles(theta), tiles(phi), tiles(g))
        y = reshape(y, (n, R, C, e, th, tw))
        y = transpose(y, (0, 3, 1, 4, 2, 5))
        return reshape(y, (n, e, h, w)), [att.data[i::R * C] for i in range(R * C)]

    rows, maps = [], []
    for r0, r1 in _split(h, R):
        row = []
        for c0, c1 in _split(w, C):
            p = (r1 - r0) * (c1 - c0)
            parts = [reshape(t[:, :, r0:r1, c0:c1], (n, e, p)) for t in (theta, phi, g)]
            y, att = _tile_attention(*parts)
            row.append(reshape(y, (n, e, r1 - r0, c1 - c0)))
            maps.append(att.data)
        rows.append(row[0] if len(row) == 1 else concat(row, axis=3))
    return (rows[0] if len(rows) == 1 else concat(rows, axis=2)), maps


def ra_block(
    x: Tensor,
    cfg: RABlockConfig,
    weights: Mapping[str, Tensor],
    prefix: str,
    residual: bool = True,
    return_attention: bool = False,
):
    """Non-local attention restricted to the tiles of ``cfg.grid``.

    Inside each tile, position i attends to every position j of the same
    tile with weight softmax_j(theta(x_i) . phi(x_j)) and gathers g(x_j).
    The result is projected back by a 1x1 conv ``z`` and, by default,
    added to the input.
    """
    if x.shape[1] != cfg.channels:
        raise ShapeError(f"RA block {prefix}: input has {x.shape[1]} channels, expected {cfg.channels}")
    region_partition(x.shape[2], x.shape[3], cfg.grid)
    theta = apply_conv(x, weights, f"{prefix}.theta")
    phi = apply_conv(x, weights, f"{prefix}.phi")
    g = apply_conv(x, weights, f"{prefix}.g")
    y, maps = _regional_nonlocal(theta, phi, g, cfg.grid)
    out = apply_conv(y, weights, f"{prefix}.z")
    if residual:
        out = add(x, out)
    return (out, maps) if return_attention else out


# --------------------------------------------------------------------------
# merging block
# --------------------------------------------------------------------------


def merging_block(x: Tensor, cfg: MergingConfig) -> Tensor:
    """Average k contiguous channel groups: out[c] = mean_i x[i*C' + c]."""
    c = x.shape[1]
    if c % cfg.k:
        raise ShapeError(f"merging block: {c} channels are not divisible by k={cfg.k}")
    if c != cfg.in_channels:
        raise ShapeError(f"merging block: input has {c} channels, expected {cfg.in_channels}")
    if cfg.k == 1:
        return x
    width = c // cfg.k
    total = x[:, 0:width]
    for i in range(1, cfg.k):
        total = add(total, x[:, i * width:(i + 1) * width])
    return scalar_scale(total, 1.0 / cfg.k)
