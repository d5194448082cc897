"""The two-stage de-raining network.

The coarse stage predicts a signed 3-channel rain mask from a dense-block
encoder (max pooling with stored indices) and a region-aware decoder
(index-guided unpooling plus skip additions). The mask is subtracted from the
input, and the fine stage refines that coarse result with stacked dense
blocks whose outputs are fused by the merging block.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Iterator, Optional

import numpy as np

from . import config as kv
from .blocks import (
    DenseBlockConfig,
    MergingConfig,
    RABlockConfig,
    RegionGrid,
    apply_conv,
    dense_block,
    init_conv,
    init_dense_block,
    init_ra_block,
    merging_block,
    ra_block,
)
from .tensor import (
    PoolIndices,
    ShapeError,
    Tensor,
    absolute,
    add,
    concat_channels,
    gather_spatial,
    maxpool2d,
    maxunpool2d,
    mean_all,
    relu,
    sub,
)

__all__ = [
    "GraNetConfig",
    "GraNetWeights",
    "ForwardOutputs",
    "CropRecord",
    "pad_to_multiple",
    "crop",
    "coarse_forward",
    "residual_subtract",
    "fine_forward",
    "granet_forward",
    "mae_loss",
]


@dataclass(frozen=True)
class GraNetConfig:
    # encoder widths for levels 0..N-1
    coarse_channels: tuple[int, ...] = (32, 64, 128)
    # region grid of the RA block whose output is unpooled onto level i
    region_grids: tuple[RegionGrid, ...] = (RegionGrid(4, 4), RegionGrid(2, 2), RegionGrid(1, 1))
    fine_channels: int = 64
    fine_num_dense_blocks: int = 4
    merge_k: int = 4
    dense_growth: int = 16
    dense_layers: int = 4
    use_ra: bool = True
    use_fine: bool = True
    use_merge: bool = True
    fine_residual: bool = True
    # "zero" starts both output heads at 0 (network = identity); "kaiming" draws them like every other conv
    init_heads: str = "zero"

    def __post_init__(self):
        if self.init_heads not in ("zero", "kaiming"):
            raise ValueError(f"init_heads must be 'zero' or 'kaiming', got {self.init_heads!r}")
        if len(self.coarse_channels) < 1:
            raise ValueError("coarse_channels must list at least one level")
        if len(self.region_grids) != len(self.coarse_channels):
            raise ValueError(
                f"region_grids has {len(self.region_grids)} entries but there are {len(self.coarse_channels)} levels"
            )
        if min(self.coarse_channels) < 1 or self.fine_channels < 1 or self.fine_num_dense_blocks < 1:
            raise ValueError("channel and block counts must be >= 1")
        if self.use_fine and self.use_merge and self.merge_width % self.merge_k:
            raise ValueError(
                f"fine-stage skip concat width {self.merge_width} is not divisible by merge_k={self.merge_k}"
            )

    @property
    def levels(self) -> int:
        return len(self.coarse_channels)

    @property
    def pad_multiple(self) -> int:
        return 2 ** self.levels

    @property
    def merge_width(self) -> int:
        return self.fine_num_dense_blocks * self.fine_channels

    def coarse_dense(self, i: int) -> DenseBlockConfig:
        c_in = 3 if i == 0 else self.coarse_channels[i - 1]
        return DenseBlockConfig(c_in, self.coarse_channels[i], self.dense_growth, self.dense_layers)

    def fine_dense(self) -> DenseBlockConfig:
        return DenseBlockConfig(self.fine_channels, self.fine_channels, self.dense_growth, self.dense_layers)

    def ra(self, i: int, channels: int) -> RABlockConfig:
        return RABlockConfig(channels, self.region_grids[i])

    def to_lines(self) -> list[str]:
        return kv.to_lines(self, "model")

    def fingerprint(self) -> str:
        text = "\n".join(self.to_lines())
        return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


class GraNetWeights(dict):
    """Named parameters, ``stage.block.layer.kind`` -> Tensor."""

    @classmethod
    def initialize(cls, cfg: GraNetConfig, seed: int = 0, dtype=np.float32) -> "GraNetWeights":
        rng = np.random.default_rng(seed)
        w = cls()
        for i in range(cfg.levels):
            init_dense_block(w, f"coarse.down{i}", cfg.coarse_dense(i), rng, dtype)
        width = cfg.coarse_channels[-1]
        for i in reversed(range(cfg.levels)):
            if cfg.use_ra:
                init_ra_block(w, f"coarse.ra{i}", cfg.ra(i, width), rng, dtype)
            if width != cfg.coarse_channels[i]:
                init_conv(w, f"coarse.adapt{i}.conv", cfg.coarse_channels[i], width, 1, rng, dtype)
                width = cfg.coarse_channels[i]
        init_conv(w, "coarse.head.conv", 3, width, 3, rng, dtype)
        if cfg.use_fine:
            init_conv(w, "fine.stem.conv", cfg.fine_channels, 3, 3, rng, dtype)
            for b in range(cfg.fine_num_dense_blocks):
                init_dense_block(w, f"fine.dense{b}", cfg.fine_dense(), rng, dtype)
            if cfg.use_merge:
                merged = MergingConfig(cfg.merge_k, cfg.merge_width).out_channels
            else:
                merged = cfg.merge_width // cfg.merge_k if cfg.merge_width % cfg.merge_k == 0 else cfg.fine_channels
                init_conv(w, "fine.merge.conv", merged, cfg.merge_width, 1, rng, dtype)
            init_conv(w, "fine.head.conv", 3, merged, 3, rng, dtype)
        if cfg.init_heads == "zero":
            w.zero_heads()
        return w

    def parameters(self) -> Iterator[Tensor]:
        return iter(self.values())

    def zero_grads(self) -> None:
        for t in self.values():
            t.grad = None

    def num_parameters(self) -> int:
        return sum(t.data.size for t in self.values())

    def astype(self, dtype) -> "GraNetWeights":
        return GraNetWeights({k: Tensor(v.data.astype(dtype), requires_grad=True) for k, v in self.items()})

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.items()}

    def zero_heads(self) -> None:
        """Zero the mask and refinement heads so the network is the identity."""
        for name in ("coarse.head.conv", "fine.head.conv"):
            for kind in ("weight", "bias"):
                t = self.get(f"{name}.{kind}")
                if t is not None:
                    t.data[...] = 0


@dataclass
class ForwardOutputs:
    mask: Tensor
    coarse_result: Tensor
    final: Tensor
    pool_indices: list = field(default_factory=list, repr=False)


@dataclass(frozen=True)
class CropRecord:
    h: int
    w: int
    pad_h: int
    pad_w: int


def _reflect_index(n: int, pad: int) -> np.ndarray:
    idx = np.arange(n)
    if pad == 0:
        return idx
    return np.pad(idx, (0, pad), mode="reflect" if n > 1 else "edge")


def pad_to_multiple(image: Tensor, m: int = 8) -> tuple[Tensor, CropRecord]:
    """Reflect-pad right and bottom up to the next multiple of ``m``."""
    n, c, h, w = image.shape
    ph, pw = (-h) % m, (-w) % m
    record = CropRecord(h, w, ph, pw)
    if ph == 0 and pw == 0:
        return image, record
    return gather_spatial(image, _reflect_index(h, ph), _reflect_index(w, pw)), record


def crop(x: Tensor, record: CropRecord) -> Tensor:
    if record.pad_h == 0 and record.pad_w == 0:
        return x
    return x[:, :, : record.h, : record.w]


def coarse_forward(x: Tensor, cfg: GraNetConfig, weights) -> tuple[Tensor, list[PoolIndices]]:
    """Predict the signed rain mask; returns it with the pooling indices."""
    n, c, h, w = x.shape
    m = cfg.pad_multiple
    if h % m or w % m:
        raise ShapeError(f"coarse stage needs h and w divisible by {m}, got {h}x{w}; pad the input first")
    if c != 3:
        raise ShapeError(f"coarse stage expects 3 input channels, got c={c}")

    skips: list[Tensor] = []
    indices: list[PoolIndices] = []
    cur = x
    for i in range(cfg.levels):
        local = dense_block(cur, cfg.coarse_dense(i), weights, f"coarse.down{i}")
        skips.append(local)
        cur, idx = maxpool2d(local)
        indices.append(idx)

    g = cur
    for i in reversed(range(cfg.levels)):
        width = g.shape[1]
        if cfg.use_ra:
            g = ra_block(g, cfg.ra(i, width), weights, f"coarse.ra{i}")
        if width != cfg.coarse_channels[i]:
            g = apply_conv(g, weights, f"coarse.adapt{i}.conv")
        lh, lw = skips[i].shape[2:]
        g = add(maxunpool2d(g, indices[i], lh, lw), skips[i])

    return apply_conv(g, weights, "coarse.head.conv"), indices


def residual_subtract(image: Tensor, mask: Tensor) -> Tensor:
    return sub(image, mask)


def fine_forward(coarse_result: Tensor, cfg: GraNetConfig, weights) -> Tensor:
    feat = relu(apply_conv(coarse_result, weights, "fine.stem.conv"))
    outputs = []
    dcfg = cfg.fine_dense()
    for b in range(cfg.fine_num_dense_blocks):
        feat = dense_block(feat, dcfg, weights, f"fine.dense{b}")
        outputs.append(feat)
    stacked = outputs[0] if len(outputs) == 1 else concat_channels(outputs)
    if cfg.use_merge:
        merged = merging_block(stacked, MergingConfig(cfg.merge_k, stacked.shape[1]))
    else:
        merged = apply_conv(stacked, weights, "fine.merge.conv")
    correction = apply_conv(merged, weights, "fine.head.conv")
    return add(coarse_result, correction) if cfg.fine_residual else correction


def granet_forward(image: Tensor, cfg: GraNetConfig, weights) -> ForwardOutputs:
    """pad -> coarse stage -> subtract mask -> fine stage -> crop."""
    padded, record = pad_to_multiple(image, cfg.pad_multiple)
    mask, indices = coarse_forward(padded, cfg, weights)
    coarse = residual_subtract(padded, mask)
    final = fine_forward(coarse, cfg, weights) if cfg.use_fine else coarse
    return ForwardOutputs(crop(mask, record), crop(coarse, record), crop(final, record), indices)


def mae_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean absolute error over batch, channels and pixels."""
    if pred.shape != target.shape:
        raise ShapeError(f"mae_loss: prediction {pred.shape} and target {target.shape} differ")
    return mean_all(absolute(sub(pred, target)))


def config_from_values(values: dict[str, str], base: Optional[GraNetConfig] = None) -> GraNetConfig:
    return kv.build(GraNetConfig, "model", values, base)
