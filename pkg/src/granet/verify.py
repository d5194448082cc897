"""Double-precision gradient verification over primitives, blocks and the full network."""

from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass
from typing import Callable, Iterator, Optional

import numpy as np

from .blocks import (
    DenseBlockConfig,
    MergingConfig,
    RABlockConfig,
    RegionGrid,
    dense_block,
    init_dense_block,
    init_ra_block,
    merging_block,
    ra_block,
)
from .gradcheck import relative_errors
from .model import GraNetConfig, GraNetWeights, granet_forward, mae_loss
from .tensor import (
    Tensor,
    absolute,
    add,
    concat,
    conv2d,
    gather_spatial,
    matmul,
    maxpool2d,
    maxunpool2d,
    mean_all,
    mul,
    relu,
    reshape,
    scalar_scale,
    softmax,
    sub,
    sum_all,
    transpose,
)

__all__ = ["UnitResult", "run_suite", "TOLERANCE", "MIN_SIZE"]

TOLERANCE = 1e-4
# three stride-2 pools need at least 8 pixels
MIN_SIZE = 8


@dataclass
class UnitResult:
    group: str
    unit: str
    max_error: float
    checked: int
    skipped: int
    seconds: float

    @property
    def passed(self) -> bool:
        return self.checked > 0 and self.max_error < TOLERANCE


def _leaf(rng, shape, scale=1.0) -> Tensor:
    return Tensor(rng.normal(scale=scale, size=shape), requires_grad=True)


def _project(y: Tensor, rng) -> Tensor:
    # random linear functional so every output element carries its own weight
    t = Tensor(rng.normal(size=y.shape))
    return mean_all(mul(y, t))


def _primitive_cases(rng) -> Iterator[tuple[str, Callable[[], Tensor], list[Tensor]]]:
    a, b = _leaf(rng, (2, 3, 4, 5)), _leaf(rng, (2, 3, 4, 5))
    yield "add", lambda: _project(add(a, b), rng_fixed(1)), [a, b]
    yield "sub", lambda: _project(sub(a, b), rng_fixed(2)), [a, b]
    yield "mul", lambda: _project(mul(a, b), rng_fixed(3)), [a, b]
    yield "scalar_scale", lambda: _project(scalar_scale(a, -1.7), rng_fixed(4)), [a]
    yield "mean_all", lambda: mean_all(mul(a, a)), [a]
    yield "sum_all", lambda: sum_all(mul(a, b)), [a, b]
    yield "absolute", lambda: _project(absolute(a), rng_fixed(5)), [a]
    yield "relu", lambda: _project(relu(a), rng_fixed(6)), [a]
    yield "reshape", lambda: _project(reshape(a, (6, 20, 1, 1)), rng_fixed(7)), [a]
    yield "transpose", lambda: _project(transpose(a, (0, 3, 1, 2)), rng_fixed(8)), [a]
    yield "slice", lambda: _project(a[:, 1:3, ::2, 1:], rng_fixed(9)), [a]
    c = _leaf(rng, (2, 2, 4, 5))
    yield "concat", lambda: _project(concat([a, c], 1), rng_fixed(10)), [a, c]
    rows, cols = np.array([0, 1, 2, 3, 2, 1]), np.array([4, 3, 0, 0, 1])
    yield "gather_spatial", lambda: _project(gather_spatial(a, rows, cols), rng_fixed(11)), [a]
    m1, m2 = _leaf(rng, (2, 4, 3)), _leaf(rng, (2, 3, 5))
    yield "matmul", lambda: _project(matmul(m1, m2), rng_fixed(12)), [m1, m2]
    s = _leaf(rng, (3, 7), scale=2.0)
    yield "softmax", lambda: _project(softmax(s), rng_fixed(13)), [s]
    x = _leaf(rng, (2, 3, 6, 5))
    w3, b3 = _leaf(rng, (4, 3, 3, 3), 0.3), _leaf(rng, (4,), 0.1)
    yield "conv2d_3x3", lambda: _project(conv2d(x, w3, b3), rng_fixed(14)), [x, w3, b3]
    w1, b1 = _leaf(rng, (2, 3, 1, 1), 0.3), _leaf(rng, (2,), 0.1)
    yield "conv2d_1x1", lambda: _project(conv2d(x, w1, b1), rng_fixed(15)), [x, w1, b1]
    p = _leaf(rng, (2, 2, 6, 4))
    yield "maxpool2d", lambda: _project(maxpool2d(p)[0], rng_fixed(16)), [p]
    pooled, idx = maxpool2d(Tensor(p.data.copy()))
    u = _leaf(rng, pooled.shape)
    yield "maxunpool2d", lambda: _project(maxunpool2d(u, idx, 6, 4), rng_fixed(17)), [u]


def rng_fixed(seed: int) -> np.random.Generator:
    return np.random.default_rng(1000 + seed)


def _perturb_biases(params: dict, rng) -> None:
    # zero-initialised biases would leave their gradients untested against nonzero values
    for t in params.values():
        if t.data.ndim == 1:
            t.data[...] = rng.normal(scale=0.1, size=t.shape)


def _block_cases(rng) -> Iterator[tuple[str, Callable[[], Tensor], list[Tensor]]]:
    dcfg = DenseBlockConfig(3, 4, growth_channels=3, num_layers=3)
    dp: dict = {}
    init_dense_block(dp, "d", dcfg, rng, np.float64)
    _perturb_biases(dp, rng)
    x = _leaf(rng, (1, 3, 6, 6))
    yield "dense_block", lambda: _project(dense_block(x, dcfg, dp, "d"), rng_fixed(20)), [x, *dp.values()]

    for grid, shape in ((RegionGrid(1, 1), (1, 4, 6, 6)), (RegionGrid(2, 2), (1, 4, 7, 6))):
        rcfg = RABlockConfig(shape[1], grid)
        rp: dict = {}
        init_ra_block(rp, "ra", rcfg, rng, np.float64)
        _perturb_biases(rp, rng)
        xr = _leaf(rng, shape)
        yield (f"ra_block_{grid}", lambda xr=xr, rcfg=rcfg, rp=rp: _project(ra_block(xr, rcfg, rp, "ra"), rng_fixed(21)),
               [xr, *rp.values()])

    xm = _leaf(rng, (1, 16, 4, 4))
    mcfg = MergingConfig(4, 16)
    yield "merging_block", lambda: _project(merging_block(xm, mcfg), rng_fixed(22)), [xm]


def _run_unit(group, unit, f, leaves, max_coords, rng) -> UnitResult:
    t0 = time.perf_counter()
    worst, checked, skipped = 0.0, 0, 0
    for leaf in leaves:
        errs, sk = relative_errors(lambda _: f(), leaf, max_coords=max_coords, rng=rng)
        if errs.size:
            worst = max(worst, float(errs.max()))
        checked += errs.size
        skipped += sk
    return UnitResult(group, unit, worst, checked, skipped, time.perf_counter() - t0)


def model_case(cfg: GraNetConfig, size: int, seed: int) -> tuple[Callable[[], Tensor], Tensor, GraNetWeights]:
    """MAE loss of the full network on a random image, in float64.

    The output heads are drawn like every other convolution here: with
    zero heads every upstream gradient would vanish and the check would
    be vacuous.
    """
    cfg = dataclasses.replace(cfg, init_heads="kaiming")
    rng = np.random.default_rng(seed)
    weights = GraNetWeights.initialize(cfg, seed=seed, dtype=np.float64)
    _perturb_biases(weights, rng)
    x = Tensor(rng.random((1, 3, size, size)), requires_grad=True)
    y = Tensor(rng.random((1, 3, size, size)))
    return (lambda: mae_loss(granet_forward(x, cfg, weights).final, y)), x, weights


def run_suite(
    cfg: GraNetConfig,
    size: int = 16,
    seed: int = 0,
    groups: tuple[str, ...] = ("primitives", "blocks", "model"),
    input_coords: Optional[int] = None,
    param_coords: int = 3,
    report: Optional[Callable[[UnitResult], None]] = None,
) -> list[UnitResult]:
    """Run the finite-difference suite; ``report`` is called after each unit."""
    if size < MIN_SIZE:
        raise ValueError(f"gradcheck size must be at least {MIN_SIZE}, got {size}")
    rng = np.random.default_rng(seed)
    results: list[UnitResult] = []

    def done(r: UnitResult) -> None:
        results.append(r)
        if report is not None:
            report(r)

    if "primitives" in groups:
        for unit, f, leaves in _primitive_cases(rng):
            done(_run_unit("primitives", unit, f, leaves, None, rng))
    if "blocks" in groups:
        for unit, f, leaves in _block_cases(rng):
            done(_run_unit("blocks", unit, f, leaves, 60, rng))
    if "model" in groups:
        f, x, weights = model_case(cfg, size, seed)
        done(_run_unit("model", "granet/input", f, [x], input_coords, rng))
        t0 = time.perf_counter()
        worst, checked, skipped = 0.0, 0, 0
        for name, w in weights.items():
            errs, sk = relative_errors(lambda _: f(), w, max_coords=param_coords, rng=rng)
            if errs.size:
                worst = max(worst, float(errs.max()))
            checked += errs.size
            skipped += sk
        done(UnitResult("model", "granet/parameters", worst, checked, skipped, time.perf_counter() - t0))
    return results
