import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from granet.blocks import (
    DenseBlockConfig,
    MergingConfig,
    RABlockConfig,
    RegionGrid,
    dense_block,
    init_dense_block,
    init_ra_block,
    merging_block,
    ra_block,
    region_partition,
)
from granet.gradcheck import finite_difference_check
from granet.tensor import ShapeError, Tensor, conv2d, mean_all, mul, relu


def params_f64(init, prefix, cfg, seed=0):
    p = {}
    init(p, prefix, cfg, np.random.default_rng(seed), np.float64)
    for t in p.values():
        if t.data.ndim == 1:
            t.data[...] = np.random.default_rng(seed + 1).normal(scale=0.1, size=t.shape)
    return p


def pointwise(w, b, x):
    # 1x1 conv on an (c, P) matrix
    return w[:, :, 0, 0] @ x + b[:, None]


def nonlocal_oracle(x, p, prefix):
    """Brute force y_i = sum_j exp(theta_i . phi_j) g_j / sum_j exp(theta_i . phi_j) on a (c, h, w) map."""
    c, h, w = x.shape
    flat = x.reshape(c, h * w)
    th = pointwise(p[f"{prefix}.theta.weight"].data, p[f"{prefix}.theta.bias"].data, flat)
    ph = pointwise(p[f"{prefix}.phi.weight"].data, p[f"{prefix}.phi.bias"].data, flat)
    g = pointwise(p[f"{prefix}.g.weight"].data, p[f"{prefix}.g.bias"].data, flat)
    P = h * w
    y = np.zeros_like(g)
    for i in range(P):
        f = np.array([np.exp(float(th[:, i] @ ph[:, j])) for j in range(P)])
        norm = f.sum()
        for j in range(P):
            y[:, i] += f[j] * g[:, j] / norm
    z = pointwise(p[f"{prefix}.z.weight"].data, p[f"{prefix}.z.bias"].data, y)
    return (flat + z).reshape(c, h, w)


# ---------------------------------------------------------------- dense block


def test_dense_block_zero_layers_is_1x1_conv():
    cfg = DenseBlockConfig(3, 5, growth_channels=4, num_layers=0)
    p = params_f64(init_dense_block, "d", cfg)
    x = Tensor(np.random.default_rng(0).normal(size=(1, 3, 4, 4)))
    expected = conv2d(x, p["d.transition.weight"], p["d.transition.bias"]).data
    np.testing.assert_array_equal(dense_block(x, cfg, p, "d").data, expected)


def test_dense_block_zero_growth_passes_input():
    cfg = DenseBlockConfig(3, 3, growth_channels=2, num_layers=2)
    p = params_f64(init_dense_block, "d", cfg)
    for t in range(2):
        p[f"d.layer{t}.weight"].data[...] = 0
        p[f"d.layer{t}.bias"].data[...] = 0
    tw = np.zeros((3, cfg.concat_channels, 1, 1))
    tw[:, :3, 0, 0] = np.eye(3)
    p["d.transition.weight"].data[...] = tw
    p["d.transition.bias"].data[...] = 0
    x = np.random.default_rng(1).normal(size=(2, 3, 5, 5))
    np.testing.assert_array_equal(dense_block(Tensor(x), cfg, p, "d").data, x)


def test_dense_block_matches_unrolled_oracle():
    from test_tensor import direct_conv

    cfg = DenseBlockConfig(4, 6, growth_channels=3, num_layers=2)
    p = params_f64(init_dense_block, "d", cfg)
    x = np.random.default_rng(2).normal(size=(1, 4, 8, 8))
    W = {k: v.data for k, v in p.items()}
    l0 = np.maximum(direct_conv(x, W["d.layer0.weight"], W["d.layer0.bias"]), 0)
    cat0 = np.concatenate([x, l0], axis=1)
    l1 = np.maximum(direct_conv(cat0, W["d.layer1.weight"], W["d.layer1.bias"]), 0)
    cat1 = np.concatenate([x, l0, l1], axis=1)
    expected = direct_conv(cat1, W["d.transition.weight"], W["d.transition.bias"])
    np.testing.assert_allclose(dense_block(Tensor(x), cfg, p, "d").data, expected, atol=1e-12)


def test_dense_block_every_layer_matters():
    cfg = DenseBlockConfig(3, 4, growth_channels=4, num_layers=3)
    p = params_f64(init_dense_block, "d", cfg)
    x = Tensor(np.random.default_rng(3).normal(size=(1, 3, 6, 6)))
    base = dense_block(x, cfg, p, "d").data.copy()
    for t in range(3):
        saved = p[f"d.layer{t}.weight"].data.copy()
        p[f"d.layer{t}.weight"].data[...] = 0
        assert not np.allclose(dense_block(x, cfg, p, "d").data, base)
        p[f"d.layer{t}.weight"].data[...] = saved


def test_dense_block_channel_mismatch():
    cfg = DenseBlockConfig(3, 4)
    p = {}
    init_dense_block(p, "d", cfg, np.random.default_rng(0))
    with pytest.raises(ShapeError, match="expected 3"):
        dense_block(Tensor(np.zeros((1, 2, 4, 4), dtype=np.float32)), cfg, p, "d")


def test_dense_block_gradients():
    cfg = DenseBlockConfig(2, 3, growth_channels=2, num_layers=2)
    p = params_f64(init_dense_block, "d", cfg)
    rng = np.random.default_rng(4)
    x = Tensor(rng.normal(size=(1, 2, 6, 6)), requires_grad=True)
    t = Tensor(rng.normal(size=(1, 3, 6, 6)))
    f = lambda _: mean_all(mul(dense_block(x, cfg, p, "d"), t))
    assert finite_difference_check(f, x) < 1e-4
    for name in ("d.layer0.weight", "d.layer1.bias", "d.transition.weight"):
        assert finite_difference_check(f, p[name]) < 1e-4


# ---------------------------------------------------------------- region partition


def test_partition_even():
    tiles = region_partition(8, 8, RegionGrid(2, 2))
    assert tiles == [(0, 4, 0, 4), (0, 4, 4, 8), (4, 8, 0, 4), (4, 8, 4, 8)]


def test_partition_remainder_goes_to_last_tile():
    tiles = region_partition(7, 7, RegionGrid(2, 2))
    assert sorted({r1 - r0 for r0, r1, _, _ in tiles}) == [3, 4]
    assert sorted({c1 - c0 for _, _, c0, c1 in tiles}) == [3, 4]
    assert tiles[-1] == (3, 7, 3, 7)


def test_partition_grid_too_large():
    with pytest.raises(ValueError, match="larger"):
        region_partition(3, 8, RegionGrid(4, 4))


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 40), st.integers(1, 40), st.integers(1, 6), st.integers(1, 6))
def test_partition_covers_every_pixel_once(h, w, rows, cols):
    if h < rows or w < cols:
        return
    count = np.zeros((h, w), dtype=int)
    tiles = region_partition(h, w, RegionGrid(rows, cols))
    assert len(tiles) == rows * cols
    for r0, r1, c0, c1 in tiles:
        assert r1 > r0 and c1 > c0
        count[r0:r1, c0:c1] += 1
    assert (count == 1).all()


# ---------------------------------------------------------------- RA block


def ra_params(channels, grid, seed=0, embed=None):
    cfg = RABlockConfig(channels, grid, embed)
    return cfg, params_f64(init_ra_block, "ra", cfg, seed)


def test_ra_embed_default_is_half():
    assert RABlockConfig(8).embed_channels == 4
    assert RABlockConfig(1).embed_channels == 1


def test_ra_single_position_tiles_double_input():
    # every tile is one pixel: softmax weight 1, and z o g = identity
    c = 3
    cfg = RABlockConfig(c, RegionGrid(4, 4), embed_channels=c)
    p = params_f64(init_ra_block, "ra", cfg)
    p["ra.g.weight"].data[...] = np.eye(c).reshape(c, c, 1, 1)
    p["ra.z.weight"].data[...] = np.eye(c).reshape(c, c, 1, 1)
    p["ra.g.bias"].data[...] = 0
    p["ra.z.bias"].data[...] = 0
    x = np.random.default_rng(5).normal(size=(1, c, 4, 4))
    np.testing.assert_allclose(ra_block(Tensor(x), cfg, p, "ra").data, 2 * x, rtol=1e-14)


@pytest.mark.parametrize("which", ["theta", "phi"])
def test_ra_zero_projection_gives_tile_mean(which):
    cfg, p = ra_params(4, RegionGrid(2, 2))
    p[f"ra.{which}.weight"].data[...] = 0
    p[f"ra.{which}.bias"].data[...] = 0
    x = np.random.default_rng(6).normal(size=(1, 4, 6, 6))
    out = ra_block(Tensor(x), cfg, p, "ra", residual=False).data
    gw, gb = p["ra.g.weight"].data, p["ra.g.bias"].data
    zw, zb = p["ra.z.weight"].data, p["ra.z.bias"].data
    for r0, r1, c0, c1 in region_partition(6, 6, cfg.grid):
        tile = x[0, :, r0:r1, c0:c1].reshape(4, -1)
        g_mean = pointwise(gw, gb, tile).mean(axis=1, keepdims=True)
        expected = pointwise(zw, zb, g_mean)
        np.testing.assert_allclose(out[0, :, r0:r1, c0:c1].reshape(4, -1), np.broadcast_to(expected, (4, tile.shape[1])), atol=1e-12)


def test_ra_whole_map_matches_nonlocal_oracle():
    cfg, p = ra_params(2, RegionGrid(1, 1))
    x = np.random.default_rng(7).normal(size=(1, 2, 6, 6))
    np.testing.assert_allclose(ra_block(Tensor(x), cfg, p, "ra").data[0], nonlocal_oracle(x[0], p, "ra"), atol=1e-5)


@pytest.mark.parametrize("shape,grid", [((1, 2, 4, 4), (2, 2)), ((1, 2, 6, 6), (2, 2)), ((2, 3, 7, 5), (2, 2)), ((1, 2, 9, 8), (4, 3))])
def test_ra_tiles_match_per_tile_oracle(shape, grid):
    cfg, p = ra_params(shape[1], RegionGrid(*grid), seed=8)
    x = np.random.default_rng(9).normal(size=shape)
    out = ra_block(Tensor(x), cfg, p, "ra").data
    for b in range(shape[0]):
        for r0, r1, c0, c1 in region_partition(shape[2], shape[3], cfg.grid):
            np.testing.assert_allclose(out[b, :, r0:r1, c0:c1], nonlocal_oracle(x[b, :, r0:r1, c0:c1], p, "ra"), atol=1e-5)


@pytest.mark.parametrize("hw", [(8, 8), (7, 9)])
def test_ra_attention_rows_sum_to_one(hw):
    cfg, p = ra_params(4, RegionGrid(2, 2), seed=10)
    x = Tensor(np.random.default_rng(11).normal(scale=3, size=(2, 4) + hw))
    _, maps = ra_block(x, cfg, p, "ra", return_attention=True)
    assert len(maps) == 4
    for att in maps:
        np.testing.assert_allclose(att.sum(axis=-1), 1.0, atol=1e-6)
        assert (att >= 0).all()


def test_ra_permutation_equivariant_within_tile():
    cfg, p = ra_params(3, RegionGrid(1, 1), seed=12)
    rng = np.random.default_rng(13)
    x = rng.normal(size=(1, 3, 4, 4))
    perm = rng.permutation(16)
    xp = x.reshape(1, 3, 16)[:, :, perm].reshape(1, 3, 4, 4)
    y = ra_block(Tensor(x), cfg, p, "ra", residual=False).data.reshape(1, 3, 16)
    yp = ra_block(Tensor(xp), cfg, p, "ra", residual=False).data.reshape(1, 3, 16)
    np.testing.assert_allclose(yp, y[:, :, perm], atol=1e-12)


def test_ra_gradients():
    cfg, p = ra_params(2, RegionGrid(2, 2), seed=14)
    rng = np.random.default_rng(15)
    x = Tensor(rng.normal(size=(1, 2, 4, 6)), requires_grad=True)
    t = Tensor(rng.normal(size=(1, 2, 4, 6)))
    f = lambda _: mean_all(mul(ra_block(x, cfg, p, "ra"), t))
    assert finite_difference_check(f, x) < 1e-4
    for name in p:
        assert finite_difference_check(f, p[name]) < 1e-4, name


def test_ra_uneven_tiles_gradients():
    cfg, p = ra_params(2, RegionGrid(2, 2), seed=16)
    rng = np.random.default_rng(17)
    x = Tensor(rng.normal(size=(1, 2, 5, 3)), requires_grad=True)
    t = Tensor(rng.normal(size=(1, 2, 5, 3)))
    assert finite_difference_check(lambda _: mean_all(mul(ra_block(x, cfg, p, "ra"), t)), x) < 1e-4


# ---------------------------------------------------------------- merging block


def test_merging_k1_identity():
    x = np.random.default_rng(18).normal(size=(1, 5, 3, 3))
    np.testing.assert_array_equal(merging_block(Tensor(x), MergingConfig(1, 5)).data, x)


def test_merging_contiguous_groups():
    a = np.random.default_rng(19).normal(size=(1, 4, 2, 2))
    out = merging_block(Tensor(a), MergingConfig(2, 4)).data
    np.testing.assert_allclose(out[0, 0], (a[0, 0] + a[0, 2]) / 2, rtol=1e-15)
    np.testing.assert_allclose(out[0, 1], (a[0, 1] + a[0, 3]) / 2, rtol=1e-15)


def test_merging_matches_group_mean():
    a = np.random.default_rng(20).normal(size=(1, 8, 4, 4))
    out = merging_block(Tensor(a), MergingConfig(4, 8)).data
    expected = np.zeros((1, 2, 4, 4))
    for c in range(2):
        for i in range(4):
            expected[0, c] += a[0, i * 2 + c]
    expected /= 4
    np.testing.assert_allclose(out, expected, rtol=1e-15)


def test_merging_preserves_constants():
    x = np.full((1, 12, 3, 3), 0.37)
    np.testing.assert_allclose(merging_block(Tensor(x), MergingConfig(4, 12)).data, 0.37, rtol=1e-15)


def test_merging_indivisible():
    with pytest.raises(ValueError, match="divisible"):
        MergingConfig(4, 6)
    with pytest.raises(ShapeError, match="divisible"):
        merging_block(Tensor(np.zeros((1, 6, 2, 2))), MergingConfig(4, 8))


def test_merging_gradient_is_one_over_k():
    x = Tensor(np.random.default_rng(21).normal(size=(1, 8, 2, 2)), requires_grad=True)
    y = merging_block(x, MergingConfig(4, 8))
    mean_all(y).backward()
    np.testing.assert_allclose(x.grad, 1.0 / 4 / y.data.size)
    t = Tensor(np.random.default_rng(22).normal(size=(1, 2, 2, 2)))
    x.grad = None
    assert finite_difference_check(lambda _: mean_all(mul(merging_block(x, MergingConfig(4, 8)), t)), x) < 1e-4
