import numpy as np
import pytest

from clustile import render
from clustile.aggregate import LatticeGrid
from clustile.errors import ValidationError
from clustile.nmf import argmax_cluster


def make_grid(values, counts=None, cell=4):
    values = np.asarray(values, dtype=np.float32)
    if counts is None:
        counts = np.ones(values.shape[:2], dtype=np.int32)
    return LatticeGrid(
        slide_id="s", gx0=0, gy0=0, cell_size_px=cell,
        values=values, counts=np.asarray(counts, dtype=np.int32), kind="weights",
    )


def test_default_palette_distinct():
    for k in (1, 6, 12):
        palette = render.default_palette(k)
        assert len(palette) == k
        assert len(set(palette)) == k


def test_heatmap_all_zero_transparent():
    grid = make_grid(np.zeros((3, 3, 2)))
    img = render.render_class_heatmap(grid, 1, scale=1)
    assert img.shape == (3, 3, 4)
    assert not img[:, :, 3].any()


def test_heatmap_single_hot_cell_full_alpha():
    values = np.zeros((2, 2, 1))
    values[1, 0, 0] = 3.0
    img = render.render_class_heatmap(make_grid(values), 1, scale=1)
    assert img[1, 0, 3] == 255
    assert img[0, 0, 3] == 0
    assert tuple(img[1, 0, :3]) == render.default_palette(1)[0]


def test_heatmap_linear_alpha_rule():
    # two cells at (q/2, q): quantile q is the larger weight, alphas 0.5 / 1.0
    values = np.zeros((1, 2, 1))
    values[0, 0, 0] = 2.0
    values[0, 1, 0] = 4.0
    img = render.render_class_heatmap(make_grid(values), 1, quantile=1.0, scale=1)
    assert img[0, 1, 3] == 255
    assert img[0, 0, 3] == round(0.5 * 255)


def test_heatmap_scale_and_class_bounds():
    grid = make_grid(np.ones((2, 2, 2)), cell=4)
    img = render.render_class_heatmap(grid, 2)
    assert img.shape == (8, 8, 4)  # default scale = cell_size_px
    with pytest.raises(ValidationError):
        render.render_class_heatmap(grid, 3)


def test_blended_single_class_matches_heatmap():
    rng = np.random.default_rng(0)
    values = np.zeros((4, 5, 3), dtype=np.float32)
    values[:, :, 2] = rng.random((4, 5))
    grid = make_grid(values)
    blended = render.render_blended(grid, scale=1)
    single = render.render_class_heatmap(grid, 3, scale=1)
    assert np.array_equal(blended, single)


def test_blended_two_equal_classes_mix_hue():
    # shared cell holds both classes at half their per-class quantile, so
    # both layers composite at alpha 0.5 and the hue lands between them
    values = np.zeros((1, 3, 2), dtype=np.float32)
    values[0, 0] = (1.0, 1.0)
    values[0, 1, 0] = 2.0
    values[0, 2, 1] = 2.0
    img = render.render_blended(make_grid(values), quantile=1.0, scale=1)
    c1, c2 = render.default_palette(2)[:2]
    mixed = tuple(img[0, 0, :3])
    assert mixed != c1 and mixed != c2
    for ch in range(3):
        lo, hi = sorted((c1[ch], c2[ch]))
        assert lo - 1 <= mixed[ch] <= hi + 1


def test_blended_disjoint_support_order_invariant():
    rng = np.random.default_rng(1)
    values = np.zeros((4, 4, 3), dtype=np.float32)
    owner = rng.integers(0, 3, size=(4, 4))
    for k in range(3):
        values[:, :, k][owner == k] = rng.random((4, 4))[owner == k] + 0.5
    grid = make_grid(values)
    img = render.render_blended(grid, scale=1)
    palette = render.default_palette(3)
    permuted_values = values[:, :, [2, 0, 1]]
    permuted_palette = (palette[2], palette[0], palette[1])
    img_permuted = render.render_blended(make_grid(permuted_values),
                                         permuted_palette, scale=1)
    assert np.array_equal(img, img_permuted)


def test_clustering_colors_match_argmax():
    rng = np.random.default_rng(2)
    values = rng.random((5, 6, 4)).astype(np.float32)
    values[0, 0] = 0.0  # unassigned cell
    grid = make_grid(values)
    img = render.render_clustering(grid, scale=1)
    palette = render.default_palette(4)
    labels = argmax_cluster(values.reshape(-1, 4)).reshape(5, 6)
    for i in range(5):
        for j in range(6):
            if labels[i, j] == 0:
                assert img[i, j, 3] == 0
            else:
                assert tuple(img[i, j, :3]) == palette[labels[i, j] - 1]
                assert img[i, j, 3] == 255


def test_clustering_checkerboard():
    values = np.zeros((4, 4, 2), dtype=np.float32)
    for i in range(4):
        for j in range(4):
            values[i, j, (i + j) % 2] = 1.0
    img = render.render_clustering(make_grid(values), scale=1)
    p = render.default_palette(2)
    assert tuple(img[0, 0, :3]) == p[0]
    assert tuple(img[0, 1, :3]) == p[1]
    assert tuple(img[1, 0, :3]) == p[1]


def test_composite_opacity_zero_keeps_tissue():
    tissue = np.random.default_rng(3).integers(0, 256, (8, 8, 3)).astype(np.uint8)
    overlay = np.full((4, 4, 4), 255, dtype=np.uint8)
    out = render.composite_over_tissue(overlay, tissue, opacity=0.0)
    assert np.array_equal(out, tissue)


def test_composite_opaque_overlay_wins():
    tissue = np.zeros((4, 4, 3), dtype=np.uint8)
    overlay = np.zeros((4, 4, 4), dtype=np.uint8)
    overlay[:, :] = (10, 20, 30, 255)
    out = render.composite_over_tissue(overlay, tissue, opacity=1.0)
    assert np.array_equal(out, np.broadcast_to((10, 20, 30), (4, 4, 3)))


def test_composite_half_red_over_white():
    tissue = np.full((2, 2, 3), 255, dtype=np.uint8)
    overlay = np.zeros((2, 2, 4), dtype=np.uint8)
    overlay[:, :] = (255, 0, 0, 128)
    out = render.composite_over_tissue(overlay, tissue, opacity=1.0)
    assert abs(int(out[0, 0, 0]) - 255) <= 1
    assert abs(int(out[0, 0, 1]) - 128) <= 1
    assert abs(int(out[0, 0, 2]) - 128) <= 1


def test_composite_upscales_and_validates():
    tissue = np.zeros((8, 8, 3), dtype=np.uint8)
    overlay = np.zeros((4, 4, 4), dtype=np.uint8)
    overlay[0, 0] = (1, 2, 3, 255)
    out = render.composite_over_tissue(overlay, tissue)
    assert np.array_equal(out[0:2, 0:2], np.broadcast_to((1, 2, 3), (2, 2, 3)))
    with pytest.raises(ValidationError):
        render.composite_over_tissue(np.zeros((3, 3, 4), dtype=np.uint8), tissue)


def test_png_round_trip_and_determinism(tmp_path):
    rng = np.random.default_rng(4)
    img = rng.integers(0, 256, (16, 16, 4)).astype(np.uint8)
    a, b = tmp_path / "a.png", tmp_path / "b.png"
    render.write_png(a, img)
    render.write_png(b, img)
    assert a.read_bytes() == b.read_bytes()
    rgb = render.read_image(a)
    assert rgb.shape == (16, 16, 3)


def test_render_is_pure(tmp_path):
    rng = np.random.default_rng(5)
    grid = make_grid(rng.random((6, 6, 3)).astype(np.float32))
    a = render.render_blended(grid, scale=2)
    b = render.render_blended(grid, scale=2)
    assert np.array_equal(a, b)
    pa, pb = tmp_path / "a.png", tmp_path / "b.png"
    render.write_png(pa, a)
    render.write_png(pb, b)
    assert pa.read_bytes() == pb.read_bytes()