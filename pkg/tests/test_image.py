import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tilevlm.errors import ContractError, DimensionError, ParameterError
from tilevlm.image import (
    Image,
    anyres_tile,
    decode_raster,
    encode_raster,
    reassemble,
    resize_area_ratio,
    resize_bilinear,
    scaled_image,
)

from oracles import bilinear_scalar


def rand_image(seed, w, h):
    return Image(np.random.default_rng(seed).random((h, w, 3)))


def brute_force_grid(w, h, T, max_tiles):
    """Enumerate every legal grid; waste = padding + source area lost; ties: fewer tiles, fewer rows."""
    best = None
    for rows in range(1, max_tiles + 1):
        for cols in range(1, max_tiles + 1):
            if rows * cols > max_tiles:
                continue
            s = min(cols * T / w, rows * T / h, 1.0)
            if s < 1.0:
                cw = min(max(1, math.floor(w * s + 0.5)), cols * T)
                ch = min(max(1, math.floor(h * s + 0.5)), rows * T)
            else:
                cw, ch = w, h
            waste = (rows * cols * T * T - cw * ch) + (w * h - cw * ch)
            key = (waste, rows * cols, rows)
            if best is None or key < best[0]:
                best = (key, rows, cols, s, cw, ch)
    return best[1:]


# --------------------------------------------------------------------------
# Image


def test_image_rejects_out_of_range_pixels():
    with pytest.raises(ContractError):
        Image(np.full((2, 2, 3), 1.5))


def test_image_rejects_wrong_channels():
    with pytest.raises(DimensionError):
        Image(np.zeros((2, 2, 4)))


# --------------------------------------------------------------------------
# resize_area_ratio


def test_resize_alpha_one_is_bit_exact_copy():
    img = rand_image(0, 100, 100)
    out = resize_area_ratio(img, 1.0)
    assert out == img
    assert out.pixels is not img.pixels


def test_resize_quarter_area_halves_sides():
    assert resize_area_ratio(rand_image(1, 100, 100), 0.25).size == (50, 50)


def test_resize_constant_image_is_fixed_point():
    img = Image.constant(64, 32, 0.5)
    out = resize_area_ratio(img, 0.5)
    assert out.size == (45, 23)
    assert np.all(out.pixels == 0.5)
    np.testing.assert_array_equal(bilinear_scalar(img.pixels, 45, 23), out.pixels)


@pytest.mark.parametrize("alpha", [0.0, -0.1, 1.01])
def test_resize_rejects_bad_alpha(alpha):
    with pytest.raises(ParameterError):
        resize_area_ratio(rand_image(0, 8, 8), alpha)


def test_bilinear_matches_scalar_oracle():
    img = rand_image(4, 13, 9)
    for w2, h2 in [(7, 5), (20, 11), (13, 4), (1, 1)]:
        np.testing.assert_allclose(resize_bilinear(img, w2, h2).pixels, bilinear_scalar(img.pixels, w2, h2),
                                   rtol=0, atol=1e-13)


def test_resize_area_monotone_in_alpha():
    img = rand_image(2, 97, 61)
    areas = [resize_area_ratio(img, k / 10).pixels.shape[0] * resize_area_ratio(img, k / 10).pixels.shape[1]
             for k in range(1, 11)]
    assert areas == sorted(areas)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 300), st.integers(1, 300), st.floats(0.01, 1.0))
def test_resize_dims_follow_rounding_formula(w, h, alpha):
    out = resize_area_ratio(Image.constant(w, h, 0.25), alpha)
    side = math.sqrt(alpha)
    if alpha < 1.0:
        assert out.size == (max(1, math.floor(w * side + 0.5)), max(1, math.floor(h * side + 0.5)))
    assert np.all(out.pixels == 0.25)


# --------------------------------------------------------------------------
# anyres_tile


def test_tile_exact_single():
    g = anyres_tile(rand_image(0, 32, 32), 32, 4)
    assert (g.rows, g.cols, g.scale_applied, g.pad_right, g.pad_bottom) == (1, 1, 1.0, 0, 0)


def test_tile_exact_two_columns():
    g = anyres_tile(rand_image(0, 64, 32), 32, 4)
    assert (g.rows, g.cols, g.scale_applied, g.pad_right, g.pad_bottom) == (1, 2, 1.0, 0, 0)


def test_tile_70x30_matches_brute_force():
    g = anyres_tile(rand_image(0, 70, 30), 32, 6)
    rows, cols, s, cw, ch = brute_force_grid(70, 30, 32, 6)
    assert (rows, cols) == (1, 2)
    assert s == 64 / 70 and g.scale_applied == s
    assert (g.rows, g.cols, g.content_width, g.content_height) == (rows, cols, cw, ch)
    # frozen: 30·64/70 = 27.43 rounds to 27, leaving 5 rows of padding
    assert (g.content_width, g.content_height, g.pad_right, g.pad_bottom) == (64, 27, 0, 5)


@settings(max_examples=300, deadline=None)
@given(st.integers(1, 260), st.integers(1, 260), st.integers(1, 12))
def test_tile_grid_matches_brute_force(w, h, max_tiles):
    g = anyres_tile(Image.constant(w, h, 0.5), 32, max_tiles)
    rows, cols, s, cw, ch = brute_force_grid(w, h, 32, max_tiles)
    assert (g.rows, g.cols, g.content_width, g.content_height) == (rows, cols, cw, ch)
    assert g.scale_applied <= 1.0
    assert g.count <= max_tiles
    assert all(t.size == (32, 32) for t in g.tiles)


def test_tile_pads_with_zero():
    g = anyres_tile(Image.constant(40, 20, 0.7), 32, 2)
    canvas = g.canvas()
    assert np.all(canvas[g.content_height:] == 0.0)
    assert np.all(canvas[:, g.content_width:] == 0.0)


@pytest.mark.parametrize("T,mt", [(7, 4), (32, 0)])
def test_tile_rejects_bad_params(T, mt):
    with pytest.raises(ParameterError):
        anyres_tile(rand_image(0, 32, 32), T, mt)


def test_reassemble_one_tile_is_scaled_image():
    img = rand_image(3, 20, 30)
    g = anyres_tile(img, 32, 1)
    assert reassemble(g) == img


def test_reassemble_seed5_three_tiles():
    img = rand_image(5, 90, 30)
    g = anyres_tile(img, 32, 3)
    assert g.count == 3
    assert reassemble(g) == scaled_image(img, g)


def test_reassemble_round_trip_200_random_sizes():
    rng = np.random.default_rng(200)
    for i in range(200):
        w, h = (int(v) for v in rng.integers(1, 200, size=2))
        mt = int(rng.integers(1, 10))
        img = rand_image(i, w, h)
        g = anyres_tile(img, 32, mt)
        assert reassemble(g) == scaled_image(img, g)
        # one uniform scale: content aspect within a pixel of the source aspect
        assert abs(g.content_width - w * g.scale_applied) <= 1
        assert abs(g.content_height - h * g.scale_applied) <= 1


def test_raster_round_trip():
    img = Image(np.random.default_rng(0).integers(0, 256, size=(5, 7, 3)) / 255.0)
    blob = encode_raster(img)
    assert blob[:4] == b"TVLR"
    assert decode_raster(blob) == img


def test_raster_bad_magic():
    with pytest.raises(ContractError):
        decode_raster(b"XXXX" + bytes(12))
