import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vpkit.errors import BoundsError, InvalidParameterError
from vpkit.image import (
    RED,
    Color,
    ImageRaster,
    RectRegion,
    crop_region,
    decode_image,
    draw_overlay,
    encode_png,
    footprint_bounds,
    gaussian_blur,
    resize_bilinear,
    shape_footprint,
)


def dense_blur_oracle(pixels: np.ndarray, sigma: float) -> np.ndarray:
    """Direct 2-D convolution with an explicit clamped neighbourhood."""
    r = math.ceil(3 * sigma)
    offs = range(-r, r + 1)
    k1 = np.array([math.exp(-(d * d) / (2 * sigma * sigma)) for d in offs])
    k1 /= k1.sum()
    H, W, _ = pixels.shape
    out = np.zeros((H, W, 3))
    for y in range(H):
        for x in range(W):
            acc = np.zeros(3)
            for i, dy in enumerate(offs):
                for j, dx in enumerate(offs):
                    yy = min(max(y + dy, 0), H - 1)
                    xx = min(max(x + dx, 0), W - 1)
                    acc += k1[i] * k1[j] * pixels[yy, xx]
            out[y, x] = acc
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def random_image(rng, w, h):
    return ImageRaster(rng.integers(0, 256, size=(h, w, 3), dtype=np.uint8))


class TestGaussianBlur:
    def test_constant_image_is_fixed_point(self):
        img = ImageRaster.filled(17, 11, (128, 128, 128))
        assert gaussian_blur(img, 2.0) == img

    def test_single_pixel_unchanged(self):
        img = ImageRaster.filled(1, 1, (12, 200, 77))
        for sigma in (0.3, 1.0, 7.5):
            assert gaussian_blur(img, sigma) == img

    def test_center_impulse_matches_kernel_weight(self):
        px = np.zeros((5, 5, 3), dtype=np.uint8)
        px[2, 2] = 255
        out = gaussian_blur(ImageRaster(px), 1.0)
        oracle = dense_blur_oracle(px, 1.0)
        # w(0,0) from the direct kernel sum
        k = [math.exp(-(d * d) / 2.0) for d in range(-3, 4)]
        w00 = (1.0 / sum(k)) ** 2
        assert out.pixels[2, 2, 0] == round(255 * w00)
        assert np.array_equal(out.pixels, oracle)

    @pytest.mark.parametrize("sigma", [0.4, 1.3, 2.0])
    def test_random_matches_dense_oracle(self, sigma):
        rng = np.random.default_rng(3)
        img = random_image(rng, 9, 7)
        got = gaussian_blur(img, sigma).pixels.astype(int)
        want = dense_blur_oracle(img.pixels, sigma).astype(int)
        # separable vs dense summation order can flip a .5 rounding
        assert np.abs(got - want).max() <= 1

    @pytest.mark.parametrize("sigma", [0.0, -1.0, float("nan"), float("inf")])
    def test_invalid_sigma(self, sigma):
        with pytest.raises(InvalidParameterError):
            gaussian_blur(ImageRaster.filled(3, 3, (0, 0, 0)), sigma)

    def test_input_not_mutated(self):
        rng = np.random.default_rng(0)
        img = random_image(rng, 8, 8)
        before = img.pixels.copy()
        gaussian_blur(img, 1.0)
        assert np.array_equal(img.pixels, before)


class TestCrop:
    def test_full_frame(self):
        img = random_image(np.random.default_rng(1), 10, 10)
        assert crop_region(img, RectRegion(0, 0, 10, 10)) == img

    def test_dims(self):
        img = random_image(np.random.default_rng(1), 10, 10)
        out = crop_region(img, RectRegion(2, 2, 5, 5))
        assert (out.width, out.height) == (3, 3)

    def test_checkerboard_index_oracle(self):
        px = np.zeros((4, 4, 3), dtype=np.uint8)
        for y in range(4):
            for x in range(4):
                px[y, x] = 255 if (x + y) % 2 else 0
        out = crop_region(ImageRaster(px), RectRegion(1, 1, 3, 3))
        for j in range(2):
            for i in range(2):
                assert tuple(out.pixels[j, i]) == tuple(px[1 + j, 1 + i])

    @pytest.mark.parametrize("region", [RectRegion(0, 0, 11, 5), RectRegion(-1, 0, 3, 3), RectRegion(4, 4, 4, 6)])
    def test_out_of_bounds(self, region):
        with pytest.raises(BoundsError):
            crop_region(ImageRaster.filled(10, 10, (0, 0, 0)), region)


class TestDrawOverlay:
    def test_rect_outline_ring(self):
        img = ImageRaster.filled(10, 10, (0, 0, 0))
        out = draw_overlay(img, "rect-outline", RectRegion(2, 2, 5, 5), RED, 1)
        red = np.all(out.pixels == (255, 0, 0), axis=2)
        expected = np.zeros((10, 10), bool)
        for y in range(2, 5):
            for x in range(2, 5):
                expected[y, x] = x in (2, 4) or y in (2, 4)
        assert np.array_equal(red, expected)
        assert tuple(out.pixels[3, 3]) == (0, 0, 0)

    def test_filled_disc_covers_2x2(self):
        img = ImageRaster.filled(10, 10, (0, 0, 0))
        region = RectRegion(4, 4, 6, 6)
        out = draw_overlay(img, "filled-disc", region, RED, 1)
        # rasterization oracle: test each pixel center against the inscribed circle
        for y in range(10):
            for x in range(10):
                inside = ((x + 0.5 - 5) ** 2 + (y + 0.5 - 5) ** 2) <= 1.0
                assert (tuple(out.pixels[y, x]) == (255, 0, 0)) == inside
        assert np.all(out.pixels[4:6, 4:6] == (255, 0, 0))

    @pytest.mark.parametrize("shape", ["rect-outline", "ellipse-outline", "filled-disc", "arrow"])
    def test_stroke_zero_rejected(self, shape):
        with pytest.raises(InvalidParameterError):
            draw_overlay(ImageRaster.filled(10, 10, (0, 0, 0)), shape, RectRegion(2, 2, 5, 5), RED, 0)

    def test_invalid_region(self):
        with pytest.raises(BoundsError):
            draw_overlay(ImageRaster.filled(10, 10, (0, 0, 0)), "arrow", RectRegion(2, 2, 15, 5), RED, 1)

    def test_arrow_points_down_at_top_edge(self):
        img = ImageRaster.filled(40, 40, (0, 0, 0))
        out = draw_overlay(img, "arrow", RectRegion(10, 20, 30, 35), Color(0, 255, 0), 2)
        painted = np.argwhere(np.all(out.pixels == (0, 255, 0), axis=2))
        assert painted.size
        assert painted[:, 0].max() < 20  # nothing drawn inside the box
        assert painted[:, 0].min() >= 20 - 10  # length = 0.25 * 40

    @settings(max_examples=60, deadline=None)
    @given(
        shape=st.sampled_from(["rect-outline", "ellipse-outline", "filled-disc", "arrow"]),
        w=st.integers(1, 30),
        h=st.integers(1, 30),
        data=st.data(),
        stroke=st.integers(1, 5),
    )
    def test_changes_stay_inside_dilated_box(self, shape, w, h, data, stroke):
        x0 = data.draw(st.integers(0, w - 1))
        x1 = data.draw(st.integers(x0 + 1, w))
        y0 = data.draw(st.integers(0, h - 1))
        y1 = data.draw(st.integers(y0 + 1, h))
        region = RectRegion(x0, y0, x1, y1)
        rng = np.random.default_rng(w * 31 + h)
        img = random_image(rng, w, h)
        out = draw_overlay(img, shape, region, (1, 2, 3), stroke)
        changed = np.any(out.pixels != img.pixels, axis=2)
        mask = shape_footprint(shape, region, stroke, w, h)
        assert not np.any(changed & ~mask)
        bx0, by0, bx1, by1 = footprint_bounds(shape, region, stroke, w, h)
        ys, xs = np.nonzero(mask)
        assert np.all((xs + 0.5 > bx0) & (xs + 0.5 < bx1) & (ys + 0.5 > by0) & (ys + 0.5 < by1))
        assert draw_overlay(img, shape, region, (1, 2, 3), stroke) == out


class TestResize:
    def test_identity(self):
        img = random_image(np.random.default_rng(5), 13, 7)
        assert resize_bilinear(img, 13, 7) == img

    @pytest.mark.parametrize("w,h", [(1, 1), (5, 3), (40, 17)])
    def test_uniform(self, w, h):
        img = ImageRaster.filled(6, 9, (10, 100, 250))
        assert resize_bilinear(img, w, h) == ImageRaster.filled(w, h, (10, 100, 250))

    def test_two_pixel_upsample_closed_form(self):
        px = np.zeros((1, 2, 3), dtype=np.uint8)
        px[0, 1] = 255
        out = resize_bilinear(ImageRaster(px), 4, 1)

        def oracle(i):
            s = (i + 0.5) * (2 / 4) - 0.5
            s = min(max(s, 0.0), 1.0)
            return round(0 * (1 - s) + 255 * s)

        assert [int(v) for v in out.pixels[0, :, 0]] == [oracle(i) for i in range(4)] == [0, 64, 191, 255]

    @pytest.mark.parametrize("w,h", [(0, 3), (3, 0)])
    def test_zero_dims(self, w, h):
        with pytest.raises(InvalidParameterError):
            resize_bilinear(ImageRaster.filled(2, 2, (0, 0, 0)), w, h)


def test_png_round_trip_is_lossless():
    img = random_image(np.random.default_rng(9), 12, 5)
    assert decode_image(encode_png(img)) == img


def test_raster_is_read_only():
    img = ImageRaster.filled(2, 2, (0, 0, 0))
    with pytest.raises(ValueError):
        img.pixels[0, 0, 0] = 1
