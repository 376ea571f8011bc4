"""False-color field rendering: palette tables, pixel mapping, masking,
annotation strip, and byte determinism."""

import io

import numpy as np
import pytest
from PIL import Image

from dicfield.errors import EmptyFieldError
from dicfield.render import palette_lut, render_map


def decode(png: bytes) -> np.ndarray:
    return np.asarray(Image.open(io.BytesIO(png)).convert("RGBA"))


class TestPalettes:
    @pytest.mark.parametrize("name", ["thermal", "coolwarm", "gray"])
    def test_shape_and_dtype(self, name):
        lut = palette_lut(name)
        assert lut.shape == (256, 3)
        assert lut.dtype == np.uint8

    def test_gray_is_identity_ramp(self):
        lut = palette_lut("gray")
        want = np.repeat(np.arange(256, dtype=np.uint8)[:, None], 3, axis=1)
        np.testing.assert_array_equal(lut, want)

    def test_unknown_palette_rejected(self):
        with pytest.raises(ValueError, match="palette"):
            palette_lut("viridis")


class TestRenderMap:
    def test_output_is_png_with_upscaled_map(self):
        field = np.linspace(0.0, 1.0, 24).reshape(4, 6)
        png = render_map(field, upscale=5)
        arr = decode(png)
        # map block magnified 5x, annotation strip appended below
        assert arr.shape[0] > 4 * 5
        assert arr.shape[1] >= 6 * 5
        assert (arr[:20, :30, 3] == 255).all()

    def test_constant_field_uses_palette_midpoint(self):
        png = render_map(np.full((3, 3), 2.5), palette="thermal", upscale=2)
        arr = decode(png)
        mid = palette_lut("thermal")[128]
        np.testing.assert_array_equal(arr[:6, :6, :3].reshape(-1, 3),
                                      np.tile(mid, (36, 1)))

    def test_explicit_equal_range_uses_midpoint(self):
        png = render_map(np.zeros((2, 2)), v_range=(2.0, 2.0),
                         palette="gray", upscale=1)
        arr = decode(png)
        np.testing.assert_array_equal(arr[:2, :2, :3], 128)

    def test_linear_ramp_maps_to_full_palette(self):
        field = np.arange(256, dtype=np.float64)[None, :]
        png = render_map(field, v_range=(0.0, 255.0), palette="coolwarm",
                         upscale=1)
        arr = decode(png)
        np.testing.assert_array_equal(arr[0, :256, :3],
                                      palette_lut("coolwarm"))

    def test_nan_nodes_are_transparent(self):
        field = np.ones((2, 2))
        field[0, 1] = np.nan
        arr = decode(render_map(field, upscale=3))
        assert (arr[0:3, 3:6, 3] == 0).all()
        assert (arr[0:3, 0:3, 3] == 255).all()

    def test_valid_mask_hides_finite_nodes(self):
        field = np.ones((2, 2))
        valid = np.array([[True, True], [True, False]])
        arr = decode(render_map(field, valid=valid, upscale=3))
        assert (arr[3:6, 3:6, 3] == 0).all()
        assert (arr[0:3, :6, 3] == 255).all()

    def test_all_invalid_raises(self):
        with pytest.raises(EmptyFieldError):
            render_map(np.full((3, 3), np.nan))
        with pytest.raises(EmptyFieldError):
            render_map(np.ones((3, 3)), valid=np.zeros((3, 3), dtype=bool))

    def test_values_clamped_to_range(self):
        field = np.array([[-10.0, 10.0]])
        arr = decode(render_map(field, v_range=(0.0, 1.0), palette="gray",
                                upscale=1))
        assert tuple(arr[0, 0, :3]) == (0, 0, 0)
        assert tuple(arr[0, 1, :3]) == (255, 255, 255)

    def test_bad_arguments_rejected(self):
        with pytest.raises(ValueError, match="2D"):
            render_map(np.ones(5))
        with pytest.raises(ValueError, match="upscale"):
            render_map(np.ones((2, 2)), upscale=0)
        with pytest.raises(ValueError, match="range"):
            render_map(np.ones((2, 2)), v_range=(1.0, 0.0))
        with pytest.raises(ValueError, match="range"):
            render_map(np.ones((2, 2)), v_range=(0.0, np.nan))

    def test_annotation_strip_present(self):
        arr = decode(render_map(np.zeros((2, 2)), v_range=(0.0, 1.0),
                                upscale=4))
        strip = arr[8:]
        # white background with dark label pixels drawn on it
        assert (strip[:, :, 3] == 255).all()
        assert (strip.reshape(-1, 4)[:, :3] == 255).all(axis=1).any()
        assert (strip.reshape(-1, 4)[:, :3] == 0).all(axis=1).any()

    def test_byte_determinism(self):
        rng = np.random.default_rng(3)
        field = rng.normal(size=(9, 13))
        field[2, 5] = np.nan
        a = render_map(field, palette="thermal")
        b = render_map(field, palette="thermal")
        assert a == b
