"""Tests for the image container, gradients, interpolation, warps, and I/O."""

import json

import numpy as np
import pytest
from PIL import Image

from dicfield import image as di
from dicfield.errors import (
    NonInvertibleWarpError,
    OutOfDomainError,
    TooSmallError,
    UnreadableFileError,
    UnsupportedBitDepthError,
)


def make_grid(fn, width=32, height=32):
    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
    return fn(xs, ys)


class TestGrayImage:
    def test_rejects_small(self):
        with pytest.raises(TooSmallError):
            di.GrayImage(np.zeros((2, 5)))
        with pytest.raises(TooSmallError):
            di.GrayImage(np.zeros((5, 2)))

    def test_rejects_out_of_range(self):
        with pytest.raises(ValueError):
            di.GrayImage(np.full((4, 4), 1.5))
        with pytest.raises(ValueError):
            di.GrayImage(np.full((4, 4), -0.1))

    def test_rejects_nonfinite(self):
        arr = np.zeros((4, 4))
        arr[1, 1] = np.nan
        with pytest.raises(ValueError):
            di.GrayImage(arr)

    def test_read_only(self):
        img = di.GrayImage(np.zeros((4, 4)))
        with pytest.raises(ValueError):
            img.intensities[0, 0] = 1.0

    def test_shape_properties(self):
        img = di.GrayImage(np.zeros((5, 7)))
        assert img.height == 5
        assert img.width == 7
        assert img.shape == (5, 7)


class TestGradients:
    def test_constant_image_zero(self):
        img = di.GrayImage(np.full((16, 16), 0.3))
        g = di.gradients(img)
        assert np.all(g.fx == 0.0)
        assert np.all(g.fy == 0.0)

    def test_ramp(self):
        width, height = 20, 16
        arr = make_grid(lambda x, y: x / width, width, height)
        g = di.gradients(di.GrayImage(arr))
        assert np.allclose(g.fx, 1.0 / width, atol=1e-15)
        assert np.allclose(g.fy, 0.0, atol=1e-15)

    def test_matches_brute_force_interior(self):
        rng = np.random.default_rng(7)
        arr = rng.uniform(0.0, 1.0, size=(32, 32))
        g = di.gradients(di.GrayImage(arr))
        for i in range(1, 31):
            for j in range(1, 31):
                fx = (arr[i, j + 1] - arr[i, j - 1]) / 2.0
                fy = (arr[i + 1, j] - arr[i - 1, j]) / 2.0
                assert abs(g.fx[i, j] - fx) < 1e-12
                assert abs(g.fy[i, j] - fy) < 1e-12

    def test_one_sided_at_borders(self):
        rng = np.random.default_rng(3)
        arr = rng.uniform(0.0, 1.0, size=(8, 8))
        g = di.gradients(di.GrayImage(arr))
        assert abs(g.fx[4, 0] - (arr[4, 1] - arr[4, 0])) < 1e-12
        assert abs(g.fx[4, 7] - (arr[4, 7] - arr[4, 6])) < 1e-12
        assert abs(g.fy[0, 4] - (arr[1, 4] - arr[0, 4])) < 1e-12


class TestInterpolator:
    def test_exact_at_integer_knots(self):
        rng = np.random.default_rng(11)
        arr = rng.uniform(0.0, 1.0, size=(16, 16))
        itp = di.Interpolator(di.GrayImage(arr))
        for y in range(2, 14):
            for x in range(2, 14):
                assert abs(itp(float(x), float(y)) - arr[y, x]) < 1e-12

    def test_linear_ramp_midpoint(self):
        arr = make_grid(lambda x, y: x / 31.0)
        itp = di.Interpolator(di.GrayImage(arr))
        assert abs(itp(1.5 if 1.5 >= itp.x_min else 2.5, 5.0)
                   - (1.5 if 1.5 >= itp.x_min else 2.5) / 31.0) < 1e-12

    def test_cubic_polynomial_exact(self):
        # f(x) = x^3, scaled into [0,1]; query at x = 2.25
        scale = 31.0 ** 3
        arr = make_grid(lambda x, y: x ** 3 / scale)
        itp = di.Interpolator(di.GrayImage(arr))
        got = itp(2.25, 10.0) * scale
        assert abs(got - 2.25 ** 3) < 1e-9

    def test_bicubic_polynomial_exact_2d(self):
        # full tensor-product cubic in x and y
        def f(x, y):
            return (x ** 3 - 2 * x * x + x) * (2 * y ** 3 + y * y - 3 * y)

        arr = make_grid(f)
        lo, hi = arr.min(), arr.max()
        norm = di.GrayImage((arr - lo) / (hi - lo))
        itp = di.Interpolator(norm)
        for x, y in [(2.25, 3.75), (5.5, 17.125), (28.9, 2.0), (13.3, 29.0)]:
            want = (f(np.float64(x), np.float64(y)) - lo) / (hi - lo)
            assert abs(itp(x, y) - want) < 1e-9

    def test_gradient_matches_polynomial(self):
        scale = 2.0 * 31.0 ** 3
        arr = make_grid(lambda x, y: (x ** 3 + y * y * x) / scale)
        itp = di.Interpolator(di.GrayImage(arr))
        x, y = 7.3, 11.6
        gx, gy = itp.grad(x, y)
        assert abs(gx * scale - (3 * x * x + y * y)) < 1e-8
        assert abs(gy * scale - 2 * y * x) < 1e-8

    def test_out_of_domain_raises(self):
        itp = di.Interpolator(di.GrayImage(np.zeros((16, 16))))
        with pytest.raises(OutOfDomainError):
            itp(1.9, 8.0)
        with pytest.raises(OutOfDomainError):
            itp(8.0, 13.5)

    def test_vectorized_matches_scalar(self):
        rng = np.random.default_rng(5)
        arr = rng.uniform(0.0, 1.0, size=(24, 24))
        itp = di.Interpolator(di.GrayImage(arr))
        xs = rng.uniform(2.0, 21.0, size=40)
        ys = rng.uniform(2.0, 21.0, size=40)
        vec = itp(xs, ys)
        for k in range(40):
            assert abs(vec[k] - itp(xs[k], ys[k])) < 1e-14


class TestAnalyticWarp:
    def test_translation_roundtrip(self):
        w = di.AnalyticWarp.translation(3.2, -1.7)
        x, y = w.apply(10.0, 20.0)
        assert (x, y) == (13.2, 18.3)
        X, Y, ok = w.invert(x, y)
        assert ok.all() if hasattr(ok, "all") else ok
        assert abs(X - 10.0) < 1e-12 and abs(Y - 20.0) < 1e-12

    def test_rotation_limit(self):
        with pytest.raises(NonInvertibleWarpError):
            di.AnalyticWarp.rotation(11.0, center=(8, 8))

    def test_affine_limit(self):
        with pytest.raises(NonInvertibleWarpError):
            di.AnalyticWarp.affine(0, 0, 0.2, 0, 0, 0)

    def test_rotation_roundtrip(self):
        w = di.AnalyticWarp.rotation(5.0, center=(16.0, 16.0))
        xs = np.array([4.0, 10.0, 25.0])
        ys = np.array([7.0, 30.0, 16.0])
        fx, fy = w.apply(xs, ys)
        X, Y, ok = w.invert(fx, fy)
        assert ok.all()
        assert np.allclose(X, xs, atol=1e-12)
        assert np.allclose(Y, ys, atol=1e-12)

    def test_polynomial_newton_inverse(self):
        w = di.AnalyticWarp.polynomial(
            {"u": 0.4, "u_x": 0.01, "u_xx": 1e-4, "v": -0.2, "v_y": 0.02,
             "u_xy": 5e-5}, center=(16.0, 16.0))
        xs = np.array([5.0, 12.0, 27.0])
        ys = np.array([6.0, 22.0, 30.0])
        fx, fy = w.apply(xs, ys)
        X, Y, ok = w.invert(fx, fy)
        assert ok.all()
        assert np.allclose(X, xs, atol=1e-8)
        assert np.allclose(Y, ys, atol=1e-8)

    def test_mode_i_displacement_shape(self):
        p = di.ModeIParams(k1=5.0, mu=1000.0, kappa=2.0, tip=(16.0, 16.5))
        u, v = di.mode_i_displacement(np.array([20.0]), np.array([16.5]), p)
        # directly ahead of the tip (theta = 0): opening v = 0, u > 0
        assert abs(v[0]) < 1e-12
        assert u[0] > 0.0

    def test_mode_i_opening_antisymmetric(self):
        p = di.ModeIParams(k1=5.0, mu=1000.0, kappa=2.0, tip=(16.0, 16.0))
        u_up, v_up = di.mode_i_displacement(10.0, 16.0 + 1e-6, p)
        u_dn, v_dn = di.mode_i_displacement(10.0, 16.0 - 1e-6, p)
        # crack faces behind the tip open symmetrically
        assert v_up > 0.0 > v_dn
        assert abs(v_up + v_dn) < 1e-9
        assert abs(u_up - u_dn) < 1e-9


class TestSynthDeform:
    def speckle(self):
        rng = np.random.default_rng(42)
        return di.GrayImage(rng.uniform(0.05, 0.95, size=(64, 64)))

    def test_identity_is_identity_on_valid(self):
        img = self.speckle()
        res = di.synth_deform(img, di.AnalyticWarp.translation(0.0, 0.0))
        assert np.array_equal(res.image.intensities[res.valid],
                              img.intensities[res.valid])
        assert res.valid.sum() > 0

    def test_integer_translation_exact(self):
        img = self.speckle()
        res = di.synth_deform(img, di.AnalyticWarp.translation(3.0, -2.0))
        ys, xs = np.nonzero(res.valid)
        src = img.intensities[ys + 2, xs - 3]
        assert np.allclose(res.image.intensities[ys, xs], src, atol=1e-12)

    def test_invalid_pixels_are_half(self):
        img = self.speckle()
        res = di.synth_deform(img, di.AnalyticWarp.translation(10.0, 0.0))
        assert (~res.valid).sum() > 0
        assert np.all(res.image.intensities[~res.valid] == 0.5)

    @staticmethod
    def compose_error(img):
        a = di.synth_deform(img, di.AnalyticWarp.translation(0.3, 0.6))
        b = di.synth_deform(a.image, di.AnalyticWarp.translation(0.4, -0.2))
        direct = di.synth_deform(img, di.AnalyticWarp.translation(0.7, 0.4))
        both = b.valid & a.valid & direct.valid
        # stay clear of pixels whose stencil touched first-pass fill values
        interior = np.zeros_like(both)
        interior[8:-8, 8:-8] = True
        m = both & interior
        assert m.sum() > 100
        return np.abs(b.image.intensities[m]
                      - direct.image.intensities[m]).max()

    def test_composition_of_translations(self):
        # two sequential resamplings equal the single combined resampling
        # wherever the interpolant represents the content exactly
        ys, xs = np.mgrid[0:64, 0:64].astype(np.float64)
        cubic = di.GrayImage((xs ** 3 + ys ** 3) / (2 * 63.0 ** 3))
        assert self.compose_error(cubic) < 1e-6

    def test_composition_approximate_on_smooth_field(self):
        ys, xs = np.mgrid[0:64, 0:64].astype(np.float64)
        smooth = di.GrayImage(
            0.5 + 0.4 * np.sin(2 * np.pi * xs / 32) * np.cos(2 * np.pi * ys / 32))
        assert self.compose_error(smooth) < 1e-4

    def test_noise_is_seeded(self):
        img = self.speckle()
        w = di.AnalyticWarp.translation(0.5, 0.5)
        r1 = di.synth_deform(img, w, noise_std=0.01, noise_seed=9)
        r2 = di.synth_deform(img, w, noise_std=0.01, noise_seed=9)
        r3 = di.synth_deform(img, w, noise_std=0.01, noise_seed=10)
        assert np.array_equal(r1.image.intensities, r2.image.intensities)
        assert not np.array_equal(r1.image.intensities, r3.image.intensities)


class TestFileIO:
    def test_8bit_full_scale(self, tmp_path):
        p = tmp_path / "white.png"
        Image.fromarray(np.full((8, 8), 255, dtype=np.uint8), mode="L").save(p)
        img = di.load_image(p)
        assert np.all(img.intensities == 1.0)

    def test_16bit_zero(self, tmp_path):
        p = tmp_path / "black.png"
        Image.fromarray(np.zeros((8, 8), dtype=np.uint16)).save(p)
        img = di.load_image(p)
        assert np.all(img.intensities == 0.0)

    def test_rgb_channel_average(self, tmp_path):
        p = tmp_path / "rgb.png"
        rgb = np.zeros((8, 8, 3), dtype=np.uint8)
        rgb[..., 0] = 30
        rgb[..., 1] = 60
        rgb[..., 2] = 90
        Image.fromarray(rgb, mode="RGB").save(p)
        img = di.load_image(p)
        assert np.allclose(img.intensities, (30 + 60 + 90) / (3 * 255.0),
                           atol=1e-12)

    def test_tiff_roundtrip(self, tmp_path):
        p = tmp_path / "gray.tif"
        data = (np.arange(64, dtype=np.uint8).reshape(8, 8) * 3)
        Image.fromarray(data, mode="L").save(p)
        img = di.load_image(p)
        assert np.allclose(img.intensities, data / 255.0)

    def test_unreadable(self, tmp_path):
        p = tmp_path / "junk.png"
        p.write_bytes(b"this is not a png")
        with pytest.raises(UnreadableFileError):
            di.load_image(p)
        with pytest.raises(UnreadableFileError):
            di.load_image(tmp_path / "missing.png")

    def test_unsupported_mode(self, tmp_path):
        p = tmp_path / "f32.tif"
        Image.fromarray(np.zeros((8, 8), dtype=np.float32), mode="F").save(p)
        with pytest.raises(UnsupportedBitDepthError):
            di.load_image(p)

    def test_too_small(self, tmp_path):
        p = tmp_path / "tiny.png"
        Image.fromarray(np.zeros((2, 2), dtype=np.uint8), mode="L").save(p)
        with pytest.raises(TooSmallError):
            di.load_image(p)

    def test_save_16bit_roundtrip(self, tmp_path):
        rng = np.random.default_rng(1)
        img = di.GrayImage(rng.uniform(0, 1, size=(16, 16)))
        p = tmp_path / "out.png"
        di.save_image(img, p, bit_depth=16)
        back = di.load_image(p)
        assert np.allclose(back.intensities, img.intensities, atol=1.0 / 65535)

    def test_save_synth_sidecar(self, tmp_path):
        rng = np.random.default_rng(2)
        img = di.GrayImage(rng.uniform(0, 1, size=(32, 32)))
        res = di.synth_deform(img, di.AnalyticWarp.translation(4.0, 0.0))
        p = tmp_path / "synth.png"
        di.save_synth(res, p)
        assert p.exists()
        meta = json.loads((tmp_path / "synth_mask.json").read_text())
        assert meta["width"] == 32 and meta["height"] == 32
        assert 0.0 < meta["valid_fraction"] < 1.0
        mask = np.asarray(Image.open(tmp_path / "synth_mask.png"))
        assert np.array_equal(mask > 0, res.valid)
