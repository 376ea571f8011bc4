"""Volume correlation tests: trilinear interpolation, 3D subset
matching with SSCC/NCCC criteria, volumetric strain fits, and volume
file I/O.

Oracles: analytic separable fields for the interpolator (trilinear is
exact on them), synthetic integer/subvoxel translations of random-blob
volumes for the matcher, and analytic/central-difference gradients for
the strain fits.
"""

import json

import numpy as np
import pytest

from dicfield import dvc
from dicfield.errors import (
    DivergedError,
    InsufficientSupportError,
    OutOfDomainError,
    TooSmallError,
    UnreadableFileError,
    ZeroVarianceSubvolumeError,
)


def blob_volume(shape, n_blobs, seed, sigma_lo=1.2, sigma_hi=2.5):
    """Random Gaussian-blob texture in [0, 1] (speckle-like)."""
    nz, ny, nx = shape
    rng = np.random.default_rng(seed)
    z, y, x = np.meshgrid(np.arange(nz), np.arange(ny), np.arange(nx),
                          indexing="ij")
    f = np.zeros(shape)
    for _ in range(n_blobs):
        cx = rng.uniform(0, nx)
        cy = rng.uniform(0, ny)
        cz = rng.uniform(0, nz)
        s = rng.uniform(sigma_lo, sigma_hi)
        a = rng.uniform(0.3, 0.9)
        f += a * np.exp(-((x - cx) ** 2 + (y - cy) ** 2 + (z - cz) ** 2)
                        / (2 * s * s))
    return dvc.Volume(np.clip(f, 0.0, 1.0))


def warp_translate(vol, t):
    """Deformed volume sampled from the trilinear interpolant of ``vol``
    at positions shifted by ``-t`` (so features move by ``+t``)."""
    nz, ny, nx = vol.shape
    z, y, x = np.meshgrid(np.arange(nz), np.arange(ny), np.arange(nx),
                          indexing="ij")
    xs = np.clip(x - t[0], 0, nx - 1).ravel()
    ys = np.clip(y - t[1], 0, ny - 1).ravel()
    zs = np.clip(z - t[2], 0, nz - 1).ravel()
    return dvc.Volume(dvc.trilinear(vol, xs, ys, zs).reshape(vol.shape))


def uniform_grid(lo, hi, spacing):
    return dvc.VolGrid.box(lo, lo, lo, hi, hi, hi, spacing)


def make_displacement(grid, u_fn, v_fn, w_fn):
    """Synthetic VolDisplacement from closed-form component functions."""
    u = u_fn(grid.px, grid.py, grid.pz).astype(np.float64)
    v = v_fn(grid.px, grid.py, grid.pz).astype(np.float64)
    w = w_fn(grid.px, grid.py, grid.pz).astype(np.float64)
    return dvc.VolDisplacement(
        grid=grid, u=u, v=v, w=w, cost=np.zeros(grid.shape),
        valid=np.ones(grid.shape, dtype=bool), criterion="SSCC")


class TestVolume:
    def test_axis_order_and_dims(self):
        vol = dvc.Volume(np.zeros((6, 7, 8)))
        assert vol.nz == 6
        assert vol.ny == 7
        assert vol.nx == 8
        assert vol.shape == (6, 7, 8)

    def test_intensities_read_only(self):
        vol = dvc.Volume(np.zeros((5, 5, 5)))
        with pytest.raises(ValueError):
            vol.intensities[0, 0, 0] = 1.0

    def test_wrong_ndim_rejected(self):
        with pytest.raises(TooSmallError):
            dvc.Volume(np.zeros((5, 5)))

    def test_small_dimension_rejected(self):
        with pytest.raises(TooSmallError):
            dvc.Volume(np.zeros((4, 8, 8)))

    def test_non_finite_rejected(self):
        arr = np.zeros((5, 5, 5))
        arr[2, 2, 2] = np.nan
        with pytest.raises(ValueError):
            dvc.Volume(arr)

    def test_out_of_range_rejected(self):
        arr = np.zeros((5, 5, 5))
        arr[0, 0, 0] = 1.5
        with pytest.raises(ValueError):
            dvc.Volume(arr)
        arr[0, 0, 0] = -0.1
        with pytest.raises(ValueError):
            dvc.Volume(arr)


class TestTrilinear:
    def test_integer_coordinates_exact(self):
        vol = blob_volume((6, 7, 8), 30, seed=0)
        rng = np.random.default_rng(1)
        xs = rng.integers(0, 8, 25).astype(float)
        ys = rng.integers(0, 7, 25).astype(float)
        zs = rng.integers(0, 6, 25).astype(float)
        got = dvc.trilinear(vol, xs, ys, zs)
        want = vol.intensities[zs.astype(int), ys.astype(int),
                               xs.astype(int)]
        np.testing.assert_array_equal(got, want)

    def test_linear_field_midpoint(self):
        z, y, x = np.meshgrid(np.arange(6), np.arange(6), np.arange(6),
                              indexing="ij")
        vol = dvc.Volume(x / 5.0)
        assert dvc.trilinear(vol, 2.5, 3.0, 1.0) == pytest.approx(
            2.5 / 5.0, abs=1e-15)

    def test_separable_product_field_exact(self):
        nz, ny, nx = 6, 7, 8
        z, y, x = np.meshgrid(np.arange(nz), np.arange(ny), np.arange(nx),
                              indexing="ij")
        vol = dvc.Volume(
            (x / (nx - 1)) * (y / (ny - 1)) * (z / (nz - 1)))
        rng = np.random.default_rng(2)
        xs = rng.uniform(0, nx - 1, 50)
        ys = rng.uniform(0, ny - 1, 50)
        zs = rng.uniform(0, nz - 1, 50)
        got = dvc.trilinear(vol, xs, ys, zs)
        want = (xs / (nx - 1)) * (ys / (ny - 1)) * (zs / (nz - 1))
        np.testing.assert_allclose(got, want, atol=1e-9)

    def test_scalar_query_returns_float(self):
        vol = blob_volume((5, 5, 5), 10, seed=3)
        out = dvc.trilinear(vol, 2.25, 1.5, 3.75)
        assert isinstance(out, float)

    def test_far_face_query(self):
        vol = blob_volume((5, 6, 7), 10, seed=4)
        assert dvc.trilinear(vol, 6.0, 5.0, 4.0) == pytest.approx(
            vol.intensities[4, 5, 6], abs=1e-15)

    def test_outside_domain_rejected(self):
        vol = blob_volume((5, 5, 5), 10, seed=5)
        with pytest.raises(OutOfDomainError):
            dvc.trilinear(vol, -0.1, 2.0, 2.0)
        with pytest.raises(OutOfDomainError):
            dvc.trilinear(vol, 2.0, 2.0, 4.0 + 1e-9)


class TestVolGrid:
    def test_box_coordinates(self):
        grid = uniform_grid(10.0, 20.0, 5)
        assert grid.shape == (3, 3, 3)
        assert grid.px[0, 0, 0] == 10.0
        assert grid.px[0, 0, 2] == 20.0
        # px varies along the last axis, pz along the first
        assert grid.pz[2, 0, 0] == 20.0
        assert grid.py[0, 1, 0] == 15.0

    def test_mismatched_shapes_rejected(self):
        with pytest.raises(ValueError):
            dvc.VolGrid(px=np.zeros((2, 2, 2)), py=np.zeros((2, 2, 2)),
                        pz=np.zeros((2, 2, 1)), spacing=5)

    def test_bad_spacing_rejected(self):
        with pytest.raises(ValueError):
            uniform_grid(10.0, 20.0, 0)

    def test_empty_box_rejected(self):
        with pytest.raises(ValueError):
            dvc.VolGrid.box(20.0, 10.0, 10.0, 10.0, 20.0, 20.0, 5)


class TestDvcMatch:
    def test_identity_match_is_perfect(self):
        ref = blob_volume((30, 30, 30), 90, seed=6)
        grid = uniform_grid(10.0, 20.0, 5)
        opts = dvc.DvcOptions(subvol_m=5, search_radius=1)
        disp = dvc.dvc_match(ref, ref, grid, opts=opts)
        assert disp.valid.all()
        np.testing.assert_array_equal(disp.u, 0.0)
        np.testing.assert_array_equal(disp.v, 0.0)
        np.testing.assert_array_equal(disp.w, 0.0)
        np.testing.assert_allclose(disp.cost, 0.0, atol=1e-24)

    def test_identity_match_nccc_cost_is_one(self):
        ref = blob_volume((30, 30, 30), 90, seed=6)
        grid = uniform_grid(10.0, 20.0, 5)
        opts = dvc.DvcOptions(subvol_m=5, search_radius=1)
        disp = dvc.dvc_match(ref, ref, grid, criterion="NCCC", opts=opts)
        assert disp.criterion == "NCCC"
        np.testing.assert_allclose(disp.cost, 1.0, atol=1e-12)

    def test_integer_translation_recovered_exactly(self):
        parent = blob_volume((50, 50, 50), 260, seed=7)
        pa = parent.intensities
        # deformed(x) = ref(x - t) with t = (2, -1, 3)
        ref = dvc.Volume(pa[5:45, 5:45, 5:45])
        deformed = dvc.Volume(pa[2:42, 6:46, 3:43])
        grid = uniform_grid(15.0, 25.0, 5)
        opts = dvc.DvcOptions(subvol_m=5, search_radius=3)
        disp = dvc.dvc_match(ref, deformed, grid, opts=opts)
        assert disp.valid.all()
        np.testing.assert_array_equal(disp.u, 2.0)
        np.testing.assert_array_equal(disp.v, -1.0)
        np.testing.assert_array_equal(disp.w, 3.0)
        np.testing.assert_allclose(disp.cost, 0.0, atol=1e-20)

    def test_subvoxel_translation_within_tolerance(self):
        ref = blob_volume((50, 50, 50), 240, seed=5)
        deformed = warp_translate(ref, (0.4, 0.0, 0.0))
        grid = uniform_grid(13.0, 37.0, 6)
        opts = dvc.DvcOptions(search_radius=2)  # default subvolume size
        disp = dvc.dvc_match(ref, deformed, grid, opts=opts)
        assert disp.valid.all()
        assert np.max(np.abs(disp.u - 0.4)) <= 0.05
        assert np.max(np.abs(disp.v)) <= 0.05
        assert np.max(np.abs(disp.w)) <= 0.05

    def test_deterministic_across_worker_counts(self):
        ref = blob_volume((40, 40, 40), 140, seed=8)
        deformed = warp_translate(ref, (0.3, -0.2, 0.1))
        grid = uniform_grid(14.0, 26.0, 6)
        base = dvc.DvcOptions(subvol_m=7, search_radius=1, n_workers=1)
        multi = dvc.DvcOptions(subvol_m=7, search_radius=1, n_workers=4)
        one = dvc.dvc_match(ref, deformed, grid, opts=base)
        four = dvc.dvc_match(ref, deformed, grid, opts=multi)
        np.testing.assert_array_equal(one.u, four.u)
        np.testing.assert_array_equal(one.v, four.v)
        np.testing.assert_array_equal(one.w, four.w)
        np.testing.assert_array_equal(one.cost, four.cost)
        np.testing.assert_array_equal(one.valid, four.valid)

    def test_criteria_ranges_and_relation(self):
        ref = blob_volume((30, 30, 30), 90, seed=9)
        deformed = warp_translate(ref, (0.2, 0.1, -0.3))
        grid = uniform_grid(12.0, 18.0, 6)
        opts = dvc.DvcOptions(subvol_m=5, search_radius=1)
        sscc = dvc.dvc_match(ref, deformed, grid, criterion="SSCC",
                             opts=opts)
        nccc = dvc.dvc_match(ref, deformed, grid, criterion="NCCC",
                             opts=opts)
        assert np.all(sscc.cost[sscc.valid] >= 0.0)
        assert np.all(nccc.cost[nccc.valid] >= -1.0)
        assert np.all(nccc.cost[nccc.valid] <= 1.0)
        # both criteria share the optimum; only the reported number
        # differs, by the linear relation between the two coefficients
        np.testing.assert_array_equal(nccc.u, sscc.u)
        np.testing.assert_allclose(
            nccc.cost[nccc.valid], 1.0 - 0.5 * sscc.cost[sscc.valid],
            atol=1e-12)

    def test_flat_reference_subvolume_raises(self):
        ref = dvc.Volume(np.full((30, 30, 30), 0.5))
        deformed = blob_volume((30, 30, 30), 90, seed=10)
        grid = uniform_grid(12.0, 18.0, 6)
        opts = dvc.DvcOptions(subvol_m=5, search_radius=1)
        with pytest.raises(ZeroVarianceSubvolumeError):
            dvc.dvc_match(ref, deformed, grid, opts=opts)

    def test_all_points_failing_raises_diverged(self):
        ref = blob_volume((30, 30, 30), 90, seed=11)
        deformed = dvc.Volume(np.full((30, 30, 30), 0.5))
        grid = uniform_grid(12.0, 18.0, 6)
        opts = dvc.DvcOptions(subvol_m=5, search_radius=1)
        with pytest.raises(DivergedError):
            dvc.dvc_match(ref, deformed, grid, opts=opts)

    def test_partial_failure_flags_point_invalid(self):
        ref = blob_volume((44, 44, 44), 180, seed=12)
        flat = ref.intensities.copy()
        flat[19:42, 19:42, 19:42] = 0.5  # swallow the second point
        deformed = dvc.Volume(flat)
        px = np.array([[[10.0, 30.0]]])
        grid = dvc.VolGrid(px=px, py=px.copy(), pz=px.copy(), spacing=20)
        opts = dvc.DvcOptions(subvol_m=5, search_radius=2)
        disp = dvc.dvc_match(ref, deformed, grid, opts=opts)
        assert bool(disp.valid[0, 0, 0])
        assert not bool(disp.valid[0, 0, 1])
        assert np.isnan(disp.cost[0, 0, 1])
        assert disp.u[0, 0, 1] == 0.0
        assert 0.0 < disp.valid_fraction() < 1.0

    def test_unknown_criterion_rejected(self):
        ref = blob_volume((30, 30, 30), 60, seed=13)
        grid = uniform_grid(12.0, 18.0, 6)
        with pytest.raises(ValueError):
            dvc.dvc_match(ref, ref, grid, criterion="ZNCC")

    def test_uncontained_subvolume_rejected(self):
        ref = blob_volume((30, 30, 30), 60, seed=14)
        grid = uniform_grid(5.0, 15.0, 5)  # 5 - 5 - 1 < 0 on deformed side
        opts = dvc.DvcOptions(subvol_m=5, search_radius=1)
        with pytest.raises(ValueError):
            dvc.dvc_match(ref, ref, grid, opts=opts)


class TestVolStrain:
    def test_uniform_translation_zero_tensor(self):
        grid = uniform_grid(10.0, 40.0, 5)
        disp = make_displacement(
            grid,
            lambda x, y, z: np.full_like(x, 0.7),
            lambda x, y, z: np.full_like(x, -0.3),
            lambda x, y, z: np.full_like(x, 0.1))
        strain = dvc.vol_strain(disp)
        assert strain.valid.all()
        np.testing.assert_allclose(strain.eps, 0.0, atol=1e-12)

    def test_uniaxial_linear_field(self):
        grid = uniform_grid(10.0, 40.0, 5)
        disp = make_displacement(
            grid,
            lambda x, y, z: 0.01 * x,
            lambda x, y, z: np.zeros_like(x),
            lambda x, y, z: np.zeros_like(x))
        strain = dvc.vol_strain(disp)
        assert strain.valid.all()
        np.testing.assert_allclose(strain.eps[..., 0, 0], 0.01, atol=1e-8)
        mask = np.ones((3, 3), dtype=bool)
        mask[0, 0] = False
        np.testing.assert_allclose(strain.eps[..., mask], 0.0, atol=1e-8)

    def test_affine_field_exact(self):
        rng = np.random.default_rng(15)
        g = rng.uniform(-0.02, 0.02, (3, 3))
        grid = uniform_grid(10.0, 40.0, 5)

        def comp(i):
            return lambda x, y, z: g[i, 0] * x + g[i, 1] * y + g[i, 2] * z

        disp = make_displacement(grid, comp(0), comp(1), comp(2))
        strain = dvc.vol_strain(disp)
        want = 0.5 * (g + g.T)
        assert strain.valid.all()
        np.testing.assert_allclose(
            strain.eps, np.broadcast_to(want, strain.eps.shape), atol=1e-10)

    def test_green_lagrange_option(self):
        rng = np.random.default_rng(16)
        g = rng.uniform(-0.05, 0.05, (3, 3))
        grid = uniform_grid(10.0, 40.0, 5)

        def comp(i):
            return lambda x, y, z: g[i, 0] * x + g[i, 1] * y + g[i, 2] * z

        disp = make_displacement(grid, comp(0), comp(1), comp(2))
        small = dvc.vol_strain(disp)
        finite = dvc.vol_strain(disp, finite_strain=True)
        want = 0.5 * (g + g.T + g.T @ g)
        assert finite.finite_strain
        np.testing.assert_allclose(
            finite.eps, np.broadcast_to(want, finite.eps.shape), atol=1e-10)
        # the quadratic term separates the two measures at this amplitude
        assert np.max(np.abs(finite.eps - small.eps)) > 1e-5

    def test_smooth_field_matches_central_differences(self):
        grid = uniform_grid(0.0, 40.0, 2)

        def u_fn(x, y, z):
            return 0.01 * np.sin(x / 8.0) * np.cos(y / 10.0)

        def v_fn(x, y, z):
            return 0.01 * np.cos(x / 9.0) * np.sin(z / 7.0)

        def w_fn(x, y, z):
            return 0.01 * np.sin(y / 11.0) * np.sin(z / 8.0)

        disp = make_displacement(grid, u_fn, v_fn, w_fn)
        strain = dvc.vol_strain(disp, neighborhood_radius=2)
        comps = [disp.u, disp.v, disp.w]
        inner = (slice(2, -2),) * 3
        # central-difference gradient tensor on the same samples
        gmats = np.empty(grid.shape + (3, 3))
        for i, comp in enumerate(comps):
            gmats[..., i, 0] = np.gradient(comp, grid.spacing, axis=2)
            gmats[..., i, 1] = np.gradient(comp, grid.spacing, axis=1)
            gmats[..., i, 2] = np.gradient(comp, grid.spacing, axis=0)
        eps_fd = 0.5 * (gmats + np.swapaxes(gmats, -1, -2))
        assert strain.valid[inner].all()
        np.testing.assert_allclose(
            strain.eps[inner], eps_fd[inner], atol=1e-3)

    def test_point_with_few_neighbors_invalid(self):
        grid = uniform_grid(10.0, 20.0, 5)  # 3x3x3 points
        disp = make_displacement(
            grid,
            lambda x, y, z: 0.01 * x,
            lambda x, y, z: np.zeros_like(x),
            lambda x, y, z: np.zeros_like(x))
        strain = dvc.vol_strain(disp, neighborhood_radius=1)
        # corner boxes hold 8 points (< 10); the center box holds 27
        assert not strain.valid[0, 0, 0]
        assert np.isnan(strain.eps[0, 0, 0]).all()
        assert strain.valid[1, 1, 1]

    def test_invalid_input_point_skipped(self):
        grid = uniform_grid(10.0, 40.0, 5)
        disp = make_displacement(
            grid,
            lambda x, y, z: 0.01 * x,
            lambda x, y, z: np.zeros_like(x),
            lambda x, y, z: np.zeros_like(x))
        disp.valid[3, 3, 3] = False
        strain = dvc.vol_strain(disp)
        assert not strain.valid[3, 3, 3]
        assert np.isnan(strain.eps[3, 3, 3]).all()
        assert strain.valid[0, 0, 0]

    def test_no_supported_point_raises(self):
        grid = uniform_grid(10.0, 15.0, 5)  # 2x2x2 points, boxes of 8
        disp = make_displacement(
            grid,
            lambda x, y, z: np.zeros_like(x),
            lambda x, y, z: np.zeros_like(x),
            lambda x, y, z: np.zeros_like(x))
        with pytest.raises(InsufficientSupportError):
            dvc.vol_strain(disp, neighborhood_radius=1)

    def test_bad_radius_rejected(self):
        grid = uniform_grid(10.0, 40.0, 5)
        disp = make_displacement(
            grid,
            lambda x, y, z: np.zeros_like(x),
            lambda x, y, z: np.zeros_like(x),
            lambda x, y, z: np.zeros_like(x))
        with pytest.raises(ValueError):
            dvc.vol_strain(disp, neighborhood_radius=0)


class TestVolumeIO:
    def test_raw_round_trip(self, tmp_path):
        vol = blob_volume((6, 7, 8), 30, seed=17)
        header = tmp_path / "vol.json"
        dvc.save_volume(vol, header, fmt="raw")
        assert (tmp_path / "vol.bin").exists()
        meta = json.loads(header.read_text())
        assert (meta["nx"], meta["ny"], meta["nz"]) == (8, 7, 6)
        back = dvc.load_volume(header)
        assert back.shape == vol.shape
        np.testing.assert_allclose(back.intensities, vol.intensities,
                                   atol=1e-7)

    def test_png_slices_round_trip(self, tmp_path):
        vol = blob_volume((5, 6, 7), 25, seed=18)
        header = tmp_path / "stack.json"
        dvc.save_volume(vol, header, fmt="png_slices")
        assert (tmp_path / "stack_0000.png").exists()
        assert (tmp_path / "stack_0004.png").exists()
        back = dvc.load_volume(header)
        assert back.shape == vol.shape
        np.testing.assert_allclose(back.intensities, vol.intensities,
                                   atol=1e-4)

    def test_unknown_save_format_rejected(self, tmp_path):
        vol = blob_volume((5, 5, 5), 10, seed=19)
        with pytest.raises(ValueError):
            dvc.save_volume(vol, tmp_path / "vol.json", fmt="tiff")

    def test_missing_header_rejected(self, tmp_path):
        with pytest.raises(UnreadableFileError):
            dvc.load_volume(tmp_path / "absent.json")

    def test_malformed_header_rejected(self, tmp_path):
        path = tmp_path / "vol.json"
        path.write_text("{not json")
        with pytest.raises(UnreadableFileError):
            dvc.load_volume(path)

    def test_header_missing_keys_rejected(self, tmp_path):
        path = tmp_path / "vol.json"
        path.write_text(json.dumps({"format": "raw", "nx": 5}))
        with pytest.raises(UnreadableFileError):
            dvc.load_volume(path)

    def test_truncated_raw_data_rejected(self, tmp_path):
        vol = blob_volume((5, 5, 5), 10, seed=20)
        header = tmp_path / "vol.json"
        dvc.save_volume(vol, header, fmt="raw")
        data = tmp_path / "vol.bin"
        data.write_bytes(data.read_bytes()[:-8])
        with pytest.raises(UnreadableFileError):
            dvc.load_volume(header)

    def test_missing_slice_rejected(self, tmp_path):
        vol = blob_volume((5, 5, 5), 10, seed=21)
        header = tmp_path / "stack.json"
        dvc.save_volume(vol, header, fmt="png_slices")
        (tmp_path / "stack_0003.png").unlink()
        with pytest.raises(UnreadableFileError):
            dvc.load_volume(header)

    def test_wrong_slice_shape_rejected(self, tmp_path):
        vol = blob_volume((5, 5, 5), 10, seed=22)
        other = blob_volume((5, 6, 7), 10, seed=23)
        header = tmp_path / "stack.json"
        dvc.save_volume(vol, header, fmt="png_slices")
        dvc.save_volume(other, tmp_path / "other.json", fmt="png_slices")
        import shutil

        shutil.copy(tmp_path / "other_0000.png", tmp_path / "stack_0002.png")
        with pytest.raises(UnreadableFileError):
            dvc.load_volume(header)

    def test_unknown_header_format_rejected(self, tmp_path):
        path = tmp_path / "vol.json"
        path.write_text(json.dumps(
            {"format": "mystery", "nx": 5, "ny": 5, "nz": 5}))
        with pytest.raises(UnreadableFileError):
            dvc.load_volume(path)
