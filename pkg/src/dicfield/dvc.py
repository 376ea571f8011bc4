"""Digital volume correlation: 3D subset matching over voxel volumes
and volumetric strain from local least-squares displacement fits.

Conventions mirror the 2D engine: a subvolume is the (2M+1)^3 voxel
window around a measurement point; matching runs an integer search
followed by Gauss-Newton refinement of a first-order (affine) shape
function against trilinearly interpolated intensities. Correlation
quality uses zero-normalized criteria — SSCC (sum-of-squares, minimized,
in [0, 4]) and NCCC (normalized cross-correlation, maximized, in
[-1, 1]) — related by SSCC = 2 (1 - NCCC), so both select the same
optimum; the choice controls which number is reported.

Volume axes: ``intensities[z, y, x]`` — x is the fastest (column) axis,
matching the 2D row/column layout with slices stacked along z.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Tuple

import numpy as np
from scipy import ndimage

from .errors import (
    DivergedError,
    InsufficientSupportError,
    OutOfDomainError,
    TooSmallError,
    UnreadableFileError,
    ZeroVarianceSubvolumeError,
)

PARAM_KEYS = ("u", "u_x", "u_y", "u_z", "v", "v_x", "v_y", "v_z",
              "w", "w_x", "w_y", "w_z")


@dataclass(frozen=True)
class Volume:
    """Voxel intensity grid in [0, 1], indexed ``[z, y, x]``."""

    intensities: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.intensities, dtype=np.float64)
        if arr.ndim != 3:
            raise TooSmallError(f"expected 3D voxel grid, got ndim={arr.ndim}")
        if min(arr.shape) < 5:
            raise TooSmallError(
                f"volume must be at least 5 voxels per axis, got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("intensities must be finite")
        if arr.min() < 0.0 or arr.max() > 1.0:
            raise ValueError("intensities must lie in [0, 1]")
        arr = arr.copy()
        arr.flags.writeable = False
        object.__setattr__(self, "intensities", arr)

    @property
    def nx(self) -> int:
        return self.intensities.shape[2]

    @property
    def ny(self) -> int:
        return self.intensities.shape[1]

    @property
    def nz(self) -> int:
        return self.intensities.shape[0]

    @property
    def shape(self) -> Tuple[int, int, int]:
        return self.intensities.shape


def _check_inside(vol_shape, x, y, z):
    nz, ny, nx = vol_shape
    ok = ((x >= 0) & (x <= nx - 1) & (y >= 0) & (y <= ny - 1)
          & (z >= 0) & (z <= nz - 1))
    return ok


def _trilinear_arrays(arr: np.ndarray, x, y, z, with_grad: bool):
    nz, ny, nx = arr.shape
    # clamp the cell index so queries exactly on the far faces work
    ix = np.minimum(np.floor(x).astype(int), nx - 2)
    iy = np.minimum(np.floor(y).astype(int), ny - 2)
    iz = np.minimum(np.floor(z).astype(int), nz - 2)
    fx = x - ix
    fy = y - iy
    fz = z - iz
    c000 = arr[iz, iy, ix]
    c001 = arr[iz, iy, ix + 1]
    c010 = arr[iz, iy + 1, ix]
    c011 = arr[iz, iy + 1, ix + 1]
    c100 = arr[iz + 1, iy, ix]
    c101 = arr[iz + 1, iy, ix + 1]
    c110 = arr[iz + 1, iy + 1, ix]
    c111 = arr[iz + 1, iy + 1, ix + 1]
    # interpolate along x, then y, then z
    c00 = c000 + (c001 - c000) * fx
    c01 = c010 + (c011 - c010) * fx
    c10 = c100 + (c101 - c100) * fx
    c11 = c110 + (c111 - c110) * fx
    c0 = c00 + (c01 - c00) * fy
    c1 = c10 + (c11 - c10) * fy
    val = c0 + (c1 - c0) * fz
    if not with_grad:
        return val
    # analytic derivatives of the trilinear form
    dx00 = c001 - c000
    dx01 = c011 - c010
    dx10 = c101 - c100
    dx11 = c111 - c110
    dx0 = dx00 + (dx01 - dx00) * fy
    dx1 = dx10 + (dx11 - dx10) * fy
    gx = dx0 + (dx1 - dx0) * fz
    gy0 = c01 - c00
    gy1 = c11 - c10
    gy = gy0 + (gy1 - gy0) * fz
    gz = c1 - c0
    return val, gx, gy, gz


def trilinear(vol: Volume, x, y, z):
    """Trilinear interpolation of the volume at real voxel coordinates.

    Exact on fields of the form a + bx + cy + dz + exy + ... + hxyz
    (separately linear per axis). Scalar inputs return a float.

    Raises:
        OutOfDomainError: any query outside [0, n-1] on some axis.
    """
    xa = np.asarray(x, dtype=np.float64)
    ya = np.asarray(y, dtype=np.float64)
    za = np.asarray(z, dtype=np.float64)
    single = xa.ndim == 0
    xa, ya, za = np.atleast_1d(xa), np.atleast_1d(ya), np.atleast_1d(za)
    ok = _check_inside(vol.shape, xa, ya, za)
    if not np.all(ok):
        bad = np.argmax(~ok)
        raise OutOfDomainError(
            f"query ({xa.flat[bad]}, {ya.flat[bad]}, {za.flat[bad]}) "
            f"outside volume {vol.shape}")
    val = _trilinear_arrays(vol.intensities, xa, ya, za, with_grad=False)
    return float(val[0]) if single else val


# ----------------------------------------------------------------------


@dataclass(frozen=True)
class VolGrid:
    """Regular 3D lattice of measurement points (voxel coordinates)."""

    px: np.ndarray
    py: np.ndarray
    pz: np.ndarray
    spacing: int

    def __post_init__(self):
        if not (self.px.shape == self.py.shape == self.pz.shape):
            raise ValueError("grid component shapes differ")
        if self.spacing < 1:
            raise ValueError(f"spacing must be >= 1, got {self.spacing}")

    @property
    def shape(self) -> Tuple[int, int, int]:
        return self.px.shape

    @classmethod
    def box(cls, x_min: float, y_min: float, z_min: float, x_max: float,
            y_max: float, z_max: float, spacing: int) -> "VolGrid":
        """Grid covering the closed box at ``spacing`` voxels."""
        if spacing < 1:
            raise ValueError(f"spacing must be >= 1, got {spacing}")
        xs = np.arange(x_min, x_max + 1e-9, spacing, dtype=np.float64)
        ys = np.arange(y_min, y_max + 1e-9, spacing, dtype=np.float64)
        zs = np.arange(z_min, z_max + 1e-9, spacing, dtype=np.float64)
        if min(len(xs), len(ys), len(zs)) == 0:
            raise ValueError("requested box contains no grid points")
        pz, py, px = np.meshgrid(zs, ys, xs, indexing="ij")
        return cls(px=px, py=py, pz=pz, spacing=spacing)


@dataclass(frozen=True)
class DvcOptions:
    """Volume-matching controls.

    Convergence and windowing defaults (``subvol_m``, ``tol``,
    ``max_iter``, ``prefilter_sigma``) mirror the 2D engine; the integer
    search radius defaults smaller because its cost grows cubically.
    """

    subvol_m: int = 10
    tol: float = 1e-3
    max_iter: int = 50
    search_radius: int = 5
    n_workers: int = 1
    prefilter_sigma: float = 0.8


@dataclass
class VolDisplacement:
    """Full-field volume match: per-point displacement and cost."""

    grid: VolGrid
    u: np.ndarray
    v: np.ndarray
    w: np.ndarray
    cost: np.ndarray
    valid: np.ndarray
    criterion: str

    def valid_fraction(self) -> float:
        total = self.valid.size
        return float(self.valid.sum() / total) if total else 0.0


def _prefilter_volume(vol: Volume, sigma: float) -> np.ndarray:
    if sigma <= 0.0:
        return vol.intensities
    return np.clip(
        ndimage.gaussian_filter(vol.intensities, sigma, mode="nearest"),
        0.0, 1.0)


def _nccc_arrays(f: np.ndarray, g: np.ndarray) -> Optional[float]:
    fb = f - f.mean()
    gb = g - g.mean()
    denom = np.sqrt(np.sum(fb * fb) * np.sum(gb * gb))
    if denom < 1e-12:
        return None
    return float(np.sum(fb * gb) / denom)


def _subvol_offsets(m: int):
    span = np.arange(-m, m + 1, dtype=np.float64)
    dz, dy, dx = np.meshgrid(span, span, span, indexing="ij")
    return dx.ravel(), dy.ravel(), dz.ravel()


def _match_point(ref_arr, def_arr, x0, y0, z0, m, opts, jac, scale,
                 dx, dy, dz):
    """Match one subvolume; returns (u, v, w, sscc, ok)."""
    nz, ny, nx = ref_arr.shape
    ix, iy, iz = int(round(x0)), int(round(y0)), int(round(z0))
    f = ref_arr[iz - m:iz + m + 1, iy - m:iy + m + 1,
                ix - m:ix + m + 1].ravel()
    fb = f - f.mean()
    fn = np.sqrt(np.sum(fb * fb))
    if fn < 1e-12:
        raise ZeroVarianceSubvolumeError(
            f"reference subvolume at ({x0}, {y0}, {z0}) has no texture")
    fh = fb / fn

    # integer search: best NCCC over in-bounds shifts
    dnz, dny, dnx = def_arr.shape
    r = opts.search_radius
    best = (-2.0, 0, 0, 0)
    for sz in range(-r, r + 1):
        cz = iz + sz
        if cz - m < 0 or cz + m >= dnz:
            continue
        for sy in range(-r, r + 1):
            cy = iy + sy
            if cy - m < 0 or cy + m >= dny:
                continue
            for sx in range(-r, r + 1):
                cx = ix + sx
                if cx - m < 0 or cx + m >= dnx:
                    continue
                g = def_arr[cz - m:cz + m + 1, cy - m:cy + m + 1,
                            cx - m:cx + m + 1].ravel()
                c = _nccc_arrays(f, g)
                # strict inequality keeps the first (smallest sz, sy,
                # sx) on ties so results are deterministic
                if c is not None and c > best[0]:
                    best = (c, sx, sy, sz)
    if best[0] < -1.5:
        return 0.0, 0.0, 0.0, np.nan, False

    p = np.zeros(12)
    p[0], p[4], p[8] = float(best[1]), float(best[2]), float(best[3])

    def warp(pa):
        xp = x0 + dx + pa[0] + pa[1] * dx + pa[2] * dy + pa[3] * dz
        yp = y0 + dy + pa[4] + pa[5] * dx + pa[6] * dy + pa[7] * dz
        zp = z0 + dz + pa[8] + pa[9] * dx + pa[10] * dy + pa[11] * dz
        return xp, yp, zp

    def eval_normalized(pa):
        """Warped, centered, normalized deformed subvolume or None if
        the warp leaves the volume or flattens."""
        xp, yp, zp = warp(pa)
        if not np.all(_check_inside(def_arr.shape, xp, yp, zp)):
            return None
        g = _trilinear_arrays(def_arr, xp, yp, zp, with_grad=False)
        gb = g - g.mean()
        gn = np.sqrt(np.sum(gb * gb))
        if gn < 1e-12:
            return None
        return gb / gn

    converged = False
    for _ in range(opts.max_iter):
        xp, yp, zp = warp(p)
        if not np.all(_check_inside(def_arr.shape, xp, yp, zp)):
            return 0.0, 0.0, 0.0, np.nan, False
        g, gx, gy, gz = _trilinear_arrays(def_arr, xp, yp, zp,
                                          with_grad=True)
        gb = g - g.mean()
        gn = np.sqrt(np.sum(gb * gb))
        if gn < 1e-12:
            return 0.0, 0.0, 0.0, np.nan, False
        gh = gb / gn
        sscc_here = float(np.sum((fh - gh) ** 2))
        sd = (gx[:, None] * jac[:, 0, :] + gy[:, None] * jac[:, 1, :]
              + gz[:, None] * jac[:, 2, :])
        sd_c = sd - sd.mean(axis=0)
        j = (sd_c - np.outer(gh, gh @ sd_c)) / gn
        h = j.T @ j
        rhs = j.T @ (fh - gh)
        try:
            dp = np.linalg.solve(h, rhs)
        except np.linalg.LinAlgError:
            return 0.0, 0.0, 0.0, np.nan, False
        if np.linalg.norm(dp * scale) < opts.tol:
            p = p + dp
            converged = True
            break
        # damped step: halve until the cost strictly improves (the
        # trilinear cost surface has gradient kinks at cell crossings)
        t = 1.0
        improved = False
        for _ in range(12):
            gh_try = eval_normalized(p + t * dp)
            if gh_try is not None \
                    and float(np.sum((fh - gh_try) ** 2)) < sscc_here:
                improved = True
                break
            t *= 0.5
        if not improved:
            converged = True
            break
        p = p + t * dp
        if np.linalg.norm(t * dp * scale) < opts.tol:
            converged = True
            break

    gh_final = eval_normalized(p)
    if gh_final is None or not converged:
        return 0.0, 0.0, 0.0, np.nan, False
    sscc = float(np.sum((fh - gh_final) ** 2))
    return float(p[0]), float(p[4]), float(p[8]), sscc, True


def dvc_match(ref: Volume, deformed: Volume, grid: VolGrid,
              criterion: str = "SSCC",
              opts: Optional[DvcOptions] = None) -> VolDisplacement:
    """Full-field volume correlation.

    Each grid point is matched independently: integer search over the
    cubic window, then Gauss-Newton refinement of the 12-parameter
    affine shape function on trilinear intensities. Points whose
    refinement fails (flat texture, out-of-domain warp, no convergence)
    are flagged invalid. Commit order is by grid index regardless of
    worker count, so results are deterministic.

    Raises:
        ZeroVarianceSubvolumeError: a reference subvolume is constant.
        DivergedError: no grid point produced a valid match.
        ValueError: unknown criterion / grid not contained.
    """
    if criterion not in ("SSCC", "NCCC"):
        raise ValueError(f"criterion must be 'SSCC' or 'NCCC', "
                         f"got {criterion!r}")
    if opts is None:
        opts = DvcOptions()
    m = opts.subvol_m

    # reference subvolumes are sliced at integer centers; deformed-side
    # interpolation needs the full cell at the far face
    for vol, margin, name in ((ref, 0, "reference"),
                              (deformed, 1, "deformed")):
        nz, ny, nx = vol.shape
        ok = ((grid.px - m - margin >= 0) & (grid.py - m - margin >= 0)
              & (grid.pz - m - margin >= 0)
              & (grid.px + m + margin <= nx - 1)
              & (grid.py + m + margin <= ny - 1)
              & (grid.pz + m + margin <= nz - 1))
        if not np.all(ok):
            raise ValueError(
                f"{int((~ok).sum())} grid point(s) put the subvolume "
                f"outside the {name} volume {vol.shape}")

    ref_arr = _prefilter_volume(ref, opts.prefilter_sigma)
    def_arr = _prefilter_volume(deformed, opts.prefilter_sigma)

    dx, dy, dz = _subvol_offsets(m)
    n = dx.size
    one = np.ones(n)
    zero = np.zeros(n)
    jx = np.stack([one, dx, dy, dz] + [zero] * 8, axis=1)
    jy = np.stack([zero] * 4 + [one, dx, dy, dz] + [zero] * 4, axis=1)
    jz = np.stack([zero] * 8 + [one, dx, dy, dz], axis=1)
    jac = np.stack([jx, jy, jz], axis=1)
    mf = float(m)
    scale = np.array([1.0, mf, mf, mf, 1.0, mf, mf, mf, 1.0, mf, mf, mf])

    shape = grid.shape
    u = np.zeros(shape)
    v = np.zeros(shape)
    w = np.zeros(shape)
    cost = np.full(shape, np.nan)
    valid = np.zeros(shape, dtype=bool)

    flat_idx = list(np.ndindex(shape))

    def run(idx):
        return _match_point(ref_arr, def_arr,
                            float(grid.px[idx]), float(grid.py[idx]),
                            float(grid.pz[idx]), m, opts, jac, scale,
                            dx, dy, dz)

    if opts.n_workers > 1:
        with ThreadPoolExecutor(max_workers=opts.n_workers) as pool:
            results = list(pool.map(run, flat_idx))
    else:
        results = [run(idx) for idx in flat_idx]

    for idx, (pu, pv, pw, sscc, ok) in zip(flat_idx, results):
        if not ok:
            continue
        u[idx], v[idx], w[idx] = pu, pv, pw
        cost[idx] = sscc if criterion == "SSCC" else 1.0 - 0.5 * sscc
        valid[idx] = True

    if not valid.any():
        raise DivergedError("volume correlation failed at every grid point")
    return VolDisplacement(grid=grid, u=u, v=v, w=w, cost=cost,
                           valid=valid, criterion=criterion)


# ----------------------------------------------------------------------


@dataclass(frozen=True)
class VolStrain:
    """Per-point strain tensors from local displacement fits.

    ``eps`` has shape grid.shape + (3, 3); axis order is (x, y, z).
    """

    grid: VolGrid
    eps: np.ndarray
    valid: np.ndarray
    finite_strain: bool


def vol_strain(disp: VolDisplacement, neighborhood_radius: int = 2,
               finite_strain: bool = False) -> VolStrain:
    """Strain tensor per point from quadratic least-squares fits.

    Each displacement component is fitted with a full second-order
    Taylor polynomial over the valid points within ``neighborhood_radius``
    grid steps (Chebyshev); the strain comes from the fitted first-order
    gradients: small strain 0.5 (G + G^T) by default, Green-Lagrange
    0.5 (G + G^T + G^T G) with ``finite_strain``. Points with fewer than
    10 usable neighbors or a rank-deficient fit are flagged invalid.

    Raises:
        InsufficientSupportError: no point had enough support.
        ValueError: neighborhood_radius < 1.
    """
    if neighborhood_radius < 1:
        raise ValueError(
            f"neighborhood_radius must be >= 1, got {neighborhood_radius}")
    grid = disp.grid
    ns, nr, nc = grid.shape
    rad = neighborhood_radius
    eps = np.full(grid.shape + (3, 3), np.nan)
    valid = np.zeros(grid.shape, dtype=bool)

    for k in range(ns):
        for r in range(nr):
            for c in range(nc):
                if not disp.valid[k, r, c]:
                    continue
                k0, k1 = max(0, k - rad), min(ns, k + rad + 1)
                r0, r1 = max(0, r - rad), min(nr, r + rad + 1)
                c0, c1 = max(0, c - rad), min(nc, c + rad + 1)
                sel = disp.valid[k0:k1, r0:r1, c0:c1]
                if int(sel.sum()) < 10:
                    continue
                ddx = (grid.px[k0:k1, r0:r1, c0:c1][sel]
                       - grid.px[k, r, c])
                ddy = (grid.py[k0:k1, r0:r1, c0:c1][sel]
                       - grid.py[k, r, c])
                ddz = (grid.pz[k0:k1, r0:r1, c0:c1][sel]
                       - grid.pz[k, r, c])
                a = np.column_stack([
                    np.ones(ddx.size), ddx, ddy, ddz,
                    ddx * ddx, ddy * ddy, ddz * ddz,
                    ddx * ddy, ddx * ddz, ddy * ddz])
                rhs = np.column_stack([
                    disp.u[k0:k1, r0:r1, c0:c1][sel],
                    disp.v[k0:k1, r0:r1, c0:c1][sel],
                    disp.w[k0:k1, r0:r1, c0:c1][sel]])
                coef, _, rank, _ = np.linalg.lstsq(a, rhs, rcond=None)
                if rank < 10:
                    continue
                # rows of G: du_i/dx_j evaluated at the center point
                g = coef[1:4, :].T
                if finite_strain:
                    e = 0.5 * (g + g.T + g.T @ g)
                else:
                    e = 0.5 * (g + g.T)
                eps[k, r, c] = e
                valid[k, r, c] = True

    if not valid.any():
        raise InsufficientSupportError(
            "no grid point had enough valid neighbors for a strain fit")
    return VolStrain(grid=grid, eps=eps, valid=valid,
                     finite_strain=finite_strain)


# ----------------------------------------------------------------------
# volume file I/O


def save_volume(vol: Volume, header_path, fmt: str = "raw") -> None:
    """Write a volume as a JSON header plus payload.

    ``raw``: little-endian float32, C order (z, y, x), in ``<stem>.bin``.
    ``png_slices``: one 16-bit grayscale PNG per z-slice named by
    ``slice_pattern``.
    """
    header_path = Path(header_path)
    header_path.parent.mkdir(parents=True, exist_ok=True)
    if fmt == "raw":
        data_name = header_path.stem + ".bin"
        arr = vol.intensities.astype("<f4")
        (header_path.parent / data_name).write_bytes(arr.tobytes(order="C"))
        header = {"format": "raw", "nx": vol.nx, "ny": vol.ny,
                  "nz": vol.nz, "dtype": "float32", "data": data_name}
    elif fmt == "png_slices":
        from PIL import Image

        pattern = header_path.stem + "_%04d.png"
        for k in range(vol.nz):
            arr16 = np.round(vol.intensities[k] * 65535.0).astype(np.uint16)
            Image.fromarray(arr16).save(header_path.parent / (pattern % k))
        header = {"format": "png_slices", "nx": vol.nx, "ny": vol.ny,
                  "nz": vol.nz, "slice_pattern": pattern}
    else:
        raise ValueError(f"unknown volume format {fmt!r}")
    header_path.write_text(json.dumps(header, indent=2) + "\n")


def load_volume(header_path) -> Volume:
    """Read a volume written by :func:`save_volume` (or a compatible
    header naming raw float32 data or PNG slices)."""
    header_path = Path(header_path)
    try:
        header = json.loads(header_path.read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise UnreadableFileError(f"cannot read volume header "
                                  f"{header_path}: {e}") from e
    try:
        fmt = header["format"]
        nx, ny, nz = int(header["nx"]), int(header["ny"]), int(header["nz"])
    except KeyError as e:
        raise UnreadableFileError(
            f"volume header {header_path} missing key {e}") from e
    if fmt == "raw":
        data_path = header_path.parent / header["data"]
        try:
            raw = np.frombuffer(data_path.read_bytes(), dtype="<f4")
        except OSError as e:
            raise UnreadableFileError(f"cannot read volume data "
                                      f"{data_path}: {e}") from e
        if raw.size != nx * ny * nz:
            raise UnreadableFileError(
                f"volume data has {raw.size} voxels, header says "
                f"{nx * ny * nz}")
        return Volume(raw.reshape(nz, ny, nx).astype(np.float64))
    if fmt == "png_slices":
        from PIL import Image

        pattern = header["slice_pattern"]
        slices = []
        for k in range(nz):
            path = header_path.parent / (pattern % k)
            try:
                img = np.asarray(Image.open(path))
            except OSError as e:
                raise UnreadableFileError(
                    f"cannot read slice {path}: {e}") from e
            if img.shape != (ny, nx):
                raise UnreadableFileError(
                    f"slice {path} is {img.shape}, header says "
                    f"({ny}, {nx})")
            slices.append(img.astype(np.float64) / 65535.0)
        return Volume(np.stack(slices))
    raise UnreadableFileError(f"unknown volume format {fmt!r}")
