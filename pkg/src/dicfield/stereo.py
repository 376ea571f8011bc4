"""Stereo-camera geometry: projection with lens distortion, stereo pose
composition, stereo/temporal matching, least-squares triangulation, 3D
surface kinematics, and per-triangle finite strain.

The world frame is the left camera frame throughout; the rig pose (R, t)
maps left-camera coordinates to right-camera coordinates. Calibration is
consumed, never estimated: intrinsics and poses come from an external
planar-target calibration.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .errors import (
    BehindCameraError,
    DegenerateGeometryError,
    DegenerateTriangleError,
    MismatchedSeriesError,
    NoConvergenceError,
)
from .image import GrayImage
from .rgdic import ROIGrid, RgdicOptions, SeedPoint, rgdic, _interp_field_bilinear

_ROT_TOL = 1e-9


def _check_rotation(R: np.ndarray, what: str) -> np.ndarray:
    R = np.asarray(R, dtype=float)
    if R.shape != (3, 3):
        raise ValueError(f"{what} must be 3x3, got {R.shape}")
    if not np.allclose(R.T @ R, np.eye(3), atol=_ROT_TOL):
        raise ValueError(f"{what} is not orthonormal (R^T R != I)")
    if abs(np.linalg.det(R) - 1.0) > _ROT_TOL:
        raise ValueError(f"{what} determinant is not +1")
    return R


@dataclass(frozen=True)
class Intrinsics:
    """Pinhole camera constants plus lens-distortion coefficients.

    f1, f2: focal lengths in pixels; (c1, c2): principal point; skew:
    axis-skew factor in pixels; k1, k2, k3: radial distortion; p1, p2:
    tangential distortion (dimensionless, acting on normalized
    coordinates).
    """

    f1: float
    f2: float
    c1: float
    c2: float
    skew: float = 0.0
    k1: float = 0.0
    k2: float = 0.0
    k3: float = 0.0
    p1: float = 0.0
    p2: float = 0.0

    def __post_init__(self):
        if not (self.f1 > 0 and self.f2 > 0):
            raise ValueError(
                f"focal lengths must be positive, got ({self.f1}, {self.f2})")

    @property
    def K(self) -> np.ndarray:
        """3x3 intrinsic matrix [[f1, skew, c1], [0, f2, c2], [0, 0, 1]]."""
        return np.array([[self.f1, self.skew, self.c1],
                         [0.0, self.f2, self.c2],
                         [0.0, 0.0, 1.0]])

    @property
    def has_distortion(self) -> bool:
        return any((self.k1, self.k2, self.k3, self.p1, self.p2))


@dataclass(frozen=True)
class Extrinsics:
    """Camera pose: X_cam = R @ X_world + t."""

    R: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "R", _check_rotation(self.R, "rotation"))
        t = np.asarray(self.t, dtype=float).reshape(3)
        object.__setattr__(self, "t", t)

    @classmethod
    def identity(cls) -> "Extrinsics":
        return cls(R=np.eye(3), t=np.zeros(3))


@dataclass(frozen=True)
class StereoRig:
    """Calibrated stereo pair; (R, t) maps left-camera to right-camera
    coordinates (the world frame is the left camera frame)."""

    left: Intrinsics
    right: Intrinsics
    R: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "R", _check_rotation(self.R, "rig rotation"))
        t = np.asarray(self.t, dtype=float).reshape(3)
        if np.linalg.norm(t) <= 0.0:
            raise ValueError("rig baseline must be non-zero")
        object.__setattr__(self, "t", t)

    @classmethod
    def from_extrinsics(cls, left: Intrinsics, right: Intrinsics,
                        pose_left: Extrinsics, pose_right: Extrinsics
                        ) -> "StereoRig":
        R, t = stereo_extrinsics(pose_left, pose_right)
        return cls(left=left, right=right, R=R, t=t)


def _distort(intr: Intrinsics, x: np.ndarray, y: np.ndarray):
    """Apply radial + tangential distortion in normalized coordinates."""
    r2 = x * x + y * y
    radial = 1.0 + r2 * (intr.k1 + r2 * (intr.k2 + r2 * intr.k3))
    xd = x * radial + 2.0 * intr.p1 * x * y + intr.p2 * (r2 + 2.0 * x * x)
    yd = y * radial + intr.p1 * (r2 + 2.0 * y * y) + 2.0 * intr.p2 * x * y
    return xd, yd


def _to_pixels(intr: Intrinsics, x: np.ndarray, y: np.ndarray):
    u = intr.f1 * x + intr.skew * y + intr.c1
    v = intr.f2 * y + intr.c2
    return u, v


def project(intr: Intrinsics, extr: Extrinsics, P) -> np.ndarray:
    """Project world point(s) to pixel coordinates.

    Transforms into the camera frame, divides by depth, applies the
    distortion model in normalized coordinates, then the intrinsic
    matrix. Accepts one point (3,) or many (N, 3).

    Raises:
        BehindCameraError: any point has non-positive camera-frame depth.
    """
    P = np.asarray(P, dtype=float)
    single = P.ndim == 1
    pts = np.atleast_2d(P)
    cam = pts @ extr.R.T + extr.t
    z = cam[:, 2]
    if np.any(z <= 0.0):
        n = int((z <= 0.0).sum())
        raise BehindCameraError(
            f"{n} point(s) at or behind the camera plane")
    x = cam[:, 0] / z
    y = cam[:, 1] / z
    xd, yd = _distort(intr, x, y)
    u, v = _to_pixels(intr, xd, yd)
    out = np.stack([u, v], axis=-1)
    return out[0] if single else out


def undistort(intr: Intrinsics, pixel) -> np.ndarray:
    """Undistorted pixel(s): where the distortion-free pinhole model
    would have imaged the same ray.

    Inverts the distortion by fixed-point iteration in normalized
    coordinates (at most 20 iterations) and verifies the round trip
    through the forward model to 1e-9 px.

    Raises:
        NoConvergenceError: the inverse did not reach 1e-9 px.
    """
    q = np.asarray(pixel, dtype=float)
    single = q.ndim == 1
    pix = np.atleast_2d(q)
    yd = (pix[:, 1] - intr.c2) / intr.f2
    xd = (pix[:, 0] - intr.c1 - intr.skew * yd) / intr.f1
    x, y = xd.copy(), yd.copy()
    if intr.has_distortion:
        # outside the invertible radius the iteration blows up; the
        # round-trip check below reports that as NoConvergence
        with np.errstate(over="ignore", invalid="ignore"):
            for _ in range(20):
                r2 = x * x + y * y
                radial = 1.0 + r2 * (intr.k1 + r2 * (intr.k2 + r2 * intr.k3))
                tx = 2.0 * intr.p1 * x * y + intr.p2 * (r2 + 2.0 * x * x)
                ty = intr.p1 * (r2 + 2.0 * y * y) + 2.0 * intr.p2 * x * y
                x_new = (xd - tx) / radial
                y_new = (yd - ty) / radial
                shift = max(np.abs(x_new - x).max(),
                            np.abs(y_new - y).max())
                x, y = x_new, y_new
                if shift < 1e-15:
                    break
            xc, yc = _distort(intr, x, y)
            uc, vc = _to_pixels(intr, xc, yc)
            err = np.hypot(uc - pix[:, 0], vc - pix[:, 1])
        if not np.all(err <= 1e-9):
            raise NoConvergenceError(
                f"distortion inverse stalled at {np.nanmax(err):.3e} px "
                "(pixel outside the invertible region?)")
    u, v = _to_pixels(intr, x, y)
    out = np.stack([u, v], axis=-1)
    return out[0] if single else out


def stereo_extrinsics(left: Extrinsics, right: Extrinsics
                      ) -> Tuple[np.ndarray, np.ndarray]:
    """Relative pose right-from-left of two camera poses sharing one
    world frame: R = R_r R_l^-1, t = t_r - R_r R_l^-1 t_l."""
    R = right.R @ left.R.T
    t = right.t - R @ left.t
    return R, t


@dataclass(frozen=True)
class Correspondences:
    """Matched pixel positions: pl in the left image, pr in the right
    image, per point (flattened from a grid of shape ``grid_shape``)."""

    pl: np.ndarray
    pr: np.ndarray
    zncc: np.ndarray
    valid: np.ndarray
    grid_shape: Tuple[int, int]

    def __post_init__(self):
        n = self.pl.shape[0]
        if not (self.pr.shape == (n, 2) and self.pl.shape == (n, 2)
                and self.zncc.shape == (n,) and self.valid.shape == (n,)):
            raise ValueError("correspondence arrays disagree in length")


def stereo_match(left: GrayImage, right: GrayImage, roi: ROIGrid,
                 seeds: Sequence[SeedPoint],
                 opts: Optional[RgdicOptions] = None) -> Correspondences:
    """Subpixel left->right correspondences at the ROI grid points.

    Runs the full-field matching engine with second-order shape
    functions by default: perspective distortion between views curves
    straight lines, which first-order subsets cannot follow. Temporal
    matching (same camera over time) should use the first-order default
    of the plain engine instead.
    """
    if opts is None:
        opts = RgdicOptions(order="second")
    disp = rgdic(left, right, roi, seeds, opts)
    pl = np.stack([roi.px.ravel(), roi.py.ravel()], axis=-1).astype(float)
    pr = pl + np.stack([disp.u.ravel(), disp.v.ravel()], axis=-1)
    return Correspondences(pl=pl, pr=pr, zncc=disp.zncc.ravel().copy(),
                           valid=disp.valid.ravel().copy(),
                           grid_shape=roi.shape)


def triangulate(rig: StereoRig, pl, pr) -> np.ndarray:
    """3D point (left-camera/world frame) from one undistorted pixel
    pair, by linear least squares on the two pinhole ray equations.

    Each camera contributes two linear equations in (X, Y, Z); the
    stacked 4x3 system is solved in the least-squares sense.

    Raises:
        DegenerateGeometryError: normal-matrix condition number > 1e12
            (parallel rays, e.g. zero disparity along the baseline).
    """
    xl, yl = float(pl[0]), float(pl[1])
    xr, yr = float(pr[0]), float(pr[1])
    L, Rt = rig.left, rig.right
    R, t = rig.R, rig.t
    m = np.array([
        [L.f1, L.skew, L.c1 - xl],
        [0.0, L.f2, L.c2 - yl],
        [R[0, 0] * Rt.f1 + R[1, 0] * Rt.skew + R[2, 0] * (Rt.c1 - xr),
         R[0, 1] * Rt.f1 + R[1, 1] * Rt.skew + R[2, 1] * (Rt.c1 - xr),
         R[0, 2] * Rt.f1 + R[1, 2] * Rt.skew + R[2, 2] * (Rt.c1 - xr)],
        [R[1, 0] * Rt.f2 + R[2, 0] * (Rt.c2 - yr),
         R[1, 1] * Rt.f2 + R[2, 1] * (Rt.c2 - yr),
         R[1, 2] * Rt.f2 + R[2, 2] * (Rt.c2 - yr)],
    ])
    b = np.array([
        0.0,
        0.0,
        -(t[0] * Rt.f1 + t[1] * Rt.skew + t[2] * (Rt.c1 - xr)),
        -(t[1] * Rt.f2 + t[2] * (Rt.c2 - yr)),
    ])
    if np.linalg.cond(m.T @ m) > 1e12:
        raise DegenerateGeometryError(
            f"triangulation rays nearly parallel at pl=({xl:.2f},{yl:.2f}) "
            f"pr=({xr:.2f},{yr:.2f})")
    sol, *_ = np.linalg.lstsq(m, b, rcond=None)
    return sol


@dataclass(frozen=True)
class SurfacePoint:
    """One reconstructed surface point with its match quality."""

    xyz: np.ndarray
    quality: float


@dataclass(frozen=True)
class SurfaceMesh:
    """Triangulated reconstructed surface in the left-camera frame."""

    points: np.ndarray
    triangles: np.ndarray
    quality: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        tri = np.asarray(self.triangles, dtype=int)
        if tri.size and (tri.min() < 0 or tri.max() >= pts.shape[0]):
            raise ValueError("triangle indices out of range")
        for k, (i, j, l) in enumerate(tri):
            if _triangle_area(pts[i], pts[j], pts[l]) <= 0.0:
                raise ValueError(f"reference triangle {k} is degenerate")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "triangles", tri)

    @classmethod
    def from_grid(cls, grid_shape: Tuple[int, int], points: np.ndarray,
                  valid: np.ndarray, quality: np.ndarray) -> "SurfaceMesh":
        """Two triangles per grid cell whose four corners are all valid
        and non-degenerate."""
        rows, cols = grid_shape
        idx = np.arange(rows * cols).reshape(rows, cols)
        pts = np.asarray(points, dtype=float)
        tris: List[Tuple[int, int, int]] = []
        for r in range(rows - 1):
            for c in range(cols - 1):
                a, b = idx[r, c], idx[r, c + 1]
                d, e = idx[r + 1, c], idx[r + 1, c + 1]
                if not (valid[a] and valid[b] and valid[d] and valid[e]):
                    continue
                for tri in ((a, b, d), (b, e, d)):
                    i, j, l = tri
                    if _triangle_area(pts[i], pts[j], pts[l]) > 0.0:
                        tris.append(tri)
        return cls(points=pts, triangles=np.array(tris, dtype=int).reshape(-1, 3),
                   quality=np.asarray(quality, dtype=float))


@dataclass(frozen=True)
class SurfaceMotion:
    """Per-frame reconstructed 3D positions and displacements.

    points[t, i] is the i-th grid point in frame t; displacement is
    points - points[0]. valid[t, i] requires a valid match in both the
    reference frame and frame t.
    """

    points: np.ndarray
    displacement: np.ndarray
    valid: np.ndarray


def surface_kinematics(frames: Sequence[Correspondences],
                       rig: StereoRig) -> SurfaceMotion:
    """Triangulate every frame of correspondences; displacements are
    positions relative to the first (reference) frame.

    Pixels are undistorted with each camera's intrinsics before
    triangulation. Triangulation failures propagate.
    """
    if not frames:
        raise MismatchedSeriesError("no correspondence frames given")
    n = frames[0].pl.shape[0]
    for k, fr in enumerate(frames):
        if fr.pl.shape[0] != n:
            raise MismatchedSeriesError(
                f"frame {k} has {fr.pl.shape[0]} points, expected {n}")
    T = len(frames)
    pts = np.full((T, n, 3), np.nan)
    valid = np.zeros((T, n), dtype=bool)
    ref_valid = frames[0].valid
    for ti, fr in enumerate(frames):
        ok = fr.valid & ref_valid
        if not ok.any():
            continue
        pl_u = undistort(rig.left, fr.pl[ok])
        pr_u = undistort(rig.right, fr.pr[ok])
        where = np.flatnonzero(ok)
        for row, i in enumerate(where):
            pts[ti, i] = triangulate(rig, pl_u[row], pr_u[row])
        valid[ti, ok] = True
    disp = pts - pts[0]
    return SurfaceMotion(points=pts, displacement=disp, valid=valid)


def stereo_track(left_seq: Sequence[GrayImage], right_seq: Sequence[GrayImage],
                 roi: ROIGrid, seeds: Sequence[SeedPoint],
                 stereo_opts: Optional[RgdicOptions] = None,
                 temporal_opts: Optional[RgdicOptions] = None
                 ) -> List[Correspondences]:
    """Correspondence frames for a synchronized stereo sequence.

    Stereo matching runs once on the reference pair (second order);
    each camera's sequence is then tracked against its own reference
    with first-order temporal matching. The right camera's temporal
    displacement is sampled bilinearly at the matched (subpixel) right
    positions of the left grid points, so every frame tracks the same
    physical points.
    """
    if len(left_seq) != len(right_seq):
        raise MismatchedSeriesError(
            f"{len(left_seq)} left frames vs {len(right_seq)} right frames")
    if not left_seq:
        raise MismatchedSeriesError("empty image sequence")
    if temporal_opts is None:
        temporal_opts = RgdicOptions()
    ref = stereo_match(left_seq[0], right_seq[0], roi, seeds, stereo_opts)
    frames = [ref]
    for li, ri in zip(left_seq[1:], right_seq[1:]):
        dl = rgdic(left_seq[0], li, roi, seeds, temporal_opts)
        dr = rgdic(right_seq[0], ri, roi, seeds, temporal_opts)
        pl = ref.pl + np.stack([dl.u.ravel(), dl.v.ravel()], axis=-1)
        ur, ok_u = _interp_field_bilinear(
            roi, dr.u, dr.valid, ref.pr[:, 0], ref.pr[:, 1])
        vr, ok_v = _interp_field_bilinear(
            roi, dr.v, dr.valid, ref.pr[:, 0], ref.pr[:, 1])
        pr = ref.pr + np.stack([ur, vr], axis=-1)
        valid = (ref.valid & dl.valid.ravel() & ok_u & ok_v)
        zncc = np.minimum(ref.zncc, dl.zncc.ravel())
        frames.append(Correspondences(pl=pl, pr=pr, zncc=zncc, valid=valid,
                                      grid_shape=roi.shape))
    return frames


def _triangle_area(p0: np.ndarray, p1: np.ndarray, p2: np.ndarray) -> float:
    return 0.5 * float(np.linalg.norm(np.cross(p1 - p0, p2 - p0)))


def _tangent_coords(p0: np.ndarray, p1: np.ndarray, p2: np.ndarray,
                    what: str) -> np.ndarray:
    """2x2 matrix of the two edge vectors expressed in an orthonormal
    frame of the triangle plane (first edge direction + its in-plane
    normal)."""
    d1 = p1 - p0
    d2 = p2 - p0
    nrm = np.cross(d1, d2)
    area2 = np.linalg.norm(nrm)
    scale = max(np.linalg.norm(d1), np.linalg.norm(d2))
    if scale <= 0.0 or area2 <= 1e-12 * scale * scale:
        raise DegenerateTriangleError(f"{what} triangle has no area")
    e1 = d1 / np.linalg.norm(d1)
    n = nrm / area2
    e2 = np.cross(n, e1)
    return np.array([[e1 @ d1, e1 @ d2],
                     [e2 @ d1, e2 @ d2]])


@dataclass(frozen=True)
class TriangleStrain:
    """Finite-strain state of one triangle (2x2 tensors in the
    reference triangle's tangent frame)."""

    F: np.ndarray
    C: np.ndarray
    B: np.ndarray
    E: np.ndarray
    e: np.ndarray
    principal_stretches: np.ndarray
    principal_strains_E: np.ndarray
    principal_strains_e: np.ndarray
    max_shear: float
    area_change: float


def triangle_strain(ref_tri: np.ndarray, def_tri: np.ndarray
                    ) -> TriangleStrain:
    """In-plane deformation of a triangle from its vertex motion.

    Both triangles get an orthonormal tangent frame (first edge plus
    in-plane normal); the 2x2 deformation gradient F maps reference
    edge coordinates to deformed edge coordinates. From F follow the
    Cauchy-Green tensors C = F^T F and B = F F^T, the Green-Lagrange
    strain E = (C - I)/2, the Euler-Almansi strain e = (I - B^-1)/2,
    principal stretches sqrt(eig(C)) (descending), both sets of
    principal strains, the maximum shear (E1 - E2)/2, and the area
    change det(F).

    Raises:
        DegenerateTriangleError: either triangle has (near-)zero area.
    """
    ref_tri = np.asarray(ref_tri, dtype=float).reshape(3, 3)
    def_tri = np.asarray(def_tri, dtype=float).reshape(3, 3)
    d_ref = _tangent_coords(ref_tri[0], ref_tri[1], ref_tri[2], "reference")
    d_def = _tangent_coords(def_tri[0], def_tri[1], def_tri[2], "deformed")
    F = d_def @ np.linalg.inv(d_ref)
    C = F.T @ F
    B = F @ F.T
    E = 0.5 * (C - np.eye(2))
    e = 0.5 * (np.eye(2) - np.linalg.inv(B))
    lam2 = np.linalg.eigvalsh(C)[::-1]
    stretches = np.sqrt(lam2)
    prin_E = 0.5 * (lam2 - 1.0)
    prin_e = np.linalg.eigvalsh(e)[::-1]
    return TriangleStrain(
        F=F, C=C, B=B, E=E, e=e,
        principal_stretches=stretches,
        principal_strains_E=prin_E,
        principal_strains_e=prin_e,
        max_shear=0.5 * (prin_E[0] - prin_E[1]),
        area_change=float(np.linalg.det(F)),
    )
