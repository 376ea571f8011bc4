"""Grayscale image container, gradients, subpixel interpolation, and
analytically warped synthetic images.

Conventions used throughout the package:

* ``intensities[row, col]`` with ``x = col`` and ``y = row``, both in pixels.
* Intensities are float64 in ``[0, 1]``; 8/16-bit sources are normalized
  on load so matching criteria are bit-depth independent.
* The synthetic deformer is the test oracle for every matching module:
  it resamples the reference through the same interpolator the matcher
  uses, so an imposed warp is recoverable to interpolation accuracy.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Tuple

import numpy as np
from PIL import Image

from .errors import (
    NonInvertibleWarpError,
    OutOfDomainError,
    TooSmallError,
    UnreadableFileError,
    UnsupportedBitDepthError,
)

# Interpolation uses a 4x4 pixel stencil; queries must keep this margin
# away from the border.
INTERP_MARGIN = 2


@dataclass(frozen=True)
class GrayImage:
    """Immutable grayscale image with intensities in [0, 1].

    Parameters
    ----------
    intensities : ndarray, shape (height, width)
        Row-major intensity grid. Converted to read-only float64.
    """

    intensities: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.intensities, dtype=np.float64)
        if arr.ndim != 2:
            raise TooSmallError(f"expected 2D intensity grid, got ndim={arr.ndim}")
        if arr.shape[0] < 3 or arr.shape[1] < 3:
            raise TooSmallError(f"image must be at least 3x3, got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("intensities must be finite")
        if arr.min() < 0.0 or arr.max() > 1.0:
            raise ValueError("intensities must lie in [0, 1]")
        arr = arr.copy()
        arr.flags.writeable = False
        object.__setattr__(self, "intensities", arr)

    @property
    def height(self) -> int:
        return self.intensities.shape[0]

    @property
    def width(self) -> int:
        return self.intensities.shape[1]

    @property
    def shape(self) -> Tuple[int, int]:
        return self.intensities.shape


@dataclass(frozen=True)
class GradientField:
    """Per-pixel intensity derivatives, in intensity per pixel."""

    fx: np.ndarray
    fy: np.ndarray

    def __post_init__(self):
        if self.fx.shape != self.fy.shape:
            raise ValueError("fx and fy must have equal shapes")
        if not (np.all(np.isfinite(self.fx)) and np.all(np.isfinite(self.fy))):
            raise ValueError("gradients must be finite")


def gradients(img: GrayImage) -> GradientField:
    """Intensity derivatives: central differences in the interior,
    one-sided at the borders."""
    arr = img.intensities
    fy, fx = np.gradient(arr, edge_order=1)
    return GradientField(fx=fx, fy=fy)


# ---------------------------------------------------------------------------
# Bicubic interpolation
# ---------------------------------------------------------------------------

def _lagrange_weights(t: np.ndarray) -> np.ndarray:
    """Cubic Lagrange basis on nodes {-1, 0, 1, 2} at fractional offset t.

    Returns array of shape t.shape + (4,). Exact for polynomials of
    degree <= 3, which is what makes the interpolator testable against
    analytic cubics.
    """
    w = np.empty(t.shape + (4,), dtype=np.float64)
    w[..., 0] = -t * (t - 1.0) * (t - 2.0) / 6.0
    w[..., 1] = (t + 1.0) * (t - 1.0) * (t - 2.0) / 2.0
    w[..., 2] = -(t + 1.0) * t * (t - 2.0) / 2.0
    w[..., 3] = (t + 1.0) * t * (t - 1.0) / 6.0
    return w


def _lagrange_weights_d(t: np.ndarray) -> np.ndarray:
    """Derivatives of the cubic Lagrange basis with respect to t."""
    w = np.empty(t.shape + (4,), dtype=np.float64)
    t2 = t * t
    w[..., 0] = -(3.0 * t2 - 6.0 * t + 2.0) / 6.0
    w[..., 1] = (3.0 * t2 - 4.0 * t - 1.0) / 2.0
    w[..., 2] = -(3.0 * t2 - 2.0 * t - 2.0) / 2.0
    w[..., 3] = (3.0 * t2 - 1.0) / 6.0
    return w


class Interpolator:
    """Bicubic subpixel evaluator over a 4x4 pixel stencil.

    The valid domain is the image eroded by a 2-pixel margin; queries
    outside it raise :class:`OutOfDomainError` rather than extrapolate.
    """

    def __init__(self, image: GrayImage):
        self.image = image
        self._arr = image.intensities
        self.x_min = float(INTERP_MARGIN)
        self.y_min = float(INTERP_MARGIN)
        self.x_max = float(image.width - 1 - INTERP_MARGIN)
        self.y_max = float(image.height - 1 - INTERP_MARGIN)
        if self.x_max < self.x_min or self.y_max < self.y_min:
            raise TooSmallError(
                f"image {image.shape} too small for interpolation margin")

    def contains(self, x, y) -> np.ndarray:
        """Elementwise test that (x, y) lies inside the valid domain."""
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        return ((x >= self.x_min) & (x <= self.x_max)
                & (y >= self.y_min) & (y <= self.y_max))

    def _stencil(self, x, y):
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        if not np.all(self.contains(x, y)):
            raise OutOfDomainError(
                "interpolation query outside valid domain "
                f"x:[{self.x_min},{self.x_max}] y:[{self.y_min},{self.y_max}]")
        ix = np.floor(x).astype(np.intp)
        iy = np.floor(y).astype(np.intp)
        # keep the 4x4 stencil in-array when x == x_max exactly
        ix = np.minimum(ix, self._arr.shape[1] - 3)
        iy = np.minimum(iy, self._arr.shape[0] - 3)
        tx = x - ix
        ty = y - iy
        # gather the 4x4 neighborhoods: shape (..., 4, 4) in (dy, dx) order
        offs = np.arange(-1, 3)
        rows = iy[..., None, None] + offs[None, :, None]
        cols = ix[..., None, None] + offs[None, None, :]
        patch = self._arr[rows, cols]
        return patch, tx, ty

    def __call__(self, x, y) -> np.ndarray:
        """Interpolated intensity at (x, y); arrays broadcast elementwise."""
        patch, tx, ty = self._stencil(x, y)
        wx = _lagrange_weights(tx)
        wy = _lagrange_weights(ty)
        return np.einsum("...jk,...j,...k->...", patch, wy, wx)

    def grad(self, x, y) -> Tuple[np.ndarray, np.ndarray]:
        """Analytic derivatives (d/dx, d/dy) of the interpolant at (x, y)."""
        patch, tx, ty = self._stencil(x, y)
        wx = _lagrange_weights(tx)
        wy = _lagrange_weights(ty)
        dwx = _lagrange_weights_d(tx)
        dwy = _lagrange_weights_d(ty)
        gx = np.einsum("...jk,...j,...k->...", patch, wy, dwx)
        gy = np.einsum("...jk,...j,...k->...", patch, dwy, wx)
        return gx, gy


def interp(itp: Interpolator, x, y):
    """Functional form of ``itp(x, y)``."""
    return itp(x, y)


# ---------------------------------------------------------------------------
# Analytic warps and the synthetic deformer
# ---------------------------------------------------------------------------

# mode-I near-tip displacement scale uses these material symbols; kappa is
# 3 - 4*nu (plane strain) or (3 - nu)/(1 + nu) (plane stress)
@dataclass(frozen=True)
class ModeIParams:
    k1: float
    mu: float
    kappa: float
    tip: Tuple[float, float]
    # crack extension direction, unit vector; crack faces lie behind the tip
    axis: Tuple[float, float] = (1.0, 0.0)
    u0: Tuple[float, float] = (0.0, 0.0)
    theta0: float = 0.0


def mode_i_displacement(x, y, p: ModeIParams):
    """Near-tip opening-mode displacement plus rigid terms, pixel units.

    Coordinates are absolute; the rigid rotation term uses tip-relative
    coordinates so fitted rigid parameters are tip-anchored.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    ax, ay = p.axis
    norm = np.hypot(ax, ay)
    ax, ay = ax / norm, ay / norm
    dx = x - p.tip[0]
    dy = y - p.tip[1]
    # local frame: e1 along crack extension, e2 perpendicular
    lx = ax * dx + ay * dy
    ly = -ay * dx + ax * dy
    r = np.hypot(lx, ly)
    th = np.arctan2(ly, lx)
    amp = p.k1 / (2.0 * p.mu) * np.sqrt(np.maximum(r, 0.0) / (2.0 * np.pi))
    c, s = np.cos(th / 2.0), np.sin(th / 2.0)
    ul = amp * c * (p.kappa - 1.0 + 2.0 * s * s)
    vl = amp * s * (p.kappa + 1.0 - 2.0 * c * c)
    # back to global frame, then rigid motion
    u = ax * ul - ay * vl + p.u0[0] - p.theta0 * dy
    v = ay * ul + ax * vl + p.u0[1] + p.theta0 * dx
    return u, v


class AnalyticWarp:
    """Invertible forward map x' = W(x) used to synthesize deformed images.

    Use the factory classmethods; parameter ranges are validated so the
    warp stays one-to-one on any image domain.
    """

    def __init__(self, kind: str, forward: Callable, inverse: Optional[Callable],
                 params: dict):
        self.kind = kind
        self._forward = forward
        self._inverse = inverse  # None -> numeric Newton inversion
        self.params = params

    # --- factories ---

    @classmethod
    def translation(cls, u: float, v: float) -> "AnalyticWarp":
        def fwd(x, y):
            return x + u, y + v

        def inv(x, y):
            return x - u, y - v

        return cls("translation", fwd, inv, {"u": u, "v": v})

    @classmethod
    def rotation(cls, theta_deg: float, center: Tuple[float, float]) -> "AnalyticWarp":
        if abs(theta_deg) > 10.0:
            raise NonInvertibleWarpError(
                f"rotation limited to |theta| <= 10 deg, got {theta_deg}")
        th = np.deg2rad(theta_deg)
        cx, cy = center
        c, s = np.cos(th), np.sin(th)

        def fwd(x, y):
            dx, dy = x - cx, y - cy
            return cx + c * dx - s * dy, cy + s * dx + c * dy

        def inv(x, y):
            dx, dy = x - cx, y - cy
            return cx + c * dx + s * dy, cy - s * dx + c * dy

        return cls("rotation", fwd, inv, {"theta_deg": theta_deg, "center": center})

    @classmethod
    def affine(cls, u: float, v: float, u_x: float, u_y: float,
               v_x: float, v_y: float,
               center: Tuple[float, float] = (0.0, 0.0)) -> "AnalyticWarp":
        grads = (u_x, u_y, v_x, v_y)
        if max(abs(g) for g in grads) > 0.1:
            raise NonInvertibleWarpError(
                f"affine gradients limited to |.| <= 0.1, got {grads}")
        a = np.array([[1.0 + u_x, u_y], [v_x, 1.0 + v_y]])
        det = np.linalg.det(a)
        if det <= 1e-12:
            raise NonInvertibleWarpError(f"affine matrix not orientation-preserving (det={det})")
        ainv = np.linalg.inv(a)
        cx, cy = center

        def fwd(x, y):
            dx, dy = x - cx, y - cy
            return (cx + a[0, 0] * dx + a[0, 1] * dy + u,
                    cy + a[1, 0] * dx + a[1, 1] * dy + v)

        def inv(x, y):
            dx, dy = x - cx - u, y - cy - v
            return (cx + ainv[0, 0] * dx + ainv[0, 1] * dy,
                    cy + ainv[1, 0] * dx + ainv[1, 1] * dy)

        return cls("affine", fwd, inv,
                   {"u": u, "v": v, "u_x": u_x, "u_y": u_y,
                    "v_x": v_x, "v_y": v_y, "center": center})

    @classmethod
    def polynomial(cls, coeffs: dict, center: Tuple[float, float]) -> "AnalyticWarp":
        """Quadratic displacement field; keys u, v, u_x..v_y, u_xx..v_xy.

        Offsets are taken relative to ``center``. Inverted numerically.
        """
        keys = ("u", "v", "u_x", "u_y", "v_x", "v_y",
                "u_xx", "u_yy", "u_xy", "v_xx", "v_yy", "v_xy")
        c = {k: float(coeffs.get(k, 0.0)) for k in keys}
        cx, cy = center

        def fwd(x, y):
            dx, dy = x - cx, y - cy
            u = (c["u"] + c["u_x"] * dx + c["u_y"] * dy
                 + 0.5 * c["u_xx"] * dx * dx + 0.5 * c["u_yy"] * dy * dy
                 + c["u_xy"] * dx * dy)
            v = (c["v"] + c["v_x"] * dx + c["v_y"] * dy
                 + 0.5 * c["v_xx"] * dx * dx + 0.5 * c["v_yy"] * dy * dy
                 + c["v_xy"] * dx * dy)
            return x + u, y + v

        return cls("polynomial", fwd, None, {"coeffs": c, "center": center})

    @classmethod
    def mode_i(cls, params: ModeIParams) -> "AnalyticWarp":
        def fwd(x, y):
            u, v = mode_i_displacement(x, y, params)
            return x + u, y + v

        return cls("mode_i", fwd, None, {"mode_i": params})

    # --- evaluation ---

    def apply(self, x, y):
        return self._forward(np.asarray(x, np.float64), np.asarray(y, np.float64))

    def invert(self, x, y, tol: float = 1e-10, max_iter: int = 50):
        """Preimage of (x, y); returns (X, Y, ok) with per-point success flags.

        Closed-form where available, otherwise damped Newton on the
        forward map with a finite-difference Jacobian.
        """
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        if self._inverse is not None:
            X, Y = self._inverse(x, y)
            return X, Y, np.ones(np.broadcast(x, y).shape, dtype=bool)

        X = x.copy().astype(np.float64)
        Y = y.copy().astype(np.float64)
        ok = np.zeros(X.shape, dtype=bool)
        h = 1e-5
        for _ in range(max_iter):
            fx, fy = self._forward(X, Y)
            rx = fx - x
            ry = fy - y
            done = np.hypot(rx, ry) < tol
            ok |= done
            if np.all(ok):
                break
            # finite-difference Jacobian of the forward map
            fxp, fyp = self._forward(X + h, Y)
            fxq, fyq = self._forward(X, Y + h)
            j11 = (fxp - fx) / h
            j21 = (fyp - fy) / h
            j12 = (fxq - fx) / h
            j22 = (fyq - fy) / h
            det = j11 * j22 - j12 * j21
            bad = np.abs(det) < 1e-12
            det = np.where(bad, 1.0, det)
            dx = (j22 * rx - j12 * ry) / det
            dy = (-j21 * rx + j11 * ry) / det
            step = np.where(ok | bad, 0.0, 1.0)
            X -= step * dx
            Y -= step * dy
        fx, fy = self._forward(X, Y)
        ok = np.hypot(fx - x, fy - y) < 10.0 * tol
        return X, Y, ok

    def check_invertible(self, width: int, height: int) -> None:
        """Raise NonInvertibleWarpError when the forward Jacobian changes
        orientation anywhere on the pixel grid (affine/polynomial kinds)."""
        if self.kind not in ("polynomial",):
            return
        ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
        h = 1e-4
        fx0, fy0 = self._forward(xs, ys)
        fx1, fy1 = self._forward(xs + h, ys)
        fx2, fy2 = self._forward(xs, ys + h)
        det = ((fx1 - fx0) * (fy2 - fy0) - (fx2 - fx0) * (fy1 - fy0)) / (h * h)
        if np.any(det <= 0.0):
            raise NonInvertibleWarpError(
                "polynomial warp folds over on the image domain")


@dataclass(frozen=True)
class SynthResult:
    """Deformed image plus the validity mask of resampled pixels."""

    image: GrayImage
    valid: np.ndarray = field(repr=False)


def synth_deform(img: GrayImage, warp: AnalyticWarp,
                 noise_std: float = 0.0, noise_seed: int = 0) -> SynthResult:
    """Resample ``img`` under ``warp``: output g(x) = f(W^-1(x)).

    Pixels whose preimage leaves the interpolable domain are set to 0.5
    and flagged invalid. Optional additive Gaussian noise (std in
    intensity units) is applied to valid pixels, then clipped to [0, 1].
    """
    warp.check_invertible(img.width, img.height)
    itp = Interpolator(img)
    ys, xs = np.mgrid[0:img.height, 0:img.width].astype(np.float64)
    X, Y, ok = warp.invert(xs, ys)
    valid = ok & itp.contains(X, Y)
    out = np.full(img.shape, 0.5, dtype=np.float64)
    if valid.any():
        out[valid] = itp(X[valid], Y[valid])
    if noise_std > 0.0:
        rng = np.random.default_rng(noise_seed)
        out[valid] += rng.normal(0.0, noise_std, size=int(valid.sum()))
    np.clip(out, 0.0, 1.0, out=out)
    return SynthResult(image=GrayImage(out), valid=valid)


# ---------------------------------------------------------------------------
# File I/O
# ---------------------------------------------------------------------------

def load_image(path) -> GrayImage:
    """Read an 8/16-bit PNG or TIFF, single-channel or RGB.

    RGB is converted by channel average; intensities are normalized to
    [0, 1] by the source bit depth.
    """
    path = Path(path)
    try:
        with Image.open(path) as im:
            im.load()
            mode = im.mode
            if mode == "L":
                arr = np.asarray(im, dtype=np.float64) / 255.0
            elif mode in ("I;16", "I;16B", "I;16L"):
                arr = np.asarray(im, dtype=np.float64) / 65535.0
            elif mode == "I":
                arr = np.asarray(im, dtype=np.float64)
                if arr.max() > 65535:
                    raise UnsupportedBitDepthError(
                        f"{path}: integer image exceeds 16-bit range")
                arr = arr / 65535.0
            elif mode == "RGB":
                arr = np.asarray(im, dtype=np.float64).mean(axis=2) / 255.0
            else:
                raise UnsupportedBitDepthError(
                    f"{path}: unsupported pixel mode {mode!r} "
                    "(need 8/16-bit gray or RGB)")
    except UnsupportedBitDepthError:
        raise
    except FileNotFoundError as e:
        raise UnreadableFileError(f"{path}: {e}") from e
    except Exception as e:
        raise UnreadableFileError(f"{path}: cannot decode image ({e})") from e
    if arr.shape[0] < 3 or arr.shape[1] < 3:
        raise TooSmallError(f"{path}: image {arr.shape} below 3x3 minimum")
    return GrayImage(np.clip(arr, 0.0, 1.0))


def save_image(img: GrayImage, path, bit_depth: int = 16) -> None:
    """Write a grayscale PNG at the requested bit depth."""
    path = Path(path)
    if bit_depth == 8:
        data = np.round(img.intensities * 255.0).astype(np.uint8)
        Image.fromarray(data, mode="L").save(path)
    elif bit_depth == 16:
        data = np.round(img.intensities * 65535.0).astype(np.uint16)
        Image.fromarray(data).save(path)
    else:
        raise UnsupportedBitDepthError(f"bit_depth must be 8 or 16, got {bit_depth}")


def save_synth(result: SynthResult, path) -> None:
    """Write a synthesized image plus its validity-mask sidecar files.

    Produces ``<path>`` (16-bit PNG), ``<stem>_mask.png`` (8-bit mask),
    and ``<stem>_mask.json`` summarizing the valid region.
    """
    path = Path(path)
    save_image(result.image, path, bit_depth=16)
    mask8 = (result.valid.astype(np.uint8)) * 255
    mask_path = path.with_name(path.stem + "_mask.png")
    Image.fromarray(mask8, mode="L").save(mask_path)
    ys, xs = np.nonzero(result.valid)
    summary = {
        "width": result.image.width,
        "height": result.image.height,
        "valid_fraction": float(result.valid.mean()),
        "invalid_pixels": int((~result.valid).sum()),
        "valid_bbox": ([int(xs.min()), int(ys.min()), int(xs.max()), int(ys.max())]
                       if len(xs) else None),
        "mask_image": mask_path.name,
    }
    with open(path.with_name(path.stem + "_mask.json"), "w") as f:
        json.dump(summary, f, indent=2, sort_keys=True)
        f.write("\n")
