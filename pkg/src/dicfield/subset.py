"""Per-subset matching: shape functions, correlation criteria, integer
search, and Gauss-Newton subpixel refinement.

A subset is the (2M+1)^2 pixel window centered on a measurement point.
Matching minimizes the zero-normalized SSD between the reference subset
and the warped, interpolated deformed subset; ZNCC is reported alongside
through the identity zncc = 1 - znssd/2.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional, Tuple

import numpy as np

from .errors import (
    DivergedOutOfDomainError,
    OutOfRangeError,
    SearchWindowOutOfBoundsError,
    SingularHessianError,
    SubsetOutOfBoundsError,
    WarpOutOfDomainError,
    ZeroVarianceSubsetError,
)
from .image import INTERP_MARGIN, GrayImage, Interpolator

FIRST_ORDER_KEYS = ("u", "u_x", "u_y", "v", "v_x", "v_y")
SECOND_ORDER_KEYS = FIRST_ORDER_KEYS + (
    "u_xx", "u_yy", "u_xy", "v_xx", "v_yy", "v_xy")


@dataclass(frozen=True)
class SubsetSpec:
    """Square subset: center (x0, y0) in pixels and half-width M."""

    center: Tuple[float, float]
    M: int

    def __post_init__(self):
        if self.M < 1:
            raise ValueError(f"M must be >= 1, got {self.M}")

    def offsets(self) -> Tuple[np.ndarray, np.ndarray]:
        """Local pixel offsets (dx, dy) spanning the window, flattened."""
        span = np.arange(-self.M, self.M + 1, dtype=np.float64)
        dy, dx = np.meshgrid(span, span, indexing="ij")
        return dx.ravel(), dy.ravel()

    def contained_in(self, img: GrayImage, margin: int = 0) -> bool:
        x0, y0 = self.center
        m = self.M + margin
        return (x0 - m >= 0 and y0 - m >= 0
                and x0 + m <= img.width - 1 and y0 + m <= img.height - 1)


@dataclass(frozen=True)
class DeformVector:
    """Subset deformation parameters.

    First order carries the displacement (u, v) and its gradients; second
    order adds the six curvature terms (set ``order="second"``). Absent
    curvature terms are represented as zeros and rejected when nonzero in
    first-order vectors.
    """

    order: str = "first"
    u: float = 0.0
    v: float = 0.0
    u_x: float = 0.0
    u_y: float = 0.0
    v_x: float = 0.0
    v_y: float = 0.0
    u_xx: float = 0.0
    u_yy: float = 0.0
    u_xy: float = 0.0
    v_xx: float = 0.0
    v_yy: float = 0.0
    v_xy: float = 0.0

    def __post_init__(self):
        if self.order not in ("first", "second"):
            raise ValueError(f"order must be 'first' or 'second', got {self.order}")
        vals = [getattr(self, k) for k in SECOND_ORDER_KEYS]
        if not all(np.isfinite(v) for v in vals):
            raise ValueError("deformation parameters must be finite")
        if self.order == "first":
            second = (self.u_xx, self.u_yy, self.u_xy,
                      self.v_xx, self.v_yy, self.v_xy)
            if any(v != 0.0 for v in second):
                raise ValueError(
                    "first-order vector carries nonzero curvature terms")

    @property
    def n_params(self) -> int:
        return 6 if self.order == "first" else 12

    def as_array(self) -> np.ndarray:
        if self.order == "first":
            return np.array([self.u, self.u_x, self.u_y,
                             self.v, self.v_x, self.v_y])
        return np.array([self.u, self.u_x, self.u_y,
                         self.u_xx, self.u_yy, self.u_xy,
                         self.v, self.v_x, self.v_y,
                         self.v_xx, self.v_yy, self.v_xy])

    @classmethod
    def from_array(cls, arr: np.ndarray, order: str) -> "DeformVector":
        arr = np.asarray(arr, dtype=np.float64)
        if order == "first":
            u, u_x, u_y, v, v_x, v_y = arr
            return cls(order="first", u=u, v=v, u_x=u_x, u_y=u_y,
                       v_x=v_x, v_y=v_y)
        (u, u_x, u_y, u_xx, u_yy, u_xy,
         v, v_x, v_y, v_xx, v_yy, v_xy) = arr
        return cls(order="second", u=u, v=v, u_x=u_x, u_y=u_y,
                   v_x=v_x, v_y=v_y, u_xx=u_xx, u_yy=u_yy, u_xy=u_xy,
                   v_xx=v_xx, v_yy=v_yy, v_xy=v_xy)

    def translated_guess(self) -> "DeformVector":
        """Copy retaining only (u, v) — used to hand a neighbor its guess."""
        return DeformVector(order=self.order, u=self.u, v=self.v)


@dataclass(frozen=True)
class SolverOptions:
    """Gauss-Newton stopping controls."""

    tol: float = 1e-3
    max_iter: int = 50


@dataclass(frozen=True)
class MatchResult:
    """Refined subset match with its correlation quality."""

    p: DeformVector
    c_znssd: float
    c_zncc: float
    iterations: int
    converged: bool


def warp_point(p: DeformVector, subset: SubsetSpec, dx, dy):
    """Map local offset (dx, dy) of the subset into the deformed image.

    First order:  x' = x0 + dx + u + u_x dx + u_y dy   (same pattern for y')
    Second order adds 0.5 u_xx dx^2 + 0.5 u_yy dy^2 + u_xy dx dy.
    """
    dx = np.asarray(dx, dtype=np.float64)
    dy = np.asarray(dy, dtype=np.float64)
    x0, y0 = subset.center
    xp = x0 + dx + p.u + p.u_x * dx + p.u_y * dy
    yp = y0 + dy + p.v + p.v_x * dx + p.v_y * dy
    if p.order == "second":
        xp = xp + 0.5 * p.u_xx * dx * dx + 0.5 * p.u_yy * dy * dy + p.u_xy * dx * dy
        yp = yp + 0.5 * p.v_xx * dx * dx + 0.5 * p.v_yy * dy * dy + p.v_xy * dx * dy
    return xp, yp


def _ref_subset_values(ref: GrayImage, subset: SubsetSpec) -> np.ndarray:
    x0, y0 = subset.center
    ix, iy = int(round(x0)), int(round(y0))
    M = subset.M
    if (ix - M < 0 or iy - M < 0
            or ix + M >= ref.width or iy + M >= ref.height):
        raise SubsetOutOfBoundsError(
            f"subset at ({x0},{y0}) M={M} exceeds reference image {ref.shape}")
    return ref.intensities[iy - M:iy + M + 1, ix - M:ix + M + 1].ravel()


def cost(ref: GrayImage, deformed: Interpolator, subset: SubsetSpec,
         p: DeformVector, criterion: str = "ZNSSD") -> float:
    """Correlation cost of the warped subset under the chosen criterion.

    Criteria: SSD (sum of squared differences), CC (cross-correlation),
    ZNSSD, ZNCC (zero-normalized forms, insensitive to intensity offset
    and positive scale).

    Raises:
        WarpOutOfDomainError: warped subset leaves the interpolable area.
        ZeroVarianceSubsetError: a ZN criterion meets a flat subset.
    """
    f = _ref_subset_values(ref, subset)
    dx, dy = subset.offsets()
    xp, yp = warp_point(p, subset, dx, dy)
    inside = deformed.contains(xp, yp)
    if not inside.all():
        raise WarpOutOfDomainError(
            f"warped subset leaves interpolable domain "
            f"({int((~inside).sum())} of {inside.size} pixels)")
    g = deformed(xp, yp)
    if criterion == "SSD":
        return float(np.sum((f - g) ** 2))
    if criterion == "CC":
        return float(np.sum(f * g))
    fb = f - f.mean()
    gb = g - g.mean()
    fn = np.sqrt(np.sum(fb * fb))
    gn = np.sqrt(np.sum(gb * gb))
    if fn < 1e-12 or gn < 1e-12:
        raise ZeroVarianceSubsetError(
            "zero-normalized criterion undefined on a constant subset")
    if criterion == "ZNSSD":
        return float(np.sum((fb / fn - gb / gn) ** 2))
    if criterion == "ZNCC":
        return float(np.sum(fb * gb) / (fn * gn))
    raise ValueError(f"unknown criterion {criterion!r}")


def zncc_from_znssd(c: float) -> float:
    """Map a ZNSSD value to its equivalent ZNCC: 1 - c/2, for c in [0, 4]."""
    if not 0.0 <= c <= 4.0 + 1e-12:
        raise OutOfRangeError(f"ZNSSD must lie in [0, 4], got {c}")
    return 1.0 - 0.5 * c


def _zncc_arrays(f: np.ndarray, g: np.ndarray) -> float:
    fb = f - f.mean()
    gb = g - g.mean()
    denom = np.sqrt(np.sum(fb * fb) * np.sum(gb * gb))
    if denom < 1e-12:
        raise ZeroVarianceSubsetError(
            "zero-normalized criterion undefined on a constant subset")
    return float(np.sum(fb * gb) / denom)


def integer_search(ref: GrayImage, deformed: GrayImage, subset: SubsetSpec,
                   radius: int) -> Tuple[int, int, float]:
    """Whole-pixel displacement maximizing ZNCC over a square window.

    Returns (du, dv, zncc). Ties break toward the smallest (dv, du) so
    results are deterministic.

    Raises:
        SearchWindowOutOfBoundsError: some tested placement leaves the image.
    """
    if radius < 0:
        raise ValueError(f"radius must be >= 0, got {radius}")
    f = _ref_subset_values(ref, subset)
    x0, y0 = int(round(subset.center[0])), int(round(subset.center[1]))
    M = subset.M
    if (x0 - M - radius < 0 or y0 - M - radius < 0
            or x0 + M + radius >= deformed.width
            or y0 + M + radius >= deformed.height):
        raise SearchWindowOutOfBoundsError(
            f"search window radius {radius} around ({x0},{y0}) M={M} "
            f"exceeds image {deformed.shape}")
    best = (-2.0, 0, 0)
    for dv in range(-radius, radius + 1):
        for du in range(-radius, radius + 1):
            g = deformed.intensities[
                y0 + dv - M:y0 + dv + M + 1,
                x0 + du - M:x0 + du + M + 1].ravel()
            try:
                c = _zncc_arrays(f, g)
            except ZeroVarianceSubsetError:
                continue
            # strict inequality keeps the first (smallest dv, du) on ties
            if c > best[0]:
                best = (c, du, dv)
    if best[0] < -1.5:
        raise ZeroVarianceSubsetError("every tested placement was constant")
    return best[1], best[2], best[0]


def _warp_jacobian(dx: np.ndarray, dy: np.ndarray, order: str) -> np.ndarray:
    """d(x', y')/dp rows per subset pixel: shape (n_px, 2, n_params)."""
    n = dx.size
    one = np.ones(n)
    zero = np.zeros(n)
    if order == "first":
        jx = np.stack([one, dx, dy, zero, zero, zero], axis=1)
        jy = np.stack([zero, zero, zero, one, dx, dy], axis=1)
    else:
        hx2 = 0.5 * dx * dx
        hy2 = 0.5 * dy * dy
        xy = dx * dy
        z = zero
        jx = np.stack([one, dx, dy, hx2, hy2, xy, z, z, z, z, z, z], axis=1)
        jy = np.stack([z, z, z, z, z, z, one, dx, dy, hx2, hy2, xy], axis=1)
    return np.stack([jx, jy], axis=1)


def _update_scale(M: int, order: str) -> np.ndarray:
    """Pixel-equivalent scaling of parameter updates for the stop test."""
    m = float(M)
    if order == "first":
        return np.array([1.0, m, m, 1.0, m, m])
    h = 0.5 * m * m
    return np.array([1.0, m, m, h, h, m * m,
                     1.0, m, m, h, h, m * m])


def refine_nr(ref: GrayImage, deformed: Interpolator, subset: SubsetSpec,
              p0: DeformVector, opts: SolverOptions = SolverOptions()
              ) -> MatchResult:
    """Subpixel refinement of a subset match by Gauss-Newton on ZNSSD.

    Iterates parameter updates until the update norm — measured in
    pixel-equivalent units, gradient terms scaled by M — drops below
    ``opts.tol``. The starting guess must lie in the convergence basin
    (typically the integer-search result).

    Raises:
        SingularHessianError: normal matrix not invertible (flat texture).
        DivergedOutOfDomainError: iterates leave the interpolable domain.
    """
    f = _ref_subset_values(ref, subset)
    fb = f - f.mean()
    fn = np.sqrt(np.sum(fb * fb))
    if fn < 1e-12:
        raise ZeroVarianceSubsetError(
            "reference subset has no texture to match")
    fh = fb / fn

    dx, dy = subset.offsets()
    jac = _warp_jacobian(dx, dy, p0.order)
    scale = _update_scale(subset.M, p0.order)
    p = p0.as_array()
    order = p0.order

    def normalized_subset(pa: np.ndarray, it: int):
        pv = DeformVector.from_array(pa, order)
        xp, yp = warp_point(pv, subset, dx, dy)
        if not deformed.contains(xp, yp).all():
            raise DivergedOutOfDomainError(
                f"iterate {it} left the interpolable domain at subset "
                f"({subset.center[0]:.1f},{subset.center[1]:.1f})")
        return xp, yp

    def eval_znssd(pa: np.ndarray, it: int) -> float:
        xp, yp = normalized_subset(pa, it)
        g = deformed(xp, yp)
        gb = g - g.mean()
        gn = np.sqrt(np.sum(gb * gb))
        if gn < 1e-12:
            raise ZeroVarianceSubsetError(
                "deformed subset has no texture to match")
        return float(np.sum((fh - gb / gn) ** 2))

    converged = False
    iterations = 0
    for iterations in range(1, opts.max_iter + 1):
        xp, yp = normalized_subset(p, iterations)
        g = deformed(xp, yp)
        gx, gy = deformed.grad(xp, yp)
        gb = g - g.mean()
        gn = np.sqrt(np.sum(gb * gb))
        if gn < 1e-12:
            raise ZeroVarianceSubsetError(
                "deformed subset has no texture to match")
        gh = gb / gn
        znssd_here = float(np.sum((fh - gh) ** 2))
        # steepest-descent images: grad g through the warp Jacobian, then
        # the exact Jacobian of the centered-and-normalized subset — the
        # centering/normalization terms matter: without them the update
        # has a residual-proportional bias that stalls above tight tols
        sd = gx[:, None] * jac[:, 0, :] + gy[:, None] * jac[:, 1, :]
        sd_c = sd - sd.mean(axis=0)
        j = (sd_c - np.outer(gh, gh @ sd_c)) / gn
        h = j.T @ j
        rhs = j.T @ (fh - gh)
        try:
            dp = np.linalg.solve(h, rhs)
        except np.linalg.LinAlgError as e:
            raise SingularHessianError(
                f"normal matrix singular at subset {subset.center}") from e
        if np.linalg.norm(dp * scale) < opts.tol:
            p = p + dp
            converged = True
            break
        # Damped step: halve until the cost strictly improves.  The
        # piecewise-cubic interpolant is continuous but its derivative
        # jumps at pixel-cell crossings, so near the optimum the full
        # Gauss-Newton step can limit-cycle across a kink without its
        # norm ever shrinking below tol.
        t = 1.0
        improved = False
        for _ in range(12):
            if eval_znssd(p + t * dp, iterations) < znssd_here:
                improved = True
                break
            t *= 0.5
        if not improved:
            # No step length lowers the cost: p is already the argmin of
            # the evaluable cost surface, i.e. the applied update is zero.
            converged = True
            break
        p = p + t * dp
        if np.linalg.norm(t * dp * scale) < opts.tol:
            converged = True
            break

    znssd = eval_znssd(p, iterations)
    return MatchResult(p=DeformVector.from_array(p, order), c_znssd=znssd,
                       c_zncc=zncc_from_znssd(znssd),
                       iterations=iterations, converged=converged)
