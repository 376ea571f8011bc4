"""Synthetic speckle generation and pattern-quality metrics.

Quality metrics (SSSIG, MIG) are reported in 8-bit gray-level units —
gradients of ``intensities * 255`` — so published threshold values keep
their meaning even though images are stored normalized to [0, 1].
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Tuple

import numpy as np
from scipy import ndimage

from .errors import (
    DensityUnreachableError,
    NoAdequateSubsetError,
    SubsetOutOfBoundsError,
)
from .image import GrayImage, gradients

BASECOAT = 0.9
MIG_THRESHOLD = 25.0


@dataclass(frozen=True)
class SpeckleParams:
    """Speckle-pattern generator parameters.

    Attributes:
        density: target fraction of area covered by dark granules, in [0, 0.9].
        granule_radius: nominal granule radius in pixels (>= 1); actual radii
            jitter uniformly by +/-30 %.
        contrast: basecoat-minus-granule intensity difference in [0, 1].
        rng_seed: seed for the placement stream; same seed, same image.
        blur_sigma: Gaussian blur (px) standing in for lens defocus /
            sensor fill, applied after anti-aliased granule rendering.
            Subpixel matching needs band-limited texture; 0 disables and
            leaves hard-edged granules that alias under interpolation.
    """

    density: float = 0.5
    granule_radius: float = 2.0
    contrast: float = 0.8
    rng_seed: int = 0
    blur_sigma: float = 0.65

    def __post_init__(self):
        if not 0.0 <= self.density <= 0.9:
            raise ValueError(f"density must be in [0, 0.9], got {self.density}")
        if self.granule_radius < 1.0:
            raise ValueError(
                f"granule_radius must be >= 1, got {self.granule_radius}")
        if not 0.0 <= self.contrast <= 1.0:
            raise ValueError(f"contrast must be in [0, 1], got {self.contrast}")
        if self.blur_sigma < 0.0:
            raise ValueError(f"blur_sigma must be >= 0, got {self.blur_sigma}")


@dataclass(frozen=True)
class QualityReport:
    """Pattern-quality summary for an image and a set of probe subsets."""

    mig: float
    sssig_x: Tuple[float, ...]
    sssig_y: Tuple[float, ...]
    pass_mig: bool
    mean_granule_diameter_px: float

    def to_dict(self) -> dict:
        return {
            "mig": self.mig,
            "sssig_x": list(self.sssig_x),
            "sssig_y": list(self.sssig_y),
            "pass_mig": self.pass_mig,
            "mean_granule_diameter_px": self.mean_granule_diameter_px,
        }


@dataclass(frozen=True)
class SetupGeometry:
    """Imaging geometry for the stand-off distance rule.

    Attributes:
        object_dim: object field of view to span, mm.
        focal_length: lens focal length, mm.
        sensor_pixels: sensor width, pixels.
        pixel_pitch: sensor pixel pitch, mm.
    """

    object_dim: float
    focal_length: float
    sensor_pixels: int
    pixel_pitch: float

    def __post_init__(self):
        for name in ("object_dim", "focal_length", "sensor_pixels", "pixel_pitch"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be strictly positive")


def gen_speckle(params: SpeckleParams, width: int, height: int,
                max_attempts: int | None = None) -> GrayImage:
    """Generate a speckle pattern: white basecoat with dark circular granules.

    Granule centers are drawn uniformly (seeded) and stamped as opaque
    disks until the covered-pixel fraction reaches ``params.density``.
    ``max_attempts`` overrides the default placement budget (sized so any
    admissible density is reachable with wide margin).

    Raises:
        DensityUnreachableError: if the target coverage is not reached
            within the placement budget.
    """
    if width < 32 or height < 32:
        raise ValueError(f"pattern must be at least 32x32, got {width}x{height}")
    rng = np.random.default_rng(params.rng_seed)
    if params.density == 0.0:
        return GrayImage(np.full((height, width), BASECOAT, dtype=np.float64))

    target_pixels = int(round(params.density * width * height))
    coverage = np.zeros((height, width), dtype=np.float64)
    covered = np.zeros((height, width), dtype=bool)
    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
    # 4x4 supersampling grid for anti-aliased granule edges
    ss = (np.arange(4) + 0.5) / 4.0 - 0.5
    oy, ox = np.meshgrid(ss, ss, indexing="ij")

    # generous budget: coverage per disk >= pi*(0.7 r)^2 and overlaps waste
    # area, so cap attempts well above the ideal disk count
    if max_attempts is None:
        r_mean_area = np.pi * params.granule_radius ** 2
        max_attempts = int(50 * max(1.0, target_pixels / r_mean_area)) + 1000
    attempts = 0
    n_covered = 0
    while n_covered < target_pixels:
        if attempts >= max_attempts:
            raise DensityUnreachableError(
                f"coverage {n_covered / (width * height):.3f} after "
                f"{attempts} granules, target {params.density}")
        cx = rng.uniform(0, width)
        cy = rng.uniform(0, height)
        r = params.granule_radius * rng.uniform(0.7, 1.3)
        attempts += 1
        x0 = max(int(cx - r) - 1, 0)
        x1 = min(int(cx + r) + 2, width)
        y0 = max(int(cy - r) - 1, 0)
        y1 = min(int(cy + r) + 2, height)
        px = xs[y0:y1, x0:x1][..., None, None] + ox
        py = ys[y0:y1, x0:x1][..., None, None] + oy
        frac = (((px - cx) ** 2 + (py - cy) ** 2) <= r * r).mean(axis=(-2, -1))
        np.maximum(coverage[y0:y1, x0:x1], frac, out=coverage[y0:y1, x0:x1])
        patch = covered[y0:y1, x0:x1]
        hard = frac >= 0.5
        n_covered += int((hard & ~patch).sum())
        patch |= hard
    img = BASECOAT - params.contrast * coverage
    if params.blur_sigma > 0.0:
        img = ndimage.gaussian_filter(img, params.blur_sigma, mode="nearest")
    return GrayImage(np.clip(img, 0.0, 1.0))


def sssig(img: GrayImage, center: Tuple[int, int], M: int) -> Tuple[float, float]:
    """Sum of squared subset intensity gradients over a (2M+1)^2 subset.

    ``center`` is (x, y) in pixels. Returns (sssig_x, sssig_y) where
    sssig_x = sum of fx^2 over the subset, in gray-levels^2/px^2.

    Raises:
        SubsetOutOfBoundsError: subset not fully inside the image.
    """
    cx, cy = int(center[0]), int(center[1])
    if M < 1:
        raise ValueError(f"M must be >= 1, got {M}")
    if (cx - M < 0 or cy - M < 0 or cx + M >= img.width or cy + M >= img.height):
        raise SubsetOutOfBoundsError(
            f"subset center ({cx},{cy}) half-width {M} exceeds image {img.shape}")
    g = gradients(img)
    fx = g.fx[cy - M:cy + M + 1, cx - M:cx + M + 1] * 255.0
    fy = g.fy[cy - M:cy + M + 1, cx - M:cx + M + 1] * 255.0
    return float(np.sum(fx * fx)), float(np.sum(fy * fy))


def mig(img: GrayImage) -> float:
    """Mean intensity gradient: mean over pixels of |grad f| in gray-levels/px."""
    g = gradients(img)
    mag = np.hypot(g.fx * 255.0, g.fy * 255.0)
    return float(mag.mean())


def _disk(r: int) -> np.ndarray:
    span = np.arange(-r, r + 1)
    xx, yy = np.meshgrid(span, span)
    return xx * xx + yy * yy <= r * r


def mean_granule_diameter(img: GrayImage, r_max: int = 10) -> float:
    """Area-weighted mean dark-granule diameter in pixels, by granulometry.

    Opens the below-mid-gray mask with growing disks and attributes the
    area lost between radii r-1 and r to granules of radius ~ r - 0.5.
    Robust to granules touching each other, unlike blob labeling.
    Returns 0.0 for a granule-free image.
    """
    dark = img.intensities < 0.5
    if not dark.any():
        return 0.0
    survive = [float(dark.sum())]
    for r in range(1, r_max + 1):
        opened = ndimage.binary_opening(dark, structure=_disk(r))
        survive.append(float(opened.sum()))
        if survive[-1] == 0.0:
            break
    survive = np.asarray(survive)
    lost = survive[:-1] - survive[1:]
    if lost.sum() <= 0:
        return 0.0
    radii = np.arange(len(lost)) + 0.5
    return 2.0 * float((lost * radii).sum() / lost.sum())


def quality_report(img: GrayImage, probes: Sequence[Tuple[int, int]],
                   M: int = 10) -> QualityReport:
    """MIG plus per-probe SSSIG, gated against the minimum-MIG rule."""
    sx, sy = [], []
    for p in probes:
        a, b = sssig(img, p, M)
        sx.append(a)
        sy.append(b)
    m = mig(img)
    return QualityReport(
        mig=m,
        sssig_x=tuple(sx),
        sssig_y=tuple(sy),
        pass_mig=bool(m >= MIG_THRESHOLD),
        mean_granule_diameter_px=mean_granule_diameter(img),
    )


def select_subset_size(img: GrayImage, probes: Sequence[Tuple[int, int]],
                       threshold: float, M_min: int, M_max: int) -> int:
    """Smallest half-width M in [M_min, M_max] whose worst-probe SSSIG
    meets ``threshold``.

    The pattern literature derives the threshold from a target
    displacement accuracy rather than prescribing a number; typical
    working values for 8-bit speckle imagery are 1e4-1e5.

    Raises:
        NoAdequateSubsetError: threshold unreachable even at M_max.
        SubsetOutOfBoundsError: a probe lacks M_max margin.
    """
    if M_min > M_max:
        raise ValueError(f"M_min {M_min} exceeds M_max {M_max}")
    for p in probes:
        cx, cy = int(p[0]), int(p[1])
        if (cx - M_max < 0 or cy - M_max < 0
                or cx + M_max >= img.width or cy + M_max >= img.height):
            raise SubsetOutOfBoundsError(
                f"probe ({cx},{cy}) lacks margin {M_max} in image {img.shape}")
    for M in range(M_min, M_max + 1):
        worst = min(min(sssig(img, p, M)) for p in probes)
        if worst >= threshold:
            return M
    raise NoAdequateSubsetError(
        f"SSSIG threshold {threshold} unreachable at M_max={M_max}")


def optimal_distance(g: SetupGeometry) -> float:
    """Stand-off distance (mm) that maps ``object_dim`` onto the sensor:
    OD = w*f/S_w + f with sensor width S_w = sensor_pixels * pixel_pitch."""
    s_w = g.sensor_pixels * g.pixel_pitch
    return g.object_dim * g.focal_length / s_w + g.focal_length
