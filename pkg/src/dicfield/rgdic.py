"""Reliability-guided full-field matching on a regular grid.

The engine matches the seed subsets first, then repeatedly takes the
best-correlated computed point and matches its four grid neighbors with
that point's deformation as the starting guess, so the solution front
always grows through well-correlated territory. A priority queue keyed
by (-zncc, row, col) makes the order — and therefore the output —
deterministic; parallel workers only ever refine the popped point's
neighbors concurrently and commit in fixed neighbor order, so results
are bit-identical for any worker count.
"""

from __future__ import annotations

import heapq
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from .errors import (
    DicError,
    EmptyROIError,
    SeedFailedError,
    SubsetOutOfBoundsError,
)
from .image import GrayImage, Interpolator
from .subset import (
    DeformVector,
    MatchResult,
    SolverOptions,
    SubsetSpec,
    integer_search,
    refine_nr,
)


@dataclass(frozen=True)
class ROIGrid:
    """Regular measurement grid over a region of interest.

    Attributes:
        px, py: pixel coordinates of grid nodes, shape (rows, cols).
        spacing: grid pitch in pixels.
        mask: which nodes participate.
        partition_labels: connected-region label per node (0 = excluded);
            propagation never crosses partition boundaries.
    """

    px: np.ndarray
    py: np.ndarray
    spacing: int
    mask: np.ndarray
    partition_labels: np.ndarray

    def __post_init__(self):
        if not (self.px.shape == self.py.shape == self.mask.shape
                == self.partition_labels.shape):
            raise ValueError("grid component shapes differ")

    @property
    def shape(self) -> Tuple[int, int]:
        return self.mask.shape

    @classmethod
    def rect(cls, x_min: float, y_min: float, x_max: float, y_max: float,
             spacing: int, mask: Optional[np.ndarray] = None) -> "ROIGrid":
        """Grid covering [x_min, x_max] x [y_min, y_max] at ``spacing`` px.

        ``mask``, when given, must match the implied grid shape;
        partitions are labeled from its 4-connected components.
        """
        if spacing < 1:
            raise ValueError(f"spacing must be >= 1, got {spacing}")
        xs = np.arange(x_min, x_max + 1e-9, spacing, dtype=np.float64)
        ys = np.arange(y_min, y_max + 1e-9, spacing, dtype=np.float64)
        if len(xs) == 0 or len(ys) == 0:
            raise EmptyROIError("requested rectangle contains no grid nodes")
        px, py = np.meshgrid(xs, ys)
        if mask is None:
            mask = np.ones(px.shape, dtype=bool)
        else:
            mask = np.asarray(mask, dtype=bool)
            if mask.shape != px.shape:
                raise ValueError(
                    f"mask shape {mask.shape} does not match grid {px.shape}")
        labels, _ = ndimage.label(
            mask, structure=np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]]))
        return cls(px=px, py=py, spacing=spacing, mask=mask,
                   partition_labels=labels)

    def node_at(self, x: float, y: float) -> Tuple[int, int]:
        """Grid index of the node nearest to pixel point (x, y)."""
        r = int(np.argmin(np.abs(self.py[:, 0] - y)))
        c = int(np.argmin(np.abs(self.px[0, :] - x)))
        return r, c


@dataclass(frozen=True)
class SeedPoint:
    """Starting point for propagation.

    ``location`` is a pixel point snapped to the nearest grid node.
    Without an ``initial_guess`` the seed is located by integer search.
    """

    location: Tuple[float, float]
    initial_guess: Optional[DeformVector] = None


@dataclass(frozen=True)
class RgdicOptions:
    """Engine controls.

    ``prefilter_sigma`` low-passes both images before matching; it
    commutes with translation, so displacements are unbiased while the
    systematic (phase-dependent) error of cubic interpolation drops by
    about half an order of magnitude. Set 0 to match raw images.
    """

    subset_m: int = 10
    order: str = "first"
    tol: float = 1e-3
    max_iter: int = 50
    zncc_floor: float = 0.5
    search_radius: int = 10
    n_workers: int = 1
    prefilter_sigma: float = 0.8


def prefilter_image(img: GrayImage, sigma: float) -> GrayImage:
    """Gaussian low-pass used by the matching engine; identity for sigma 0."""
    if sigma <= 0.0:
        return img
    smoothed = ndimage.gaussian_filter(img.intensities, sigma, mode="nearest")
    return GrayImage(np.clip(smoothed, 0.0, 1.0))


@dataclass
class DisplacementField:
    """Full-field match: per-node displacement and correlation quality."""

    grid: ROIGrid
    u: np.ndarray
    v: np.ndarray
    zncc: np.ndarray
    valid: np.ndarray
    params: List[List[Optional[DeformVector]]] = field(repr=False, default=None)

    def valid_fraction(self) -> float:
        n_mask = int(self.grid.mask.sum())
        return float(self.valid.sum() / n_mask) if n_mask else 0.0


def _check_containment(ref: GrayImage, deformed: GrayImage, grid: ROIGrid,
                       M: int) -> None:
    margin = M + 2  # interpolation margin on the deformed side
    ok = ((grid.px - margin >= 0) & (grid.py - margin >= 0)
          & (grid.px + margin <= ref.width - 1)
          & (grid.py + margin <= ref.height - 1))
    bad = grid.mask & ~ok
    if bad.any():
        r, c = np.argwhere(bad)[0]
        raise SubsetOutOfBoundsError(
            f"grid node ({grid.px[r, c]:.0f},{grid.py[r, c]:.0f}) lacks "
            f"subset+interpolation margin {margin} in image {ref.shape}")


def _refine_node(ref: GrayImage, itp: Interpolator, grid: ROIGrid,
                 r: int, c: int, guess: DeformVector,
                 opts: RgdicOptions) -> Optional[MatchResult]:
    spec = SubsetSpec(center=(float(grid.px[r, c]), float(grid.py[r, c])),
                      M=opts.subset_m)
    try:
        res = refine_nr(ref, itp, spec, guess,
                        SolverOptions(tol=opts.tol, max_iter=opts.max_iter))
    except DicError:
        return None
    if not res.converged or res.c_zncc < opts.zncc_floor:
        return None
    return res


def rgdic(ref: GrayImage, deformed: GrayImage, roi: ROIGrid,
          seeds: Sequence[SeedPoint], opts: RgdicOptions = RgdicOptions()
          ) -> DisplacementField:
    """Reliability-guided propagation from seed points over the ROI grid.

    Each seed is matched by integer search (unless it carries a guess)
    plus subpixel refinement; propagation then always extends from the
    best-correlated computed node into its 4-neighbors within the same
    partition. Nodes that fail to converge or fall below the ZNCC floor
    stay invalid and do not propagate. Partitions without any seed are
    left entirely invalid.

    Raises:
        EmptyROIError: no unmasked grid node.
        SeedFailedError: a seed fails to match above the ZNCC floor.
        SubsetOutOfBoundsError: some unmasked node lacks margin.
    """
    if not roi.mask.any():
        raise EmptyROIError("ROI mask excludes every grid node")
    if not seeds:
        raise SeedFailedError("at least one seed point is required")
    _check_containment(ref, deformed, roi, opts.subset_m)
    ref = prefilter_image(ref, opts.prefilter_sigma)
    deformed = prefilter_image(deformed, opts.prefilter_sigma)
    itp = Interpolator(deformed)
    rows, cols = roi.shape

    u = np.full((rows, cols), np.nan)
    v = np.full((rows, cols), np.nan)
    zncc = np.full((rows, cols), np.nan)
    valid = np.zeros((rows, cols), dtype=bool)
    params: List[List[Optional[DeformVector]]] = [
        [None] * cols for _ in range(rows)]
    # 0 = unseen, 1 = computed ok, 2 = failed/abandoned
    state = np.zeros((rows, cols), dtype=np.uint8)

    def commit(r: int, c: int, res: Optional[MatchResult], heap) -> None:
        if res is None:
            state[r, c] = 2
            return
        state[r, c] = 1
        u[r, c] = res.p.u
        v[r, c] = res.p.v
        zncc[r, c] = res.c_zncc
        valid[r, c] = True
        params[r][c] = res.p
        heapq.heappush(heap, (-res.c_zncc, r, c))

    heap: list = []
    for seed in seeds:
        r, c = roi.node_at(*seed.location)
        if not roi.mask[r, c]:
            raise SeedFailedError(
                f"seed {seed.location} snaps to masked node ({r},{c})")
        if state[r, c] == 1:
            continue
        spec = SubsetSpec(center=(float(roi.px[r, c]), float(roi.py[r, c])),
                          M=opts.subset_m)
        if seed.initial_guess is not None:
            guess = seed.initial_guess
        else:
            try:
                du, dv, c0 = integer_search(ref, deformed, spec,
                                            opts.search_radius)
            except DicError as e:
                raise SeedFailedError(
                    f"integer search failed at seed {seed.location}: {e}"
                ) from e
            if c0 < opts.zncc_floor:
                raise SeedFailedError(
                    f"seed {seed.location} integer search zncc {c0:.3f} "
                    f"below floor {opts.zncc_floor}")
            guess = DeformVector(order=opts.order, u=float(du), v=float(dv))
        res = _refine_node(ref, itp, roi, r, c, guess, opts)
        if res is None:
            raise SeedFailedError(
                f"seed {seed.location} failed refinement above floor "
                f"{opts.zncc_floor}")
        commit(r, c, res, heap)

    pool = (ThreadPoolExecutor(max_workers=opts.n_workers)
            if opts.n_workers > 1 else None)
    try:
        while heap:
            _, r, c = heapq.heappop(heap)
            guess = params[r][c]
            # fixed neighbor order keeps commits deterministic
            neighbors = [(r - 1, c), (r + 1, c), (r, c - 1), (r, c + 1)]
            todo = []
            for rr, cc in neighbors:
                if not (0 <= rr < rows and 0 <= cc < cols):
                    continue
                if state[rr, cc] != 0 or not roi.mask[rr, cc]:
                    continue
                if (roi.partition_labels[rr, cc]
                        != roi.partition_labels[r, c]):
                    continue
                state[rr, cc] = 3  # claimed, pending commit
                todo.append((rr, cc))
            if not todo:
                continue
            if pool is None:
                results = [_refine_node(ref, itp, roi, rr, cc,
                                        guess.translated_guess(), opts)
                           for rr, cc in todo]
            else:
                futs = [pool.submit(_refine_node, ref, itp, roi, rr, cc,
                                    guess.translated_guess(), opts)
                        for rr, cc in todo]
                results = [f.result() for f in futs]
            for (rr, cc), res in zip(todo, results):
                commit(rr, cc, res, heap)
    finally:
        if pool is not None:
            pool.shutdown()

    return DisplacementField(grid=roi, u=u, v=v, zncc=zncc, valid=valid,
                             params=params)


def _interp_field_bilinear(grid: ROIGrid, values: np.ndarray,
                           valid: np.ndarray, x: np.ndarray, y: np.ndarray
                           ) -> Tuple[np.ndarray, np.ndarray]:
    """Bilinear sample of a grid field at pixel points; flags invalid
    whenever any stencil corner is invalid or the point leaves the grid."""
    x0 = grid.px[0, 0]
    y0 = grid.py[0, 0]
    s = float(grid.spacing)
    gx = (np.asarray(x, np.float64) - x0) / s
    gy = (np.asarray(y, np.float64) - y0) / s
    rows, cols = grid.shape
    ok = (gx >= 0) & (gx <= cols - 1) & (gy >= 0) & (gy <= rows - 1)
    gx = np.clip(gx, 0, cols - 1)
    gy = np.clip(gy, 0, rows - 1)
    c0 = np.clip(np.floor(gx).astype(int), 0, cols - 2) if cols > 1 else \
        np.zeros_like(gx, dtype=int)
    r0 = np.clip(np.floor(gy).astype(int), 0, rows - 2) if rows > 1 else \
        np.zeros_like(gy, dtype=int)
    tx = gx - c0
    ty = gy - r0
    c1 = np.minimum(c0 + 1, cols - 1)
    r1 = np.minimum(r0 + 1, rows - 1)
    corners_ok = (valid[r0, c0] & valid[r0, c1]
                  & valid[r1, c0] & valid[r1, c1])
    vals = ((1 - ty) * ((1 - tx) * values[r0, c0] + tx * values[r0, c1])
            + ty * ((1 - tx) * values[r1, c0] + tx * values[r1, c1]))
    return vals, ok & corners_ok


def rgdic_sequence(ref: GrayImage, frames: Sequence[GrayImage], roi: ROIGrid,
                   seeds: Sequence[SeedPoint],
                   opts: RgdicOptions = RgdicOptions(),
                   reanchor_below: float = 0.8
                   ) -> List[DisplacementField]:
    """Match a frame sequence against a common reference, re-anchoring when
    correlation degrades.

    Each frame is first matched against the current reference. When the
    valid fraction drops below ``reanchor_below``, the engine re-anchors:
    the previous frame becomes the new reference, the frame is re-matched
    incrementally, and displacements are composed as
    u_total(x) = u_prev(x) + u_inc(x + u_prev(x)) with bilinear sampling
    of the incremental field at the warped node positions.
    """
    results: List[DisplacementField] = []
    anchor = ref
    # displacement of the current anchor's nodes relative to the original
    # reference (zero while the anchor IS the original reference)
    acc_u = np.zeros(roi.shape)
    acc_v = np.zeros(roi.shape)
    acc_valid = roi.mask.copy()
    prev_frame: Optional[GrayImage] = None
    prev_total: Optional[DisplacementField] = None

    for frame in frames:
        try:
            disp = rgdic(anchor, frame, roi, seeds, opts)
        except SeedFailedError:
            disp = None  # complete decorrelation against this anchor
        can_reanchor = (prev_frame is not None and prev_total is not None
                        and prev_frame is not anchor)
        if disp is None and not can_reanchor:
            raise SeedFailedError(
                "frame decorrelated from the reference and no earlier "
                "well-correlated frame exists to re-anchor on")
        if can_reanchor and (disp is None
                             or disp.valid_fraction() < reanchor_below):
            # re-anchor on the last well-correlated frame and retry
            anchor = prev_frame
            acc_u = prev_total.u.copy()
            acc_v = prev_total.v.copy()
            acc_valid = prev_total.valid.copy()
            disp = rgdic(anchor, frame, roi, seeds, opts)
        if anchor is ref:
            total_u = np.where(disp.valid, disp.u, np.nan)
            total_v = np.where(disp.valid, disp.v, np.nan)
            total_valid = disp.valid
        else:
            # sample the incremental field where each node landed
            xw = roi.px + np.where(acc_valid, acc_u, 0.0)
            yw = roi.py + np.where(acc_valid, acc_v, 0.0)
            inc_u, ok_u = _interp_field_bilinear(roi, disp.u, disp.valid,
                                                 xw, yw)
            inc_v, ok_v = _interp_field_bilinear(roi, disp.v, disp.valid,
                                                 xw, yw)
            total_valid = acc_valid & ok_u & ok_v
            total_u = np.where(total_valid, acc_u + inc_u, np.nan)
            total_v = np.where(total_valid, acc_v + inc_v, np.nan)
        composed = DisplacementField(
            grid=roi, u=total_u, v=total_v, zncc=disp.zncc,
            valid=total_valid, params=disp.params)
        results.append(composed)
        prev_frame = frame
        prev_total = composed
    return results
