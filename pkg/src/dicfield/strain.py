"""Strain fields from measured displacement grids.

Displacement gradients come from a local least-squares plane fit over
the strain window (pointwise differentiation of noisy DIC data is
useless in practice); the fitted gradients feed the finite-strain
(Green-Lagrange) expressions, so rigid rotations produce zero strain.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InsufficientSupportError
from .rgdic import DisplacementField, ROIGrid

DEFAULT_WINDOW_RADIUS = 7


@dataclass(frozen=True)
class StrainField:
    """Green-Lagrange strain components per grid node.

    ``valid`` marks nodes whose strain window held at least 6 valid
    displacement samples and produced a full-rank plane fit.
    """

    grid: ROIGrid
    e_xx: np.ndarray
    e_xy: np.ndarray
    e_yy: np.ndarray
    valid: np.ndarray
    window_radius: int


def green_lagrange_2d(u_x: float, u_y: float, v_x: float, v_y: float):
    """Finite-strain components from displacement gradients:

    e_xx = u_x + (u_x^2 + v_x^2)/2
    e_xy = (u_y + v_x + u_x u_y + v_x v_y)/2
    e_yy = v_y + (u_y^2 + v_y^2)/2
    """
    e_xx = u_x + 0.5 * (u_x * u_x + v_x * v_x)
    e_xy = 0.5 * (u_y + v_x + u_x * u_y + v_x * v_y)
    e_yy = v_y + 0.5 * (u_y * u_y + v_y * v_y)
    return e_xx, e_xy, e_yy


def strain_field(disp: DisplacementField,
                 window_radius: int = DEFAULT_WINDOW_RADIUS) -> StrainField:
    """Strain at each grid node from a plane fit over its window.

    At each node, u and v are each fitted with a plane over the valid
    displacements within a square window of ``window_radius`` grid
    points; the plane gradients (exact for affine fields) feed the
    Green-Lagrange expressions. Nodes with fewer than 6 valid samples
    or a rank-deficient fit are marked invalid.

    Raises:
        InsufficientSupportError: no node at all has enough support.
    """
    if window_radius < 1:
        raise ValueError(f"window_radius must be >= 1, got {window_radius}")
    grid = disp.grid
    rows, cols = grid.shape
    e_xx = np.full((rows, cols), np.nan)
    e_xy = np.full((rows, cols), np.nan)
    e_yy = np.full((rows, cols), np.nan)
    valid = np.zeros((rows, cols), dtype=bool)

    for r in range(rows):
        r0, r1 = max(0, r - window_radius), min(rows, r + window_radius + 1)
        for c in range(cols):
            if not disp.valid[r, c]:
                continue
            c0, c1 = max(0, c - window_radius), min(cols, c + window_radius + 1)
            sel = disp.valid[r0:r1, c0:c1]
            if sel.sum() < 6:
                continue
            dx = (grid.px[r0:r1, c0:c1][sel] - grid.px[r, c])
            dy = (grid.py[r0:r1, c0:c1][sel] - grid.py[r, c])
            uu = disp.u[r0:r1, c0:c1][sel]
            vv = disp.v[r0:r1, c0:c1][sel]
            a = np.column_stack([np.ones(dx.size), dx, dy])
            # one decomposition serves both components
            try:
                coef, _, rank, _ = np.linalg.lstsq(
                    a, np.column_stack([uu, vv]), rcond=None)
            except np.linalg.LinAlgError:
                continue
            if rank < 3:
                continue
            u_x, u_y = coef[1, 0], coef[2, 0]
            v_x, v_y = coef[1, 1], coef[2, 1]
            e_xx[r, c], e_xy[r, c], e_yy[r, c] = green_lagrange_2d(
                u_x, u_y, v_x, v_y)
            valid[r, c] = True

    if not valid.any():
        raise InsufficientSupportError(
            "no grid node has >= 6 valid displacement samples in its "
            f"strain window (radius {window_radius})")
    return StrainField(grid=grid, e_xx=e_xx, e_xy=e_xy, e_yy=e_yy,
                       valid=valid, window_radius=window_radius)
