"""Fracture and viscoelastic post-processing of measured displacement
and strain fields.

Time-dependent material response uses a Prony-series relaxation modulus
and discrete convolution in reduced time; fracture parameters (crack
tip, CTOD, mode-I stress intensity, domain J-integral, process-zone and
crack masks, growth-law fit) operate on grid fields produced by the
matching engine. For viscoelastic specimens the intended route is:
compute pseudo-displacements first, then apply the elastic machinery to
them.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple, Union

import numpy as np

from .errors import (
    DomainIntersectsInvalidPointsError,
    MismatchedSeriesError,
    NoDiscontinuityFoundError,
    NonMonotonicTimeError,
    NonPositiveDeltaKError,
    NonPositiveRateError,
    NoPlateauError,
    RankDeficientError,
    TooFewPointsError,
)
from .rgdic import DisplacementField, _interp_field_bilinear
from .strain import StrainField

# process-zone thresholds in microstrain: room temperature and low
# temperature defaults
EFPZ_THRESHOLD_WARM_UE = 3000.0
EFPZ_THRESHOLD_COLD_UE = 1500.0
# crack-map thresholds in microstrain: opening (e_xx, vertical crack)
# and interfacial (e_yy) indicators
CRACK_XX_THRESHOLD_UE = 9000.0
CRACK_YY_THRESHOLD_UE = 6000.0

CRACK_NONE = 0
CRACK_VERTICAL = 1
CRACK_INTERFACIAL = 2


# ----------------------------------------------------------------------
# viscoelastic constitutive response


@dataclass(frozen=True)
class ViscoModel:
    """Prony-series relaxation modulus with a constant time-temperature
    shift factor.

    E(t) = E_e + sum(E_n * exp(-t / rho_n)); reduced time is t / a_T.
    E_R is the reference modulus used to scale pseudo quantities
    (commonly the instantaneous modulus E(0)).
    """

    E_e: float
    terms: Tuple[Tuple[float, float], ...] = ()
    a_T: float = 1.0
    E_R: float = 1.0

    def __post_init__(self):
        if self.E_e < 0:
            raise ValueError(f"equilibrium modulus must be >= 0, got {self.E_e}")
        terms = tuple((float(En), float(rn)) for En, rn in self.terms)
        for En, rn in terms:
            if En <= 0 or rn <= 0:
                raise ValueError(
                    f"Prony coefficients must be positive, got ({En}, {rn})")
        if self.a_T <= 0:
            raise ValueError(f"shift factor must be > 0, got {self.a_T}")
        if self.E_R <= 0:
            raise ValueError(f"reference modulus must be > 0, got {self.E_R}")
        object.__setattr__(self, "terms", terms)

    def instantaneous(self) -> float:
        """E(0) = E_e + sum of all Prony coefficients."""
        return self.E_e + sum(En for En, _ in self.terms)


def relax_modulus(m: ViscoModel, t) -> np.ndarray:
    """Relaxation modulus E(t) = E_e + sum E_n exp(-t / rho_n), t >= 0."""
    t = np.asarray(t, dtype=float)
    if np.any(t < 0):
        raise ValueError("relaxation modulus is defined for t >= 0")
    out = np.full(t.shape, m.E_e, dtype=float)
    for En, rn in m.terms:
        out = out + En * np.exp(-t / rn)
    return out if out.ndim else float(out)


def _reduced_times(times, a_T: float) -> np.ndarray:
    times = np.asarray(times, dtype=float)
    if times.ndim != 1 or times.size < 1:
        raise ValueError("times must be a non-empty 1D series")
    if np.any(np.diff(times) <= 0):
        raise NonMonotonicTimeError("times must be strictly increasing")
    if times[0] < 0:
        raise ValueError("times must start at t >= 0")
    return times / a_T


def _hereditary_convolution(values: np.ndarray, xi: np.ndarray,
                            m: ViscoModel) -> np.ndarray:
    """Discrete hereditary integral sum E(xi - xi') d(values) with
    piecewise-linear input and trapezoidal kernel weights; the value at
    xi[0] enters as an instantaneous step."""
    n = xi.size
    out = np.empty(n)
    for i in range(n):
        acc = relax_modulus(m, xi[i] - xi[0]) * values[0]
        if i > 0:
            e_right = relax_modulus(m, xi[i] - xi[1:i + 1])
            e_left = relax_modulus(m, xi[i] - xi[0:i])
            acc += np.sum(0.5 * (e_right + e_left) * np.diff(values[:i + 1]))
        out[i] = acc
    return out


def visco_stress(strain, m: ViscoModel, times) -> np.ndarray:
    """Stress history from a strain history by the hereditary
    convolution in reduced time.

    The strain is treated as piecewise linear between samples, with the
    first sample applied as an instantaneous step; each segment's kernel
    integral uses the trapezoidal rule.

    Raises:
        NonMonotonicTimeError: times not strictly increasing.
    """
    strain = np.asarray(strain, dtype=float)
    xi = _reduced_times(times, m.a_T)
    if strain.shape != xi.shape:
        raise MismatchedSeriesError(
            f"strain series has {strain.shape}, times {xi.shape}")
    return _hereditary_convolution(strain, xi, m)


def strain_energy_density(stress, strain) -> float:
    """Energy per unit volume: the trapezoidal integral of stress over
    the strain path.

    Raises:
        MismatchedSeriesError: series lengths differ.
    """
    stress = np.asarray(stress, dtype=float)
    strain = np.asarray(strain, dtype=float)
    if stress.shape != strain.shape or stress.ndim != 1:
        raise MismatchedSeriesError(
            f"stress {stress.shape} and strain {strain.shape} must be "
            "aligned 1D series")
    if stress.size < 2:
        return 0.0
    return float(np.sum(0.5 * (stress[1:] + stress[:-1]) * np.diff(strain)))


def pseudo_displacement(u, m: ViscoModel, times) -> np.ndarray:
    """Pseudo-displacement history: the hereditary convolution of the
    displacement rate with the relaxation modulus, scaled by 1/E_R.

    With E(t) constant and equal to E_R this is the identity.

    Raises:
        NonMonotonicTimeError: times not strictly increasing.
    """
    u = np.asarray(u, dtype=float)
    xi = _reduced_times(times, m.a_T)
    if u.shape != xi.shape:
        raise MismatchedSeriesError(
            f"displacement series has {u.shape}, times {xi.shape}")
    return _hereditary_convolution(u, xi, m) / m.E_R


def pseudo_displacement_field(fields: Sequence[DisplacementField],
                              m: ViscoModel, times) -> DisplacementField:
    """Pseudo-displacement field at the final time from a displacement
    field history (the viscoelastic route into the elastic fracture
    machinery).

    A point is valid only if it is valid in every frame. Note the
    underlying correspondence principle assumes a constant modulus
    across the field; for strongly viscous states treat results with
    care.
    """
    warnings.warn(
        "pseudo-displacement analysis assumes a constant modulus across "
        "the field; verify this for strongly time-dependent states",
        stacklevel=2)
    if not fields:
        raise MismatchedSeriesError("no displacement fields given")
    xi = _reduced_times(times, m.a_T)
    if xi.size != len(fields):
        raise MismatchedSeriesError(
            f"{len(fields)} fields but {xi.size} time samples")
    grid = fields[0].grid
    valid = np.ones(grid.shape, dtype=bool)
    for f in fields:
        if f.grid.shape != grid.shape:
            raise MismatchedSeriesError("fields disagree in grid shape")
        valid &= f.valid
    u_hist = np.stack([f.u for f in fields])
    v_hist = np.stack([f.v for f in fields])
    u_r = np.full(grid.shape, np.nan)
    v_r = np.full(grid.shape, np.nan)
    rows, cols = grid.shape
    for r in range(rows):
        for c in range(cols):
            if not valid[r, c]:
                continue
            u_r[r, c] = _hereditary_convolution(u_hist[:, r, c], xi, m)[-1] \
                / m.E_R
            v_r[r, c] = _hereditary_convolution(v_hist[:, r, c], xi, m)[-1] \
                / m.E_R
    return DisplacementField(grid=grid, u=u_r, v=v_r,
                             zncc=fields[-1].zncc.copy(), valid=valid)


# ----------------------------------------------------------------------
# elastic material constants


@dataclass(frozen=True)
class MaterialElastic:
    """Isotropic elastic constants for plane problems.

    Give nu plus either mu (shear modulus) or E (Young's modulus); the
    other is derived from E = 2 mu (1 + nu). kappa follows the plane
    state: 3 - 4 nu for plane strain, (3 - nu)/(1 + nu) for plane
    stress.
    """

    nu: float
    plane: str = "strain"
    mu: Optional[float] = None
    E: Optional[float] = None

    def __post_init__(self):
        if not -1.0 < self.nu < 0.5:
            raise ValueError(f"Poisson ratio must be in (-1, 0.5), got {self.nu}")
        if self.plane not in ("strain", "stress"):
            raise ValueError(f"plane must be 'strain' or 'stress', got "
                             f"{self.plane!r}")
        mu, E = self.mu, self.E
        if mu is None and E is None:
            raise ValueError("give at least one of mu or E")
        if mu is None:
            mu = E / (2.0 * (1.0 + self.nu))
        elif E is None:
            E = 2.0 * mu * (1.0 + self.nu)
        elif abs(E - 2.0 * mu * (1.0 + self.nu)) > 1e-6 * abs(E):
            raise ValueError(
                f"inconsistent moduli: E={E} vs 2*mu*(1+nu)="
                f"{2.0 * mu * (1.0 + self.nu)}")
        if mu <= 0 or E <= 0:
            raise ValueError("moduli must be positive")
        object.__setattr__(self, "mu", float(mu))
        object.__setattr__(self, "E", float(E))

    @property
    def kappa(self) -> float:
        if self.plane == "strain":
            return 3.0 - 4.0 * self.nu
        return (3.0 - self.nu) / (1.0 + self.nu)

    def plane_stiffness(self) -> Tuple[float, float]:
        """(lame_eff, mu): sigma = lame_eff*tr(eps)*I + 2*mu*eps for the
        configured plane state."""
        if self.plane == "strain":
            lame = 2.0 * self.mu * self.nu / (1.0 - 2.0 * self.nu)
        else:
            lame = 2.0 * self.mu * self.nu / (1.0 - self.nu)
        return lame, self.mu


# ----------------------------------------------------------------------
# crack-tip location and CTOD


@dataclass(frozen=True)
class CrackTip:
    """Crack-tip position (pixels) and the unit direction the crack
    extends along (pointing from the notch through the tip into the
    uncracked ligament)."""

    position: Tuple[float, float]
    axis: Tuple[float, float]

    def __post_init__(self):
        ax, ay = self.axis
        n = float(np.hypot(ax, ay))
        if n == 0.0:
            raise ValueError("crack axis must be a non-zero direction")
        object.__setattr__(self, "axis", (ax / n, ay / n))


def _axis_aligned(axis: Tuple[float, float]) -> Tuple[int, int]:
    ax, ay = axis
    n = np.hypot(ax, ay)
    ax, ay = ax / n, ay / n
    for cand in ((1, 0), (-1, 0), (0, 1), (0, -1)):
        if abs(ax - cand[0]) < 1e-9 and abs(ay - cand[1]) < 1e-9:
            return cand
    raise ValueError(
        f"crack axis must be grid-aligned (+/-x or +/-y), got ({ax}, {ay})")


def _profiles_for_axis(disp: DisplacementField, axis: Tuple[int, int]):
    """Opening-displacement profiles perpendicular to the crack plane,
    ordered in the marching direction (from the notch end).

    Yields (along_position, cross_coords, opening_values, valid)."""
    ax, ay = axis
    grid = disp.grid
    # opening is the displacement component perpendicular to the axis
    if ax == 0:  # crack runs along y; profiles along x; opening = u
        n_prof = grid.shape[0]
        order = range(n_prof) if ay > 0 else range(n_prof - 1, -1, -1)
        for r in order:
            yield (float(grid.py[r, 0]), grid.px[r, :].astype(float),
                   disp.u[r, :], disp.valid[r, :])
    else:  # crack runs along x; profiles along y; opening = v
        n_prof = grid.shape[1]
        order = range(n_prof) if ax > 0 else range(n_prof - 1, -1, -1)
        for c in order:
            yield (float(grid.px[0, c]), grid.py[:, c].astype(float),
                   disp.v[:, c], disp.valid[:, c])


_FIT_WINDOW = 6  # nodes per side used for the local trend fits


def _fit_profile_jump(coords: np.ndarray, vals: np.ndarray,
                      valid: np.ndarray):
    """Split one profile at its largest step, fit a linear trend to a
    local window on each side, and return (jump, cross_of_jump,
    intersection, residuals) or None when the profile cannot support
    the fits.

    The window keeps the fits local to the crack plane so the
    extrapolated trends measure the face opening rather than far-field
    curvature; the node adjacent to the step on each side is excluded.
    """
    coords = coords[valid]
    vals = vals[valid]
    if coords.size < 8:
        return None
    steps = np.abs(np.diff(vals))
    # the split must leave >= 3 fit points per side, so search only the
    # interior; featureless profiles then report a zero jump
    lo, hi = 3, coords.size - 5
    j = lo + int(np.argmax(steps[lo:hi + 1]))
    left_x, left_v = coords[:j][-_FIT_WINDOW:], vals[:j][-_FIT_WINDOW:]
    right_x = coords[j + 2:][:_FIT_WINDOW]
    right_v = vals[j + 2:][:_FIT_WINDOW]
    bl, al = np.polyfit(left_x, left_v, 1)
    br, ar = np.polyfit(right_x, right_v, 1)
    x_mid = 0.5 * (coords[j] + coords[j + 1])
    jump = (ar + br * x_mid) - (al + bl * x_mid)
    res = np.concatenate([left_v - (al + bl * left_x),
                          right_v - (ar + br * right_x)])
    if abs(bl - br) > 1e-12:
        x_cross = (ar - al) / (bl - br)
        if not (coords[0] <= x_cross <= coords[-1]):
            x_cross = x_mid
    else:
        x_cross = x_mid
    return jump, x_mid, x_cross, np.abs(res)


def locate_crack_tip(disp: DisplacementField,
                     crack_axis: Tuple[float, float]) -> CrackTip:
    """Crack tip from opening-displacement profiles.

    Marches along the crack direction from the notch end; each profile
    perpendicular to the crack plane is split at its largest step and
    both sides get a local linear trend fit, whose difference at the
    split is the opening jump. The tip sits at the first profile whose
    jump drops below the noise floor (3x the median fit residual, but
    at least 5% of the peak jump so noise-free fields terminate); its
    cross coordinate is the intersection of the side fits of the last
    cracked profile.

    Raises:
        NoDiscontinuityFoundError: no profile shows a jump above the
            noise floor, or the jump never falls below it inside the
            field.
    """
    axis = _axis_aligned(crack_axis)
    rows = []
    residual_pool = []
    for along, coords, vals, valid in _profiles_for_axis(disp, axis):
        fit = _fit_profile_jump(coords, vals, valid)
        if fit is None:
            continue
        jump, x_mid, x_cross, res = fit
        rows.append((along, jump, x_cross))
        residual_pool.append(res)
    if not rows:
        raise NoDiscontinuityFoundError(
            "no profile had enough valid points to fit an opening jump")
    noise = float(np.median(np.concatenate(residual_pool)))
    noise_floor = max(3.0 * noise, 1e-12)
    jumps = np.array([abs(j) for _, j, _ in rows])
    if jumps.max() < noise_floor:
        raise NoDiscontinuityFoundError(
            f"largest opening jump {jumps.max():.3e} is below the noise "
            f"floor {noise_floor:.3e}")
    # on nearly noise-free fields the residual floor is vanishingly
    # small; a jump under 5% of the peak no longer indicates a crack
    floor = max(noise_floor, 0.05 * float(jumps.max()))
    first_cracked = int(np.argmax(jumps >= floor))
    below = np.flatnonzero(jumps[first_cracked:] < floor)
    if below.size == 0:
        raise NoDiscontinuityFoundError(
            "opening jump never falls below the noise floor inside the "
            "field; the tip is not in view")
    tip_idx = first_cracked + int(below[0])
    along_tip = rows[tip_idx][0]
    cross_tip = rows[tip_idx - 1][2]
    ax, ay = axis
    if ax == 0:
        position = (cross_tip, along_tip)
    else:
        position = (along_tip, cross_tip)
    return CrackTip(position=position, axis=(float(ax), float(ay)))


def ctod(disp: DisplacementField, tip: CrackTip,
         cross_offset: float = 2.0,
         plateau_fraction: float = 0.05) -> Tuple[float, Tuple]:
    """Crack-tip opening displacement via reference-point pairs.

    Samples the opening (perpendicular displacement difference between
    points straddling the crack) at increasing distance behind the tip;
    the opening-vs-distance slope falling below ``plateau_fraction`` of
    its peak for 3 consecutive candidates marks the end of the
    strip-yield zone, and that pair's opening is the CTOD.
    ``cross_offset`` is each point's distance from the crack plane in
    grid spacings.

    Returns (ctod, (point_minus, point_plus)) for the selected pair.

    Raises:
        NoPlateauError: the opening keeps growing within the field.
    """
    grid = disp.grid
    s = float(grid.spacing)
    e1 = np.array(tip.axis)
    e2 = np.array([-tip.axis[1], tip.axis[0]])
    tip_p = np.array(tip.position)

    dists, openings, pairs = [], [], []
    k = 1
    while True:
        d = k * s
        base = tip_p - d * e1
        p_plus = base + cross_offset * s * e2
        p_minus = base - cross_offset * s * e2
        du_p, ok1 = _interp_field_bilinear(grid, disp.u, disp.valid,
                                           np.array([p_plus[0]]),
                                           np.array([p_plus[1]]))
        dv_p, ok2 = _interp_field_bilinear(grid, disp.v, disp.valid,
                                           np.array([p_plus[0]]),
                                           np.array([p_plus[1]]))
        du_m, ok3 = _interp_field_bilinear(grid, disp.u, disp.valid,
                                           np.array([p_minus[0]]),
                                           np.array([p_minus[1]]))
        dv_m, ok4 = _interp_field_bilinear(grid, disp.v, disp.valid,
                                           np.array([p_minus[0]]),
                                           np.array([p_minus[1]]))
        if not (ok1[0] and ok2[0] and ok3[0] and ok4[0]):
            break
        rel = np.array([du_p[0] - du_m[0], dv_p[0] - dv_m[0]])
        dists.append(d)
        openings.append(abs(float(rel @ e2)))
        pairs.append((tuple(p_minus), tuple(p_plus)))
        k += 1

    if len(openings) < 4:
        raise NoPlateauError(
            f"only {len(openings)} reference pairs fit behind the tip")
    slopes = np.diff(openings)
    peak = max(float(slopes.max(initial=0.0)), 0.0)
    thr = plateau_fraction * peak
    for i in range(len(slopes) - 2):
        window = slopes[i:i + 3]
        if np.all(np.abs(window) <= thr):
            # slopes[i] is the step from pair i to i+1; the plateau
            # begins at pair i
            return openings[i], pairs[i]
    raise NoPlateauError(
        "opening keeps growing behind the tip; no stable plateau found")


# ----------------------------------------------------------------------
# mode-I stress intensity fit


DEFAULT_ANNULUS = (5.0, 20.0)  # grid spacings


def _mode_i_design(lx: np.ndarray, ly: np.ndarray, dx: np.ndarray,
                   dy: np.ndarray, axis: Tuple[float, float],
                   mat: MaterialElastic):
    """Columns of the linear model for (K_I, u_x0, u_y0, theta_0): the
    crack-term shape functions in the global frame plus rigid motion
    about the tip."""
    ax, ay = axis
    r = np.hypot(lx, ly)
    th = np.arctan2(ly, lx)
    amp = np.sqrt(r / (2.0 * np.pi)) / (2.0 * mat.mu)
    c, s = np.cos(th / 2.0), np.sin(th / 2.0)
    k = mat.kappa
    gu_loc = amp * c * (k - 1.0 + 2.0 * s * s)
    gv_loc = amp * s * (k + 1.0 - 2.0 * c * c)
    gu = ax * gu_loc - ay * gv_loc
    gv = ay * gu_loc + ax * gv_loc
    n = lx.size
    a_u = np.column_stack([gu, np.ones(n), np.zeros(n), -dy])
    a_v = np.column_stack([gv, np.zeros(n), np.ones(n), dx])
    return np.vstack([a_u, a_v])


def sif_fit(disp: DisplacementField, tip: CrackTip, mat: MaterialElastic,
            annulus: Tuple[float, float] = DEFAULT_ANNULUS
            ) -> Tuple[float, float, float, float]:
    """Mode-I stress intensity factor by linear least squares on the
    near-tip displacement field.

    Fits (K_I, u_x0, u_y0, theta_0) — the crack-opening amplitude plus
    rigid translation and rotation (about the tip) — over all valid
    points whose tip distance lies inside the annulus (bounds in grid
    spacings). Rigid motion added to the field is absorbed exactly by
    the last three parameters.

    Raises:
        TooFewPointsError: fewer than 20 valid annulus points.
        RankDeficientError: the design matrix loses rank.
    """
    grid = disp.grid
    s = float(grid.spacing)
    r_min, r_max = annulus
    if not 0 < r_min < r_max:
        raise ValueError(f"annulus must satisfy 0 < r_min < r_max, got "
                         f"({r_min}, {r_max})")
    dx = grid.px.astype(float) - tip.position[0]
    dy = grid.py.astype(float) - tip.position[1]
    ax, ay = tip.axis
    lx = ax * dx + ay * dy
    ly = -ay * dx + ax * dy
    r = np.hypot(lx, ly)
    sel = disp.valid & (r >= r_min * s) & (r <= r_max * s)
    n = int(sel.sum())
    if n < 20:
        raise TooFewPointsError(
            f"only {n} valid points in the annulus; need >= 20")
    a = _mode_i_design(lx[sel], ly[sel], dx[sel], dy[sel], tip.axis, mat)
    rhs = np.concatenate([disp.u[sel], disp.v[sel]])
    coef, _, rank, _ = np.linalg.lstsq(a, rhs, rcond=None)
    if rank < 4:
        raise RankDeficientError(
            f"stress-intensity design matrix rank {rank} < 4")
    k1, ux0, uy0, th0 = (float(v) for v in coef)
    return k1, ux0, uy0, th0


# ----------------------------------------------------------------------
# domain J-integral


@dataclass(frozen=True)
class StressField:
    """Per-node plane stress state and strain energy density, for cases
    where stress comes from an external constitutive evaluation."""

    s_xx: np.ndarray
    s_yy: np.ndarray
    s_xy: np.ndarray
    W: np.ndarray
    valid: np.ndarray


@dataclass(frozen=True)
class JIntegralDomain:
    """Weight function for the area-form J-integral: 1 on and inside
    the inner rectangular ring around the tip, 0 on and outside the
    outer ring, linear ramp between."""

    tip: CrackTip
    r_inner: float
    r_outer: float
    q1: np.ndarray

    @classmethod
    def build(cls, grid, tip: CrackTip, r_inner: float, r_outer: float
              ) -> "JIntegralDomain":
        """Ring radii are half-widths in pixels of the square rings
        centered on the tip."""
        if not 0 < r_inner < r_outer:
            raise ValueError(
                f"rings must satisfy 0 < r_inner < r_outer, got "
                f"({r_inner}, {r_outer})")
        dx = np.abs(grid.px.astype(float) - tip.position[0])
        dy = np.abs(grid.py.astype(float) - tip.position[1])
        cheb = np.maximum(dx, dy)
        q1 = np.clip(1.0 - (cheb - r_inner) / (r_outer - r_inner), 0.0, 1.0)
        return cls(tip=tip, r_inner=float(r_inner), r_outer=float(r_outer),
                   q1=q1)


def elastic_stress_field(strain: StrainField, mat: MaterialElastic
                         ) -> StressField:
    """Plane stress state from a measured strain field under linear
    elasticity, with the elastic energy density 0.5 * sigma : eps."""
    lame, mu = mat.plane_stiffness()
    tr = strain.e_xx + strain.e_yy
    s_xx = lame * tr + 2.0 * mu * strain.e_xx
    s_yy = lame * tr + 2.0 * mu * strain.e_yy
    s_xy = 2.0 * mu * strain.e_xy
    w = 0.5 * (s_xx * strain.e_xx + s_yy * strain.e_yy
               + 2.0 * s_xy * strain.e_xy)
    return StressField(s_xx=s_xx, s_yy=s_yy, s_xy=s_xy, W=w,
                       valid=strain.valid.copy())


def _directional_diff(arr: np.ndarray, axis_vec: Tuple[int, int],
                      spacing: float) -> np.ndarray:
    """Central difference of a grid field along a grid-aligned
    direction (one-sided at the edges)."""
    ax, ay = axis_vec
    out = np.empty_like(arr)
    if ax == 0:  # derivative along y rows
        out[1:-1, :] = (arr[2:, :] - arr[:-2, :]) / (2.0 * spacing)
        out[0, :] = (arr[1, :] - arr[0, :]) / spacing
        out[-1, :] = (arr[-1, :] - arr[-2, :]) / spacing
        return out * ay
    out[:, 1:-1] = (arr[:, 2:] - arr[:, :-2]) / (2.0 * spacing)
    out[:, 0] = (arr[:, 1] - arr[:, 0]) / spacing
    out[:, -1] = (arr[:, -1] - arr[:, -2]) / spacing
    return out * ax


def j_integral(disp: DisplacementField, strain: Optional[StrainField],
               stress: Union[MaterialElastic, StressField],
               domain: JIntegralDomain) -> float:
    """Energy release rate by the area (domain) form of the J-integral.

    Integrand: [sigma_ij u_{j,1} - W delta_{1i}] q_{,i} over the ramp
    band of the weight function, where direction 1 is the crack axis.
    Displacement is differentiated only along the crack direction, so
    the stencils never cross the crack faces; q and u derivatives use
    central differences on the grid. ``stress`` is either elastic
    constants (stress computed from ``strain``) or a precomputed
    per-node stress/energy field.

    Raises:
        DomainIntersectsInvalidPointsError: an invalid node carries
            weight-gradient support.
        ValueError: the crack axis is not grid-aligned.
    """
    axis = _axis_aligned(domain.tip.axis)
    grid = disp.grid
    s = float(grid.spacing)
    if isinstance(stress, MaterialElastic):
        if strain is None:
            raise ValueError(
                "strain field required when stress comes from elastic "
                "constants")
        sf = elastic_stress_field(strain, stress)
    else:
        sf = stress

    dq_dy = np.empty_like(domain.q1)
    dq_dy[1:-1, :] = (domain.q1[2:, :] - domain.q1[:-2, :]) / (2.0 * s)
    dq_dy[0, :] = (domain.q1[1, :] - domain.q1[0, :]) / s
    dq_dy[-1, :] = (domain.q1[-1, :] - domain.q1[-2, :]) / s
    dq_dx = np.empty_like(domain.q1)
    dq_dx[:, 1:-1] = (domain.q1[:, 2:] - domain.q1[:, :-2]) / (2.0 * s)
    dq_dx[:, 0] = (domain.q1[:, 1] - domain.q1[:, 0]) / s
    dq_dx[:, -1] = (domain.q1[:, -1] - domain.q1[:, -2]) / s

    band = (np.abs(dq_dx) > 0) | (np.abs(dq_dy) > 0)
    support = band.copy()
    # displacement stencils reach one node beyond the band
    support[1:, :] |= band[:-1, :]
    support[:-1, :] |= band[1:, :]
    support[:, 1:] |= band[:, :-1]
    support[:, :-1] |= band[:, 1:]
    if np.any(support & ~(disp.valid & sf.valid)):
        n_bad = int(np.sum(support & ~(disp.valid & sf.valid)))
        raise DomainIntersectsInvalidPointsError(
            f"{n_bad} invalid node(s) inside the integration band")

    ax, ay = axis
    # local frame: e1 = crack axis, e2 = in-plane normal
    u1 = ax * disp.u + ay * disp.v
    u2 = -ay * disp.u + ax * disp.v
    # stress rotated into the local frame (for grid-aligned axes this
    # permutes/signs the components)
    s11 = (ax * ax * sf.s_xx + 2 * ax * ay * sf.s_xy + ay * ay * sf.s_yy)
    s22 = (ay * ay * sf.s_xx - 2 * ax * ay * sf.s_xy + ax * ax * sf.s_yy)
    s12 = ((ax * ax - ay * ay) * sf.s_xy + ax * ay * (sf.s_yy - sf.s_xx))
    # q1 gradient in the local frame
    dq_1 = ax * dq_dx + ay * dq_dy
    dq_2 = -ay * dq_dx + ax * dq_dy
    # displacement derivatives along the crack direction only
    du1_d1 = _directional_diff(u1, axis, s)
    du2_d1 = _directional_diff(u2, axis, s)

    integrand = ((s11 * du1_d1 + s12 * du2_d1) * dq_1
                 + (s12 * du1_d1 + s22 * du2_d1) * dq_2
                 - sf.W * dq_1)
    return float(np.sum(integrand[band]) * s * s)


# ----------------------------------------------------------------------
# strain-threshold masks


def _max_principal(strain: StrainField) -> np.ndarray:
    mean = 0.5 * (strain.e_xx + strain.e_yy)
    rad = np.sqrt((0.5 * (strain.e_xx - strain.e_yy)) ** 2
                  + strain.e_xy ** 2)
    return mean + rad


def efpz(strain: StrainField, threshold_ue: float = EFPZ_THRESHOLD_WARM_UE
         ) -> Tuple[np.ndarray, float]:
    """Process-zone estimate: mask of valid nodes whose maximum
    principal strain reaches the threshold (microstrain), plus its area
    (node count times grid-cell area, px^2)."""
    p1 = _max_principal(strain)
    mask = strain.valid & (p1 >= threshold_ue * 1e-6)
    cell = float(strain.grid.spacing) ** 2
    return mask, float(mask.sum()) * cell


def crack_map_threshold(strain: StrainField,
                        tx_ue: float = CRACK_XX_THRESHOLD_UE,
                        ty_ue: float = CRACK_YY_THRESHOLD_UE) -> np.ndarray:
    """Crack indicator map from component thresholds (microstrain).

    Flag bits: 1 where e_xx >= tx_ue (opening across a vertical crack),
    2 where e_yy >= ty_ue (interfacial/debonding indicator); 3 = both.
    """
    out = np.zeros(strain.grid.shape, dtype=np.uint8)
    vertical = strain.valid & (strain.e_xx >= tx_ue * 1e-6)
    interfacial = strain.valid & (strain.e_yy >= ty_ue * 1e-6)
    out[vertical] |= CRACK_VERTICAL
    out[interfacial] |= CRACK_INTERFACIAL
    return out


# ----------------------------------------------------------------------
# crack-growth law


@dataclass(frozen=True)
class ParisFit:
    """Power-law crack-growth fit da/dN = A * (dK)^n."""

    A: float
    n: float
    r2: float


def paris_fit(crack_length, cycles, dK) -> ParisFit:
    """Fit the growth-law parameters from crack length vs cycles.

    Growth rates come from central differences of a(N); the regression
    is linear in log-log space. Non-positive rates are excluded.

    Raises:
        NonPositiveDeltaKError: any dK <= 0.
        NonPositiveRateError: fewer than 3 positive-rate samples.
        NonMonotonicTimeError: cycles not strictly increasing.
    """
    a = np.asarray(crack_length, dtype=float)
    N = np.asarray(cycles, dtype=float)
    dK = np.asarray(dK, dtype=float)
    if not (a.shape == N.shape == dK.shape) or a.ndim != 1:
        raise MismatchedSeriesError("crack_length, cycles, dK must be "
                                    "aligned 1D series")
    if np.any(np.diff(N) <= 0):
        raise NonMonotonicTimeError("cycles must be strictly increasing")
    if np.any(dK <= 0):
        raise NonPositiveDeltaKError("all dK values must be positive")
    if a.size < 3:
        raise NonPositiveRateError(
            f"need >= 3 samples for central-difference rates, got {a.size}")
    rate = (a[2:] - a[:-2]) / (N[2:] - N[:-2])
    dk_mid = dK[1:-1]
    keep = rate > 0
    if keep.sum() < 3:
        raise NonPositiveRateError(
            f"only {int(keep.sum())} positive growth-rate samples; need >= 3")
    x = np.log(dk_mid[keep])
    y = np.log(rate[keep])
    n_exp, log_a = np.polyfit(x, y, 1)
    pred = log_a + n_exp * x
    ss_res = float(np.sum((y - pred) ** 2))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    return ParisFit(A=float(np.exp(log_a)), n=float(n_exp), r2=r2)
