"""Exception types raised by the measurement engine.

Every error carries a human-readable message; analysis drivers catch
:class:`DicError` to distinguish measurement failures from bugs.
"""


class DicError(Exception):
    """Base class for all engine errors."""


# --- image loading / interpolation ---

class UnreadableFileError(DicError):
    """File missing, truncated, or not a decodable image/volume."""


class UnsupportedBitDepthError(DicError):
    """Pixel format other than 8/16-bit gray or RGB."""


class TooSmallError(DicError):
    """Image or volume below the minimum usable size."""


class OutOfDomainError(DicError):
    """Subpixel query outside the interpolable region."""


class NonInvertibleWarpError(DicError):
    """Synthetic warp is not one-to-one on the image domain."""


# --- speckle QA ---

class DensityUnreachableError(DicError):
    """Granule placement could not reach the target coverage."""


class SubsetOutOfBoundsError(DicError):
    """Requested subset window extends past the image."""


class NoAdequateSubsetError(DicError):
    """No subset size in the scanned range meets the quality threshold."""


# --- subset matching ---

class ZeroVarianceSubsetError(DicError):
    """Subset has no intensity variation; zero-normalized criteria undefined."""


class WarpOutOfDomainError(DicError):
    """Warped subset leaves the deformed image's interpolable region."""


class OutOfRangeError(DicError):
    """Scalar argument outside its documented valid range."""


class SearchWindowOutOfBoundsError(DicError):
    """Integer search window extends past the deformed image."""


class SingularHessianError(DicError):
    """Gauss-Newton normal matrix is numerically singular."""


class DivergedOutOfDomainError(DicError):
    """Iterative refinement stepped outside the interpolable region."""


class SeedFailedError(DicError):
    """A seed point failed to correlate above the validity floor."""


class EmptyROIError(DicError):
    """Region of interest contains no usable grid points."""


class InsufficientSupportError(DicError):
    """Too few valid samples to support a local least-squares fit."""


# --- stereo ---

class BehindCameraError(DicError):
    """3D point has non-positive depth in the camera frame."""


class NoConvergenceError(DicError):
    """Fixed-point iteration failed to converge."""


class DegenerateGeometryError(DicError):
    """Triangulation rays are (near-)parallel; no stable intersection."""


class DegenerateTriangleError(DicError):
    """Reference triangle has (near-)zero area."""


# --- mechanics post-processing ---

class NonMonotonicTimeError(DicError):
    """Time samples are not strictly increasing."""


class MismatchedSeriesError(DicError):
    """Paired series have different lengths."""


class NoDiscontinuityFoundError(DicError):
    """No opening jump above the noise floor anywhere in the field."""


class NoPlateauError(DicError):
    """Opening-versus-distance curve never stabilizes."""


class RankDeficientError(DicError):
    """Regression design matrix is rank deficient."""


class TooFewPointsError(DicError):
    """Not enough valid field points for the requested fit."""


class DomainIntersectsInvalidPointsError(DicError):
    """Integration domain touches invalid field points."""


class NonPositiveRateError(DicError):
    """Too few positive crack growth rates to fit."""


class NonPositiveDeltaKError(DicError):
    """Stress intensity amplitude must be positive."""


# --- volume correlation ---

class ZeroVarianceSubvolumeError(DicError):
    """Subvolume has no intensity variation."""


class DivergedError(DicError):
    """Volume subset refinement diverged."""


# --- rendering ---

class EmptyFieldError(DicError):
    """Field has no valid points to render."""
