"""dicfield: full-field deformation measurement.

Speckle-pattern quality assessment, subset-based planar image
correlation, stereo surface reconstruction, volumetric correlation, and
fracture-mechanics post-processing.
"""

__version__ = "0.1.0"

from . import (  # noqa: F401
    dvc,
    errors,
    image,
    mechanics,
    render,
    rgdic,
    speckle,
    stereo,
    strain,
    subset,
)
from .errors import DicError  # noqa: F401
from .image import (  # noqa: F401
    AnalyticWarp,
    GrayImage,
    Interpolator,
    load_image,
    save_image,
    synth_deform,
)
# the matching entry point itself stays at dicfield.rgdic.rgdic so the
# submodule name is not shadowed by the function
from .rgdic import (  # noqa: F401
    DisplacementField,
    RgdicOptions,
    ROIGrid,
    SeedPoint,
)
from .strain import StrainField, strain_field  # noqa: F401

__all__ = [
    "__version__",
    # submodules
    "dvc", "errors", "image", "mechanics", "render", "rgdic", "speckle",
    "stereo", "strain", "subset",
    # common entry points
    "DicError", "AnalyticWarp", "GrayImage", "Interpolator", "load_image",
    "save_image", "synth_deform", "DisplacementField", "RgdicOptions",
    "ROIGrid", "SeedPoint", "StrainField", "strain_field",
]
