"""Few-shot estimation of household daily-profile distributions.

A shared spherical GMM is tuned on a handful of daily profiles for a few EM
steps, then a set-transformer encoder predicts a shift of the component means
and standard deviations that moves the early-stopped mixture towards the
household's full-data distribution.
"""

__version__ = "0.1.0"

from .errors import DataError, FewShotError, FormatError, NumericError  # noqa: E402
from .gmm import SphericalGmm, fixed_weights, z_schedule  # noqa: E402

__all__ = ["DataError", "FewShotError", "FormatError", "NumericError", "SphericalGmm",
           "fixed_weights", "z_schedule", "__version__"]
