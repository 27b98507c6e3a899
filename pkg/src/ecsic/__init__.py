"""Stereo image codec with epipolar cross attention.

Joint neural analysis/synthesis over rectified stereo pairs, a conditional
Laplace entropy model with cross-view context, and a byte-exact range coder
backend producing real bitstreams.
"""

__version__ = "0.1.0"

from .errors import CorruptStreamError, ModelMismatchError

__all__ = ["CorruptStreamError", "ModelMismatchError", "__version__"]
