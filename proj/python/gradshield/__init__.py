"""Gradient-norm regularized training, adversarial attacks and robustness certificates.

Arrays are float64 numpy arrays. Batches are [B, input...]; model inputs
are expected in [0, 1].
"""

from ._gradshield import *  # noqa: F401,F403
from ._gradshield import __version__  # noqa: F401
