"""Integral solution operators for the Cauchy-Riemann equation on product domains."""

import os

import numba

# the bundled TBB is too old for numba; pick a layer explicitly unless the user did
if "NUMBA_THREADING_LAYER" not in os.environ:
    numba.config.THREADING_LAYER = "omp"

__version__ = "0.1.0"
