"""Skeletal 3D-Gaussian avatars: deformation, pose-adjusted supervision and a CPU splatting renderer."""

import os

import numba

# prefer OpenMP / the built-in workqueue; an old system TBB only produces a warning
if "NUMBA_THREADING_LAYER" not in os.environ:
    numba.config.THREADING_LAYER_PRIORITY = ["omp", "workqueue", "tbb"]

__version__ = "0.1.0"
