"""Kernel backend selection.

The compiled extension is used when importable; set ``ODC_PURE_PYTHON=1``
to force the numpy fallback.
"""

import os

from . import _kernels_py

if os.environ.get("ODC_PURE_PYTHON", "") not in ("", "0"):
    _impl = _kernels_py
    BACKEND = "python"
else:
    try:
        from . import _kernels as _impl  # type: ignore[attr-defined]

        BACKEND = "cython"
    except ImportError:
        _impl = _kernels_py
        BACKEND = "python"

INVERSE_POWER = _kernels_py.INVERSE_POWER
LOG = _kernels_py.LOG

nearest_neighbors = _impl.nearest_neighbors
min_pairwise_distance = _impl.min_pairwise_distance
pair_potential = _impl.pair_potential
pair_potential_vjp = _impl.pair_potential_vjp
linear_sum_assignment = _impl.linear_sum_assignment

__all__ = [
    "BACKEND",
    "INVERSE_POWER",
    "LOG",
    "nearest_neighbors",
    "min_pairwise_distance",
    "pair_potential",
    "pair_potential_vjp",
    "linear_sum_assignment",
]
