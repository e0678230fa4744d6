"""Kernel backend selection.

The hot loops (winding numbers, periodic series, zipper chains) exist twice:
a Cython extension ``hedgehog._kernels`` and a pure-numpy fallback
``hedgehog._kernels_py``.  The compiled one is preferred when importable;
set ``HEDGEHOG_PURE_PYTHON=1`` to force the fallback (used by the test suite
and the benchmark to compare both).
"""

import os

if os.environ.get("HEDGEHOG_PURE_PYTHON"):
    from . import _kernels_py as impl
else:
    try:
        from . import _kernels as impl  # type: ignore[attr-defined]
    except ImportError:
        from . import _kernels_py as impl

BACKEND = impl.BACKEND

winding_number = impl.winding_number
segment_distance = impl.segment_distance
periodic_series = impl.periodic_series
power_series = impl.power_series
zipper_forward = impl.zipper_forward
zipper_inverse = impl.zipper_inverse
