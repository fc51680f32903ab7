"""Kernel backend selection.

The compiled extension is preferred; setting the environment variable
``MLFACTOR_PURE_PYTHON=1`` forces the numpy fallback.
"""
import os

from . import _kernels_py

BACKEND = "python"
segment_gram = _kernels_py.segment_gram
segment_apply = _kernels_py.segment_apply

if not os.environ.get("MLFACTOR_PURE_PYTHON"):
    try:
        from . import _kernels
    except ImportError:  # extension not built
        pass
    else:
        BACKEND = "cython"
        segment_gram = _kernels.segment_gram
        segment_apply = _kernels.segment_apply
