"""Pick the compiled kernels when importable, else the numpy fallback.

Set ``RELOCREG_PURE_PYTHON=1`` to force the fallback.
"""
import logging
import os

from . import _kernels_py

log = logging.getLogger(__name__)

kernels = _kernels_py
BACKEND = "python"

if os.environ.get("RELOCREG_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _compiled
    except ImportError:  # extension not built
        log.debug("compiled kernels unavailable, using numpy fallback")
    else:
        kernels = _compiled
        BACKEND = "cython"
