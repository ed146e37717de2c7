# Numba if available and not disabled; otherwise the same kernels run as plain Python.
# Set ALPNET_DISABLE_NUMBA=1 before import to force the fallback path.

import logging
import os

logger = logging.getLogger(__name__)

_DISABLED = os.environ.get("ALPNET_DISABLE_NUMBA", "").strip().lower() in ("1", "true", "yes")

NUMBA_ENABLED = False

if not _DISABLED:
    try:
        import numba

        njit = numba.njit
        NUMBA_ENABLED = True
    except ImportError:
        logger.warning("numba not importable, falling back to pure-python kernels")

if not NUMBA_ENABLED:

    def njit(pyfunc=None, **kwargs):
        """No-op stand-in for ``numba.njit``."""

        def wrap(func):
            func.py_func = func
            return func

        return wrap if pyfunc is None else wrap(pyfunc)
