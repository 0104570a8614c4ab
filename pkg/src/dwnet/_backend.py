"""Select the kernel implementation.

Set ``DWNET_DISABLE_NUMBA=1`` to force the pure-numpy path. The numba path is
used by default whenever numba imports cleanly.
"""
import os

from . import _kernels_numpy

_TRUTHY = {"1", "true", "yes", "on"}


def numba_available():
    try:
        import numba  # noqa: F401
    except ImportError:
        return False
    return True


def numba_disabled():
    return os.environ.get("DWNET_DISABLE_NUMBA", "").strip().lower() in _TRUTHY


def get_kernels(name=None):
    """Return the kernel module called `name` ('numba' or 'numpy')."""
    if name is None:
        name = "numpy" if numba_disabled() or not numba_available() else "numba"
    if name == "numpy":
        return _kernels_numpy
    if name == "numba":
        from . import _kernels_numba
        return _kernels_numba
    raise ValueError(f"unknown backend {name!r}")


kernels = get_kernels()
BACKEND = kernels.NAME
