"""Numba acceleration switch.

Hot kernels in :mod:`retinareg.kernels` exist in two flavours: a numba
``@njit`` build and a pure-numpy fallback.  The active flavour is chosen by
the ``RETINAREG_NUMBA`` environment variable, read once at import:

    RETINAREG_NUMBA=0|off|false|no   force the numpy fallback
    RETINAREG_NUMBA=1|on|require     require numba (ImportError if missing)
    unset / auto                     use numba when importable

``set_enabled`` flips the dispatch at runtime; tests and the kernel
benchmark use it to exercise both paths in one process.
"""

import os

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    numba = None
    HAVE_NUMBA = False

_FLAG = os.environ.get("RETINAREG_NUMBA", "auto").strip().lower()

if _FLAG in ("0", "off", "false", "no"):
    _enabled = False
elif _FLAG in ("1", "on", "require", "true", "yes"):
    if not HAVE_NUMBA:
        raise ImportError("RETINAREG_NUMBA requires numba, which is not installed")
    _enabled = True
else:
    _enabled = HAVE_NUMBA


def enabled() -> bool:
    """True when dispatchers should call the numba builds."""
    return _enabled


def set_enabled(value: bool) -> None:
    if value and not HAVE_NUMBA:
        raise ImportError("numba is not installed")
    global _enabled
    _enabled = bool(value)


def njit(func):
    """Compile ``func`` with the project-wide numba settings."""
    return numba.njit(cache=True)(func)
