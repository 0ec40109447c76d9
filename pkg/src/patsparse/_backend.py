"""Backend selection for the hot kernels.

Set ``PATSPARSE_BACKEND=numpy`` to force the pure-numpy fallback. The default
is ``numba`` when it imports, otherwise numpy.
"""
import os

_requested = os.environ.get("PATSPARSE_BACKEND", "numba").strip().lower()
if _requested not in ("numba", "numpy"):
    raise ValueError(f"PATSPARSE_BACKEND must be 'numba' or 'numpy', got {_requested!r}")

try:
    import numba
except ImportError:  # pragma: no cover
    numba = None

USE_NUMBA = _requested == "numba" and numba is not None
BACKEND = "numba" if USE_NUMBA else "numpy"


def njit(*args, **kwargs):
    """``numba.njit`` with caching on; identity decorator when numba is unavailable."""
    kwargs.setdefault("cache", True)
    if numba is None:
        if args and callable(args[0]):
            return args[0]
        return lambda f: f
    return numba.njit(*args, **kwargs)
