"""Numba availability and backend selection.

Set ``TTT4REC_NUMBA=0`` to force the pure-numpy kernels. ``TTT4REC_THREADS``
caps the number of numba worker threads.
"""
import os

# the bundled TBB is too old for numba; prefer OpenMP unless the caller chose
os.environ.setdefault("NUMBA_THREADING_LAYER", "omp")

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None

NUMBA_AVAILABLE = numba is not None


def _env_flag(name, default):
    raw = os.environ.get(name)
    if raw is None:
        return default
    return raw.strip().lower() not in ("0", "false", "no", "off", "")


_use_numba = NUMBA_AVAILABLE and _env_flag("TTT4REC_NUMBA", True)


def use_numba():
    return _use_numba


def set_backend(name):
    """Select ``"numba"`` or ``"numpy"`` kernels at runtime. Returns the previous name."""
    global _use_numba
    previous = backend()
    if name == "numba":
        if not NUMBA_AVAILABLE:
            raise RuntimeError("numba is not installed")
        _use_numba = True
    elif name == "numpy":
        _use_numba = False
    else:
        raise ValueError(f"unknown backend {name!r}")
    return previous


def backend():
    return "numba" if _use_numba else "numpy"


def apply_thread_cap():
    raw = os.environ.get("TTT4REC_THREADS")
    if not raw or not NUMBA_AVAILABLE:
        return
    cap = max(1, int(raw))
    numba.set_num_threads(min(cap, numba.config.NUMBA_NUM_THREADS))


def njit(*args, **kwargs):
    """``numba.njit`` when numba is importable, identity otherwise."""
    kwargs.setdefault("cache", True)

    def wrap(func):
        if NUMBA_AVAILABLE:
            return numba.njit(**kwargs)(func)
        return func

    if len(args) == 1 and callable(args[0]):
        return wrap(args[0])
    return wrap


if NUMBA_AVAILABLE:
    prange = numba.prange
else:  # pragma: no cover
    prange = range
