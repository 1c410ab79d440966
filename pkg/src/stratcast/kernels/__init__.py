"""Backend selection for the hot loops.

``STRATCAST_BACKEND=numpy`` forces the pure-numpy path; otherwise the numba
kernels are used whenever numba imports cleanly.
"""
import logging
import os

from . import numpy_impl

log = logging.getLogger(__name__)

BACKEND = os.environ.get("STRATCAST_BACKEND", "numba").strip().lower()
if BACKEND not in ("numba", "numpy"):
    raise ImportError(f"STRATCAST_BACKEND must be 'numba' or 'numpy', got {BACKEND!r}")

if BACKEND == "numba":
    try:
        from . import numba_impl as _impl
    except ImportError:  # pragma: no cover - numba is a declared dependency
        log.warning("numba unavailable; falling back to numpy kernels")
        BACKEND = "numpy"
        _impl = numpy_impl
else:
    _impl = numpy_impl

simulate_region = _impl.simulate_region
convolve_delay = _impl.convolve_delay
nb_loglik = _impl.nb_loglik
spectral_radius = _impl.spectral_radius


def get_backend(name: str):
    """Kernel module by name, for side-by-side comparisons."""
    if name == "numpy":
        return numpy_impl
    if name == "numba":
        from . import numba_impl
        return numba_impl
    raise ValueError(name)


__all__ = ["BACKEND", "simulate_region", "convolve_delay", "nb_loglik",
           "spectral_radius", "get_backend"]
