"""Backend selection for the hot kernels.

The compiled extension is used when it imports; otherwise, or when the
``TRENDCAST_PURE_PYTHON`` environment variable is set to a non-empty value,
the numpy fallback is used. :func:`set_backend` switches at runtime (used by
the benchmark and the backend-parity tests).
"""

import os

from . import _kernels_py
from .errors import InvalidArgumentError

try:
    from . import _kernels as _kernels_c
except ImportError:  # extension not built
    _kernels_c = None

_BACKENDS = {"python": _kernels_py}
if _kernels_c is not None:
    _BACKENDS["cython"] = _kernels_c

BACKEND = "python" if os.environ.get("TRENDCAST_PURE_PYTHON") or _kernels_c is None else "cython"
_impl = _BACKENDS[BACKEND]


def available_backends():
    return sorted(_BACKENDS)


def set_backend(name):
    global BACKEND, _impl
    if name not in _BACKENDS:
        raise InvalidArgumentError(f"kernel backend {name!r} not available; have {available_backends()}")
    BACKEND = name
    _impl = _BACKENDS[name]


def get_backend(name=None):
    """Return the module implementing ``name`` (default: the active backend)."""
    return _impl if name is None else _BACKENDS[name]


def lstm_pointwise_forward(z, c_prev):
    return _impl.lstm_pointwise_forward(z, c_prev)


def lstm_pointwise_backward(dh, dc, gates, c_prev, tanh_c):
    return _impl.lstm_pointwise_backward(dh, dc, gates, c_prev, tanh_c)


def ses_sse(y, alphas):
    return _impl.ses_sse(y, alphas)
