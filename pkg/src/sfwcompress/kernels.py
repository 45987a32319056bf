"""Kernel backend selection.

The compiled extension ``_kernels_c`` is used when it was built; otherwise,
or when ``SFWCOMPRESS_BACKEND=python`` is set, the numpy fallback is used.
Both expose ``jacobi_sweeps`` and ``ksupport_norm_sorted``.
"""
import os

from . import _kernels_py

if os.environ.get("SFWCOMPRESS_BACKEND", "").lower() == "python":
    _impl = _kernels_py
else:
    try:
        from . import _kernels_c as _impl
    except ImportError:  # extension not built
        _impl = _kernels_py

BACKEND = _impl.NAME
jacobi_sweeps = _impl.jacobi_sweeps
ksupport_norm_sorted = _impl.ksupport_norm_sorted


def available_backends():
    """Map backend name -> kernel module, for benchmarks and cross-checks."""
    out = {"python": _kernels_py}
    try:
        from . import _kernels_c

        out["cython"] = _kernels_c
    except ImportError:
        pass
    return out
