"""Kernel backend selection: compiled extension if present, numpy otherwise.

Set CPDEFORM_BACKEND=numpy or CPDEFORM_BACKEND=compiled to force a choice;
forcing `compiled` raises if the extension was not built.
"""

from __future__ import annotations

import os

from . import _kernels_py

_FORCE = os.environ.get("CPDEFORM_BACKEND", "").strip().lower()

if _FORCE == "numpy":
    _impl = _kernels_py
elif _FORCE == "compiled":
    from . import _kernels as _impl  # noqa: F401  (ImportError is the answer)
else:
    try:
        from . import _kernels as _impl
    except ImportError:
        _impl = _kernels_py


def backend_name() -> str:
    return _impl.BACKEND_NAME


def get_backend(name: str | None = None):
    """Return a kernel module by name (None = the active default)."""
    if name is None:
        return _impl
    if name == "numpy":
        return _kernels_py
    if name == "compiled":
        from . import _kernels
        return _kernels
    raise ValueError(f"unknown backend {name!r}")


substep = _impl.substep
substep_grad = _impl.substep_grad
