"""Kernel backend selection.

The compiled extension is used when importable; set ``DYRA_PURE_PYTHON=1`` to
force the numpy fallback.
"""
import importlib
import os

from . import _kernels_py

if os.environ.get("DYRA_PURE_PYTHON"):
    kernels = _kernels_py
else:
    try:
        from . import _kernels as kernels
    except ImportError:
        kernels = _kernels_py

BACKEND = kernels.NAME


def load_backend(name):
    """Return the kernel module for ``"cython"`` or ``"python"``; ImportError if unavailable."""
    if name == "python":
        return _kernels_py
    if name == "cython":
        return importlib.import_module("dyra._kernels")
    raise ValueError(f"unknown backend {name!r}")
