"""Kernel backend selection.

The compiled extension is used when it imports; ``CERNN_BACKEND=python``
forces the numpy fallback.
"""
import os

from . import _kernels_py

kernels = _kernels_py
if os.environ.get("CERNN_BACKEND", "").lower() != "python":
    try:
        from . import _kernels as kernels  # noqa: F811
    except ImportError:
        kernels = _kernels_py


def available():
    """Names of the kernel backends importable in this environment."""
    names = ["python"]
    try:
        from . import _kernels  # noqa: F401
    except ImportError:
        pass
    else:
        names.insert(0, "compiled")
    return names


def get(name=None):
    if name is None:
        return kernels
    if name == "python":
        return _kernels_py
    if name == "compiled":
        from . import _kernels

        return _kernels
    raise ValueError("unknown kernel backend %r" % name)
