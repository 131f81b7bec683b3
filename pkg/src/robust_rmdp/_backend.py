"""Kernel backend selection.

The compiled ``_kernels`` extension is used when importable; otherwise, or
when ``ROBUST_RMDP_PURE_PYTHON`` is set, the numpy fallback is used.
"""
import importlib
import os

from . import _kernels_py

BACKENDS = ("cython", "python")


def _load_compiled():
    try:
        return importlib.import_module("robust_rmdp._kernels")
    except ImportError:
        return None


_compiled = None if os.environ.get("ROBUST_RMDP_PURE_PYTHON") else _load_compiled()
kernels = _compiled or _kernels_py
_threads = 1


def get_kernels(name: str):
    """Return a specific backend module; raises if the compiled one is absent."""
    if name == "python":
        return _kernels_py
    if name == "cython":
        mod = _load_compiled()
        if mod is None:
            raise ImportError("compiled kernels are not built")
        return mod
    raise ValueError(f"unknown backend {name!r}")


def set_threads(n: int) -> None:
    """Cap worker threads used by the compiled kernels (results do not depend on it)."""
    global _threads
    _threads = max(1, int(n))


def threads() -> int:
    return _threads
