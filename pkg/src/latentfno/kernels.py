"""Backend selection for the hot ODE kernel.

The compiled extension ``latentfno._kernels`` is used when importable;
otherwise (or when ``LATENTFNO_PURE_PYTHON=1``) the pure-Python module
``latentfno._kernels_py`` is used.  Both expose ``integrate``,
``integrate_batch`` and ``derivative`` with identical semantics.
"""

import importlib
import os

from . import _kernels_py


def load_backend(name: str):
    if name == "compiled":
        return importlib.import_module("latentfno._kernels")
    if name == "python":
        return _kernels_py
    raise ValueError(f"unknown kernel backend {name!r}")


def _select():
    if os.environ.get("LATENTFNO_PURE_PYTHON", "") not in ("", "0"):
        return "python", _kernels_py
    try:
        return "compiled", load_backend("compiled")
    except ImportError:
        return "python", _kernels_py


BACKEND, _impl = _select()

integrate = _impl.integrate
integrate_batch = _impl.integrate_batch
derivative = _impl.derivative
