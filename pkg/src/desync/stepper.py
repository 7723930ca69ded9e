"""Backend selection for the oracle's stepping loop.

The compiled extension is used when it was built; otherwise the pure-Python
loop is used. Both can be requested by name for comparisons.
"""
from __future__ import annotations

from . import _stepper_py

try:
    from . import _stepper as _compiled
except ImportError:  # extension not built
    _compiled = None

BACKENDS = ("compiled", "python") if _compiled is not None else ("python",)
DEFAULT = BACKENDS[0]


def get(name: str = DEFAULT):
    """Return the ``advance`` function of backend ``name``."""
    if name == "compiled":
        if _compiled is None:
            raise ImportError("compiled stepper not available; rebuild the package")
        return _compiled.advance
    if name == "python":
        return _stepper_py.advance
    raise ValueError(f"unknown stepper backend {name!r}")


def compiled_available() -> bool:
    return _compiled is not None
