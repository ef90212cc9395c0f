"""Selects the compiled inner loops when importable.

Set ``NEXUME_PURE_PYTHON=1`` to force the fallback.
"""

import os

from . import _pykernels

impl = _pykernels
NAME = "python"

if not os.environ.get("NEXUME_PURE_PYTHON"):
    try:
        from . import _ckernels
    except ImportError:
        pass
    else:
        impl = _ckernels
        NAME = "cython"


def available() -> dict:
    """Every importable backend, keyed by name."""
    found = {"python": _pykernels}
    try:
        from . import _ckernels
    except ImportError:
        pass
    else:
        found["cython"] = _ckernels
    return found
