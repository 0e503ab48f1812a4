"""Selects the cascade kernel at import time.

The compiled extension is preferred; set ``CDNET_PURE_PYTHON=1`` to force
the numpy fallback.  ``BACKEND`` names the one in use.
"""

import os

from . import _cascade_py

fallback = _cascade_py

if os.environ.get("CDNET_PURE_PYTHON", "") not in ("", "0"):
    compiled = None
else:
    try:
        from . import _cascade as compiled
    except ImportError:
        compiled = None

_active = compiled if compiled is not None else fallback
BACKEND = "compiled" if compiled is not None else "python"


def get(backend: str | None = None, dtype=None):
    """Kernel module for ``backend`` ('compiled', 'python' or None = default).

    float32 work always goes to the fallback; the extension is float64 only.
    """
    if backend == "python" or (dtype is not None and dtype != "float64" and str(dtype) != "float64"):
        return fallback
    if backend == "compiled":
        if compiled is None:
            raise ImportError("compiled cascade kernel is not built")
        return compiled
    return _active


cascade_forward = _active.cascade_forward
cascade_backward = _active.cascade_backward
