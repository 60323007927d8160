"""SGD hot-loop kernels with backend selection at import time.

The compiled Cython backend is used when available; the pure-numpy
fallback otherwise.  FED_ENERGY_SIM_BACKEND={auto,cython,python} forces
the choice (``cython`` raises if the extension is missing).  Both
backends implement the same step semantics; see `_python.py`.
"""

from __future__ import annotations

import os

from . import _python

_choice = os.environ.get("FED_ENERGY_SIM_BACKEND", "auto").lower()
if _choice not in ("auto", "cython", "python"):
    raise ImportError(
        f"FED_ENERGY_SIM_BACKEND must be auto, cython or python, got {_choice!r}"
    )

if _choice == "python":
    _impl = _python
else:
    try:
        from . import _speedups as _impl  # type: ignore[no-redef]
    except ImportError:
        if _choice == "cython":
            raise ImportError(
                "compiled kernels requested via FED_ENERGY_SIM_BACKEND=cython "
                "but the extension is not built"
            ) from None
        _impl = _python

BACKEND: str = _impl.BACKEND_NAME

sgd_quadratic = _impl.sgd_quadratic
sgd_logistic = _impl.sgd_logistic

__all__ = ["BACKEND", "sgd_quadratic", "sgd_logistic"]
