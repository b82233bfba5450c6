"""Kernel backend selection.

The compiled Cython extension (`_ckern`) is preferred; the pure-Python
twin (`pykern`) is used when the extension is missing or when the
environment variable ``NLMEFIT_PURE_PYTHON=1`` forces it.  Both expose the
same functions and produce the same step sequences.
"""

from __future__ import annotations

import os


def load_backend(name: str):
    """Return a backend module by name ('compiled' or 'python')."""
    if name == "python":
        from . import pykern
        return pykern
    if name == "compiled":
        from . import _ckern  # type: ignore[attr-defined]
        return _ckern
    raise ValueError(f"unknown backend {name!r}")


if os.environ.get("NLMEFIT_PURE_PYTHON", "") not in ("", "0"):
    from . import pykern as _backend
else:
    try:
        from . import _ckern as _backend  # type: ignore[attr-defined]
    except ImportError:
        from . import pykern as _backend

BACKEND = _backend.NAME

STATUS_OK = _backend.STATUS_OK
STATUS_HIST_FULL = _backend.STATUS_HIST_FULL
STATUS_UNDERFLOW = _backend.STATUS_UNDERFLOW
STATUS_NONFINITE = _backend.STATUS_NONFINITE
STATUS_MAXSTEPS = _backend.STATUS_MAXSTEPS

eval_program = _backend.eval_program
eval_program_batch = _backend.eval_program_batch
solve_dp5 = _backend.solve_dp5
em_path = _backend.em_path
