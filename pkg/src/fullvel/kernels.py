"""Backend selection for the hot kernels.

The compiled extension ``fullvel._kernels`` is used when it imports; the
numpy implementations in ``fullvel._pykernels`` are the fallback. Set
``FULLVEL_PURE_PYTHON=1`` to force the fallback.
"""

from __future__ import annotations

import os

from . import _pykernels
from ._pykernels import (  # noqa: F401
    FLOW_INVALID,
    FLOW_OK,
    FLOW_OUT_OF_BOUNDS,
    STATUS_DEGENERATE_DIRECTION,
    STATUS_ILL_CONDITIONED,
    STATUS_NONPOSITIVE_DEPTH,
    STATUS_OK,
)

_compiled = None
if os.environ.get("FULLVEL_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _compiled
    except ImportError:
        _compiled = None

_impl = _compiled if _compiled is not None else _pykernels
BACKEND = "cython" if _compiled is not None else "python"


def available_backends() -> dict:
    out = {"python": _pykernels}
    if _compiled is not None:
        out["cython"] = _compiled
    return out


def use_backend(name: str) -> str:
    """Switch the active backend; returns the previous name."""
    global _impl, BACKEND
    backends = available_backends()
    if name not in backends:
        raise ValueError(f"backend {name!r} is not available (have {sorted(backends)})")
    previous = BACKEND
    _impl, BACKEND = backends[name], name
    return previous


def solve_batch(*args, **kwargs):
    return _impl.solve_batch(*args, **kwargs)


def bilinear_flow(*args, **kwargs):
    return _impl.bilinear_flow(*args, **kwargs)


def raycast_boxes(*args, **kwargs):
    return _impl.raycast_boxes(*args, **kwargs)


def synthesize_flow(*args, **kwargs):
    return _impl.synthesize_flow(*args, **kwargs)
