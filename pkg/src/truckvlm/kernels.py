"""Kernel dispatch: compiled extension when available, numpy fallback otherwise.

Set ``TRUCKVLM_PURE_PYTHON=1`` to force the fallback.
"""

import logging
import os

from . import _kernels_py

logger = logging.getLogger(__name__)

_compiled = None
if os.environ.get("TRUCKVLM_PURE_PYTHON") != "1":
    try:
        from . import _kernels as _compiled
    except ImportError:  # extension not built
        _compiled = None

_impl = _compiled if _compiled is not None else _kernels_py
BACKEND = "cython" if _compiled is not None else "python"
logger.debug("kernel backend: %s", BACKEND)

dbscan_expand = _impl.dbscan_expand
erode = _impl.erode
dilate = _impl.dilate
hungarian = _impl.hungarian


def implementations():
    """Return ``{name: module}`` for every importable kernel implementation."""
    impls = {"python": _kernels_py}
    if _compiled is not None:
        impls["cython"] = _compiled
    return impls
