"""Kernel backend selection.

The compiled ``_kernels`` extension is used when it imports; otherwise the
numpy versions in ``_kernels_py`` are used.  Set ``EGOPOINT_PURE_PYTHON=1``
to force the fallback.
"""

import os

from . import _kernels_py

if os.environ.get("EGOPOINT_PURE_PYTHON", "") not in ("", "0"):
    _impl = _kernels_py
else:
    try:
        from . import _kernels as _impl
    except ImportError:  # extension not built
        _impl = _kernels_py

BACKEND = _impl.BACKEND
reprojection_errors = _impl.reprojection_errors
score_candidates = _impl.score_candidates
pairwise_sampson = _impl.pairwise_sampson
huber_system = _impl.huber_system
