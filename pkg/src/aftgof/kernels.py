"""Backend selection for the hot pairwise kernels.

The compiled extension is used when it imports; set ``AFTGOF_PURE_PYTHON=1``
to force the numpy fallback.
"""

import os

from . import _pykernels

BACKEND = "python"
smoothed_score_jac = _pykernels.smoothed_score_jac

if os.environ.get("AFTGOF_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels
    except ImportError:  # extension not built
        pass
    else:
        BACKEND = "cython"
        smoothed_score_jac = _ckernels.smoothed_score_jac

__all__ = ["BACKEND", "smoothed_score_jac"]
