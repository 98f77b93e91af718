"""Backend selection for the hot kernels.

Set MOE_LAB_BACKEND=numpy to force the pure-numpy path, or
MOE_LAB_BACKEND=numba to require the compiled path (import error if numba
is unavailable).  Default: numba when importable, numpy otherwise.
Both backends expose posterior_from_logits, mixture_pdf_grids, irls_loop
with identical semantics; see benchmarks/bench_kernels.py for a speed
comparison.
"""

from __future__ import annotations

import os

_requested = os.environ.get("MOE_LAB_BACKEND", "").strip().lower()
if _requested not in ("", "numba", "numpy"):
    raise ValueError(
        "MOE_LAB_BACKEND must be 'numba' or 'numpy', got %r" % _requested
    )

if _requested == "numpy":
    from . import _kernels_numpy as _impl

    BACKEND = "numpy"
elif _requested == "numba":
    from . import _kernels_numba as _impl

    BACKEND = "numba"
else:
    try:
        from . import _kernels_numba as _impl

        BACKEND = "numba"
    except ImportError:
        from . import _kernels_numpy as _impl

        BACKEND = "numpy"

ACT_LINEAR = _impl.ACT_LINEAR
ACT_SIGMOID = _impl.ACT_SIGMOID
ACT_GELU = _impl.ACT_GELU
ACT_POWER = _impl.ACT_POWER
ACT_IDENTITY = _impl.ACT_IDENTITY

posterior_from_logits = _impl.posterior_from_logits
mixture_pdf_grids = _impl.mixture_pdf_grids
irls_loop = _impl.irls_loop

_warmed = False


def warmup() -> None:
    """Trigger jit compilation once so worker processes inherit it."""
    global _warmed
    if _warmed:
        return
    import numpy as np

    X = np.zeros((4, 1))
    logits = np.zeros((4, 2))
    means = np.zeros((4, 2))
    nus = np.ones(2)
    y = np.zeros(4)
    posterior_from_logits(logits, means, nus, y)
    mixture_pdf_grids(np.zeros((2, 5)), np.full((2, 2), 0.5), means[:2], nus)
    resp = np.full((4, 2), 0.5)
    for code in (ACT_LINEAR, ACT_SIGMOID):
        irls_loop(X, resp, np.zeros((2, 1)), np.zeros(2), 1.0, code, 1, 2, 0.01, 1e-3, False, 1)
    _warmed = True
