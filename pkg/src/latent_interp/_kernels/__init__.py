"""Hot kernels: compiled extension when importable, numpy fallback otherwise.

Set ``LATENT_INTERP_PURE_PYTHON=1`` to force the fallback.
"""

from __future__ import annotations

import os

from latent_interp._kernels import _pykernels

if os.environ.get("LATENT_INTERP_PURE_PYTHON") == "1":
    _impl = _pykernels
    IMPLEMENTATION = "python"
else:
    try:
        from latent_interp._kernels import _ckernels as _impl

        IMPLEMENTATION = "cython"
    except ImportError:
        _impl = _pykernels
        IMPLEMENTATION = "python"

splat_sum = _impl.splat_sum
splat_max = _impl.splat_max
cosine_argmax = _impl.cosine_argmax

__all__ = ["IMPLEMENTATION", "cosine_argmax", "splat_max", "splat_sum"]
