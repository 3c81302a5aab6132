"""Kernel backend selection.

The hot training kernels (batch forward pass and fused loss/gradient)
exist twice: a compiled Cython extension (``fedhorizon._ckernels``) and a
numpy fallback (``fedhorizon._pykernels``). The compiled backend is
preferred when importable; set ``FEDHORIZON_PURE_PYTHON=1`` to force the
fallback. Both satisfy the same contract and agree to floating-point
precision; whole-run reproducibility is guaranteed per backend.
"""

import os

from fedhorizon import _pykernels

try:
    from fedhorizon import _ckernels
except ImportError:
    _ckernels = None

_FORCE_PURE = os.environ.get("FEDHORIZON_PURE_PYTHON", "") not in ("", "0")

if _ckernels is not None and not _FORCE_PURE:
    _impl = _ckernels
    BACKEND = "compiled"
else:
    _impl = _pykernels
    BACKEND = "python"

predict_probs = _impl.predict_probs
loss_and_grad = _impl.loss_and_grad

PROB_FLOOR = _pykernels.PROB_FLOOR


def active_backend():
    """Name of the backend in use: 'compiled' or 'python'."""
    return BACKEND


def available_backends():
    """Mapping of backend name -> kernel module, for cross-checks."""
    backends = {"python": _pykernels}
    if _ckernels is not None:
        backends["compiled"] = _ckernels
    return backends
