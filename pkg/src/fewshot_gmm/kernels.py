"""Backend selection for the mixture kernels.

The compiled ``_ckernels`` extension is used when it imports; otherwise the
numpy implementation in ``_pykernels``. Set ``FEWSHOT_GMM_PURE=1`` to force
the numpy path.
"""
import os

from . import _pykernels

if os.environ.get("FEWSHOT_GMM_PURE") == "1":
    _backend = _pykernels
    BACKEND = "python"
else:
    try:
        from . import _ckernels as _backend
        BACKEND = "compiled"
    except ImportError:
        _backend = _pykernels
        BACKEND = "python"

component_logpdf = _backend.component_logpdf
loglik_resp = _backend.loglik_resp
weighted_moments = _backend.weighted_moments
batched_nll_grad = _backend.batched_nll_grad

__all__ = [
    "BACKEND",
    "component_logpdf",
    "loglik_resp",
    "weighted_moments",
    "batched_nll_grad",
]
