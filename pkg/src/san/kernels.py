"""Backend selection for the numerical kernels.

The compiled ``san._core`` extension is used when it imports cleanly;
otherwise, or when ``SAN_PURE_PYTHON`` is set to a non-empty value other
than ``0``, the numpy implementations in ``san._fallback`` are used.
"""

import os

from . import _fallback


def _want_pure():
    return os.environ.get("SAN_PURE_PYTHON", "") not in ("", "0")


def load_backend(pure=None):
    """Return ``(name, module)`` for the requested backend."""
    if pure is None:
        pure = _want_pure()
    if not pure:
        try:
            from . import _core
        except ImportError:
            pass
        else:
            return "compiled", _core
    return "python", _fallback


BACKEND, _impl = load_backend()

pairwise_sq_dists = _impl.pairwise_sq_dists
rbf_bank = _impl.rbf_bank
mmd_and_grad = _impl.mmd_and_grad
rank_order = _impl.rank_order
topk_metrics = _impl.topk_metrics
