"""Hot-loop kernels: compiled extension when built, pure Python otherwise.

Set ``FINDKIT_PURE_PYTHON=1`` to force the fallback (used by the benchmark
and by the cross-backend tests).
"""
import os

from . import _kernels_py as pure

compiled = None
if os.environ.get("FINDKIT_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as compiled
    except ImportError:  # extension not built
        compiled = None

_impl = compiled if compiled is not None else pure
BACKEND = "cython" if compiled is not None else "python"

linear_sum_assignment = _impl.linear_sum_assignment
rle_encode = _impl.rle_encode
rle_decode = _impl.rle_decode
label_contingency = _impl.label_contingency

__all__ = ["BACKEND", "compiled", "pure", "linear_sum_assignment", "rle_encode",
           "rle_decode", "label_contingency"]
