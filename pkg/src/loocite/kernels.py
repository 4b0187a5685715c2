"""Kernel selection: compiled extension when importable, Python otherwise.

Set ``LOOCITE_PURE=1`` to force the Python implementations.
"""
import os

from ._ext import pure

BACKEND = "python"
if os.environ.get("LOOCITE_PURE", "") not in ("1", "true", "yes"):
    try:
        from ._ext import _kernels as _compiled
    except ImportError:  # extension not built
        _compiled = None
    else:
        BACKEND = "cython"
else:
    _compiled = None

_impl = _compiled if _compiled is not None else pure
cd_lasso = _impl.cd_lasso
grubbs_sequence = _impl.grubbs_sequence
