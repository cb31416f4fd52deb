"""Backend selection for the linear softmax kernels.

The compiled Cython module is used when it was built; otherwise the numpy
implementation is used. ``DOMAINSHIFT_PURE_PYTHON=1`` forces the fallback.
``BACKEND`` names the active choice.
"""
import os

import numpy as np

from domainshift import _pykernels

_compiled = None
if not os.environ.get("DOMAINSHIFT_PURE_PYTHON"):
    try:
        from domainshift import _ckernels as _compiled
    except ImportError:  # extension not built
        _compiled = None

BACKEND = "cython" if _compiled is not None else "python"
_impl = _compiled if _compiled is not None else _pykernels


def _prep(theta, X, y=None):
    theta = np.ascontiguousarray(theta, dtype=np.float64)
    X = np.ascontiguousarray(X, dtype=np.float64)
    if y is None:
        return theta, X
    return theta, X, np.ascontiguousarray(y, dtype=np.int64)


def softmax_xent(theta, X, y, n_classes):
    theta, X, y = _prep(theta, X, y)
    return _impl.softmax_xent(theta, X, y, n_classes)


def softmax_xent_input_grad(theta, X, y, n_classes):
    theta, X, y = _prep(theta, X, y)
    return _impl.softmax_xent_input_grad(theta, X, y, n_classes)


def softmax_probs(theta, X, n_classes):
    theta, X = _prep(theta, X)
    return _impl.softmax_probs(theta, X, n_classes)
