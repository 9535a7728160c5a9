"""Backend selection for the hot kernels.

The compiled extension ``spheretrain._kernels`` is used when it imports;
otherwise (or when ``SPHERETRAIN_PURE=1``) the numpy versions in
``spheretrain._kernels_py`` are used. ``BACKEND`` names the active one.

``SPHERETRAIN_THREADS`` caps the threads used by parallel kernels.
"""

import os

import numpy as np

from . import _kernels_py

try:
    if os.environ.get("SPHERETRAIN_PURE", "") not in ("", "0"):
        raise ImportError("pure backend requested")
    from . import _kernels as _compiled
except ImportError:
    _compiled = None

_impl = _compiled if _compiled is not None else _kernels_py
BACKEND = "cython" if _compiled is not None else "python"


def thread_cap() -> int:
    try:
        n = int(os.environ.get("SPHERETRAIN_THREADS", "0"))
    except ValueError:
        n = 0
    return n if n > 0 else (os.cpu_count() or 1)


def adam_rows(w, g, m, v, lr, beta1, beta2, eps, bc1, bc2, project):
    return _impl.adam_rows(w, g, m, v, lr, beta1, beta2, eps, bc1, bc2, bool(project))


def assign_nearest(x, c, c_sqnorm=None):
    x = np.ascontiguousarray(x, dtype=np.float64)
    c = np.ascontiguousarray(c, dtype=np.float64)
    if c_sqnorm is None:
        c_sqnorm = np.einsum("ij,ij->i", c, c)
    if _compiled is not None:
        return _compiled.assign_nearest(x, c, c_sqnorm, thread_cap())
    return _kernels_py.assign_nearest(x, c, c_sqnorm)


def minibatch_update(centroids, counts, batch, labels):
    labels = np.ascontiguousarray(labels, dtype=np.int64)
    batch = np.ascontiguousarray(batch, dtype=np.float64)
    return _impl.minibatch_update(centroids, counts, batch, labels)
