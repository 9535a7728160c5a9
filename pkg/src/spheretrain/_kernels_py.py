"""Pure-numpy versions of the hot kernels.

Each function mirrors a routine in ``_kernels.pyx`` with the same signature and
in-place semantics, so either module can back :mod:`spheretrain.kernels`.
"""

import numpy as np


def adam_rows(w, g, m, v, lr, beta1, beta2, eps, bc1, bc2, project):
    """Fused AdamW row update, in place on ``w``, ``m``, ``v``.

    With ``project`` set, each gradient row is first projected onto the tangent
    space of its weight row and the updated row is renormalized afterwards.
    Returns the index of the first row whose norm is zero or non-finite after
    the step (the arrays are then partially updated), or -1.
    """
    if project:
        radial = np.einsum("ij,ij->i", g, w)
        gt = g - radial[:, None] * w
    else:
        gt = g
    m *= beta1
    m += (1.0 - beta1) * gt
    v *= beta2
    v += (1.0 - beta2) * (gt * gt)
    w -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
    if project:
        norms = np.sqrt(np.einsum("ij,ij->i", w, w))
        bad = np.flatnonzero(~(np.isfinite(norms) & (norms > 0)))
        if bad.size:
            return int(bad[0])
        w /= norms[:, None]
    return -1


def assign_nearest(x, c, c_sqnorm):
    """Nearest centroid per row of ``x`` by the expanded squared distance.

    Returns ``(labels, sqdist)``; ties go to the lowest centroid index. The
    winning distance is recomputed directly, so coincident points give 0.
    """
    x_sq = np.einsum("ij,ij->i", x, x)
    d = x_sq[:, None] + c_sqnorm[None, :] - 2.0 * (x @ c.T)
    np.maximum(d, 0.0, out=d)
    labels = np.argmin(d, axis=1)
    diff = x - c[labels]
    return labels.astype(np.int64), np.einsum("ij,ij->i", diff, diff)


def minibatch_update(centroids, counts, batch, labels):
    """Per-cluster adaptive-rate centroid update, in place.

    For every cluster hit by the batch, the centroid moves toward the mean of
    its batch members with rate ``n_batch / (n_k + n_batch)`` and the count
    grows by ``n_batch``. Returns the per-cluster batch counts.
    """
    k, dim = centroids.shape
    sums = np.zeros((k, dim))
    np.add.at(sums, labels, batch)
    nb = np.bincount(labels, minlength=k).astype(np.float64)
    hit = nb > 0
    means = sums[hit] / nb[hit, None]
    eta = nb[hit] / (counts[hit] + nb[hit])
    centroids[hit] += eta[:, None] * (means - centroids[hit])
    counts[hit] += nb[hit]
    return nb
