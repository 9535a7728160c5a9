"""Geometry of the unit sphere used for row-constrained weight matrices."""

from __future__ import annotations

import numpy as np

from .errors import ContractError, RetractionError
from .numcore import RngStream

# Preconditions tolerate accumulated drift; postconditions catch bugs.
UNIT_TOL_PRE = 1e-9
UNIT_TOL_POST = 1e-12


def _check_unit(w: np.ndarray) -> None:
    n = float(np.linalg.norm(w))
    if not abs(n - 1.0) <= UNIT_TOL_PRE:
        raise ContractError(f"point is not on the sphere (norm {n!r})")


def project_tangent(w, g) -> np.ndarray:
    """Remove the radial component of ``g`` at the unit vector ``w``.

    Returns ``g - (g . w) w``, the orthogonal projection onto the tangent
    space of the sphere at ``w``.
    """
    w = np.asarray(w, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    if w.shape != g.shape or w.ndim != 1:
        raise ContractError(f"shape mismatch: w {w.shape}, g {g.shape}")
    _check_unit(w)
    return g - np.dot(g, w) * w


def retract(w_tilde) -> np.ndarray:
    """Map a point back onto the sphere by normalizing it."""
    w_tilde = np.asarray(w_tilde, dtype=np.float64)
    n = np.linalg.norm(w_tilde)
    if not (np.isfinite(n) and n > 0):
        raise RetractionError(f"cannot retract vector with norm {n!r}")
    return w_tilde / n


def project_rows(w, g) -> np.ndarray:
    """Row-wise :func:`project_tangent` for a matrix of unit rows."""
    w = np.asarray(w, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    if w.shape != g.shape:
        raise ContractError(f"shape mismatch: w {w.shape}, g {g.shape}")
    return g - np.einsum("ij,ij->i", g, w)[:, None] * w


def retract_rows(w) -> np.ndarray:
    """Row-wise :func:`retract`; raises on the first degenerate row."""
    w = np.asarray(w, dtype=np.float64)
    norms = np.sqrt(np.einsum("ij,ij->i", w, w))
    bad = np.flatnonzero(~(np.isfinite(norms) & (norms > 0)))
    if bad.size:
        raise RetractionError(f"row {int(bad[0])} has norm {norms[bad[0]]!r}")
    return w / norms[:, None]


def row_norm_deviation(w) -> np.ndarray:
    """``| ||w_i|| - 1 |`` for every row."""
    w = np.asarray(w, dtype=np.float64)
    return np.abs(np.sqrt(np.einsum("ij,ij->i", w, w)) - 1.0)


def sphere_init(rows: int, cols: int, rng: RngStream) -> np.ndarray:
    """Rows drawn uniformly from the unit sphere in ``cols`` dimensions.

    Gaussian rows normalized to unit length; each entry then has standard
    deviation close to ``1/sqrt(cols)``.
    """
    if rows < 1 or cols < 1:
        raise ContractError("rows and cols must be >= 1")
    g = rng.generator().standard_normal((rows, cols))
    return retract_rows(g)
