"""Norm-preserving training utilities for a toy parallel-block video model.

Submodules: ``numcore`` (matrices, RNG, DMAT files), ``manifold`` (unit-row
sphere), ``optim`` (Riemannian AdamW, schedule, checkpoints), ``mup``
(learning-rate rules and band monitor), ``rope3d`` (3D rotary embedding),
``block`` (parallel attention/MLP block), ``ema`` (post-hoc averaging),
``dedup`` (mini-batch k-means) and ``cli``.
"""

from .kernels import BACKEND

__version__ = "0.1.0"
__all__ = ["BACKEND", "__version__"]
