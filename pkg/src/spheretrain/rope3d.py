"""Rotary position embeddings over (t, h, w) positions.

Every head/frequency-band pair gets its own unit axis in R^3; the pair of
coordinates ``(2k, 2k+1)`` of a head vector is rotated by
``omega_k * <axis, position>``. Axes come from a shifted, randomly rotated
Kronecker sequence on the sphere, seeded per layer. A fraction of bands has
zero frequency and passes through untouched.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractError
from .numcore import RngStream

OMEGA_MIN = 0.2
OMEGA_MAX = 50.0
ZERO_FRACTION = 0.1


def _plastic_number() -> float:
    # Real root of x^3 = x + 1; basis of the 2-D golden-ratio generalization.
    x = 1.0
    for _ in range(64):
        x = (1.0 + x) ** (1.0 / 3.0)
    return x


_RHO = _plastic_number()
_ALPHA = np.array([1.0 / _RHO, 1.0 / _RHO**2])


def _random_rotation(gen: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(gen.standard_normal((3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def kronecker_sphere(n: int, offset=(0.5, 0.5)) -> np.ndarray:
    """``n`` low-discrepancy points on S^2 (unrotated).

    The 2-D additive recurrence ``frac(offset + i * alpha)`` is pushed through
    the area-preserving cylinder map ``z = 1 - 2u``, ``phi = 2 pi v``.
    """
    i = np.arange(1, n + 1, dtype=np.float64)[:, None]
    uv = np.mod(np.asarray(offset, dtype=np.float64) + i * _ALPHA, 1.0)
    z = 1.0 - 2.0 * uv[:, 0]
    phi = 2.0 * np.pi * uv[:, 1]
    rad = np.sqrt(np.maximum(0.0, 1.0 - z * z))
    pts = np.stack([rad * np.cos(phi), rad * np.sin(phi), z], axis=1)
    return pts / np.linalg.norm(pts, axis=1, keepdims=True)


def sample_axes(n: int, seed: int) -> np.ndarray:
    """Deterministic, well-spread unit 3-vectors, shape ``(n, 3)``.

    The seed picks both the sequence offset and a global rotation, so
    different seeds give unrelated axis sets.
    """
    if n < 1:
        raise ContractError("need at least one axis")
    gen = RngStream(seed).child(0x50BE).generator()
    offset = gen.random(2)
    rot = _random_rotation(gen)
    axes = kronecker_sphere(n, offset) @ rot.T
    return axes / np.linalg.norm(axes, axis=1, keepdims=True)


def zero_band_count(n_bands: int, zero_fraction: float) -> int:
    # The small slack keeps e.g. 0.1 * 30 = 3.0000000000000004 from rounding up.
    return min(n_bands, math.ceil(zero_fraction * n_bands - 1e-9))


def build_freqs(
    n_bands: int,
    omega_min: float = OMEGA_MIN,
    omega_max: float = OMEGA_MAX,
    zero_fraction: float = ZERO_FRACTION,
) -> tuple[np.ndarray, np.ndarray]:
    """Log-spaced frequencies with the last ``ceil(zero_fraction * n)`` zeroed.

    Returns ``(freqs, zero_mask)``. The nonzero bands span ``omega_min`` to
    ``omega_max`` inclusive.
    """
    if n_bands < 1:
        raise ContractError("need at least one band")
    if not 0 <= zero_fraction < 1:
        raise ContractError("zero_fraction must be in [0, 1)")
    if not 0 < omega_min < omega_max:
        raise ContractError("need 0 < omega_min < omega_max")
    n_zero = zero_band_count(n_bands, zero_fraction)
    n_live = n_bands - n_zero
    freqs = np.zeros(n_bands)
    if n_live == 1:
        freqs[0] = omega_min
    elif n_live > 1:
        freqs[:n_live] = np.geomspace(omega_min, omega_max, n_live)
        freqs[n_live - 1] = omega_max
    mask = np.zeros(n_bands, dtype=bool)
    mask[n_live:] = True
    return freqs, mask


@dataclass(frozen=True)
class RopeLayerSpec:
    """Axes, frequencies and zero mask for one layer.

    ``axes`` has shape ``(n_heads, n_bands, 3)``: one axis per head-frequency
    pair. ``freqs`` and ``zero_mask`` are shared by all heads.
    """

    axes: np.ndarray
    freqs: np.ndarray
    zero_mask: np.ndarray
    seed: int

    @property
    def n_heads(self) -> int:
        return self.axes.shape[0]

    @property
    def n_bands(self) -> int:
        return self.axes.shape[1]

    @property
    def head_dim(self) -> int:
        return 2 * self.n_bands

    @classmethod
    def build(
        cls,
        head_dim: int,
        n_heads: int = 1,
        seed: int = 0,
        omega_min: float = OMEGA_MIN,
        omega_max: float = OMEGA_MAX,
        zero_fraction: float = ZERO_FRACTION,
    ) -> "RopeLayerSpec":
        if head_dim < 2 or head_dim % 2:
            raise ContractError("head_dim must be even and >= 2")
        n_bands = head_dim // 2
        freqs, mask = build_freqs(n_bands, omega_min, omega_max, zero_fraction)
        axes = sample_axes(n_heads * n_bands, seed).reshape(n_heads, n_bands, 3)
        return cls(axes=axes, freqs=freqs, zero_mask=mask, seed=seed)

    @classmethod
    def identity(cls, head_dim: int, n_heads: int = 1) -> "RopeLayerSpec":
        """Every band masked: rotation is the identity."""
        n_bands = head_dim // 2
        axes = np.tile(np.array([1.0, 0.0, 0.0]), (n_heads, n_bands, 1))
        return cls(axes=axes, freqs=np.zeros(n_bands), zero_mask=np.ones(n_bands, dtype=bool), seed=0)


def angle(axis, omega: float, p) -> float:
    """Rotation angle ``omega * <axis, p>``."""
    axis = np.asarray(axis, dtype=np.float64)
    if abs(np.linalg.norm(axis) - 1.0) > 1e-9:
        raise ContractError("axis must be a unit vector")
    return float(omega * np.dot(axis, np.asarray(p, dtype=np.float64)))


def angles(spec: RopeLayerSpec, positions) -> np.ndarray:
    """Angles for every token, head and band: shape ``(n_tokens, n_heads, n_bands)``."""
    pos = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    return np.einsum("hkc,nc->nhk", spec.axes, pos) * spec.freqs


def rotate(x: np.ndarray, theta: np.ndarray, zero_mask: np.ndarray, inverse: bool = False) -> np.ndarray:
    """Rotate consecutive coordinate pairs of ``x`` (last axis) by ``theta``.

    ``theta`` broadcasts against ``x[..., ::2]``. Masked bands are copied
    through bit-for-bit. ``inverse`` applies the transpose rotation, which is
    also the backward pass of the forward rotation.
    """
    x0 = x[..., 0::2]
    x1 = x[..., 1::2]
    c = np.cos(theta)
    s = np.sin(theta)
    if inverse:
        s = -s
    out = np.empty_like(x)
    out[..., 0::2] = np.where(zero_mask, x0, x0 * c - x1 * s)
    out[..., 1::2] = np.where(zero_mask, x1, x0 * s + x1 * c)
    return out


def apply_rope(x, spec: RopeLayerSpec, p, head: int = 0) -> np.ndarray:
    """Rotate one head vector of length ``2 * n_bands`` at position ``p``."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (spec.head_dim,):
        raise ContractError(f"expected length {spec.head_dim}, got {x.shape}")
    theta = spec.axes[head] @ np.asarray(p, dtype=np.float64) * spec.freqs
    return rotate(x, theta, spec.zero_mask)


def grid_positions(n_t: int, n_h: int, n_w: int) -> np.ndarray:
    """Token positions of a ``(n_t, n_h, n_w)`` patch grid, each axis scaled to [0, 1]."""

    def axis(n):
        return np.zeros(1) if n == 1 else np.linspace(0.0, 1.0, n)

    t, h, w = np.meshgrid(axis(n_t), axis(n_h), axis(n_w), indexing="ij")
    return np.stack([t.ravel(), h.ravel(), w.ravel()], axis=1)


def layer_seed(base_seed: int, layer: int) -> int:
    return RngStream(base_seed).child(0x0A7E, layer).seed
