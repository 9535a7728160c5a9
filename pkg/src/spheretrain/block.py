"""Parallel attention-MLP transformer block with timestep modulation.

Forward pass for tokens ``x`` (shape ``(n, d)`` or batched ``(B, n, d)``)::

    s, b, g        = split(mod_mlp(t_emb))              # each of width d
    x_mod          = rmsnorm(x) * (1 + s) + b
    Q, K, V, H1, H2 = split(x_mod @ W_unified.T)        # 3d + 4d columns
    V_out          = lambda1 * V_first + lambda2 * V    # value residual
    A              = softmax(rope(Q) rope(K)^T / sqrt(dh)) V_out   per head
    M              = (gelu(H2) * H1) @ W_mlp2.T
    y              = x + ([A, M] @ W_proj.T) * (g + offset)

``V_first`` is the raw value tensor of the first layer; the first layer itself
uses its own ``V``. ``offset`` is ``1/sqrt(L)`` by default, the constant
``1/8`` in ``"constant"`` mode, or 0 in ``"none"`` mode. Gradients are derived
by hand in :func:`block_backward`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields

import numpy as np
from scipy.special import erf, expit

from . import rope3d
from .errors import ContractError, ShapeError
from .manifold import sphere_init
from .numcore import RngStream
from .rope3d import RopeLayerSpec

RMS_EPS = 1e-6
CONSTANT_GATE = 0.125
GATE_MODES = ("sqrt_depth", "constant", "none")

_SQRT_HALF = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gate_offset(L: int) -> float:
    """Depth-aware residual gate offset ``1/sqrt(L)``."""
    if L < 1:
        raise ContractError("layer count must be >= 1")
    return 1.0 / math.sqrt(L)


def gelu(x):
    return 0.5 * x * (1.0 + erf(x * _SQRT_HALF))


def gelu_grad(x):
    return 0.5 * (1.0 + erf(x * _SQRT_HALF)) + x * np.exp(-0.5 * x * x) * _INV_SQRT_2PI


def silu(x):
    return x * expit(x)


def silu_grad(x):
    s = expit(x)
    return s * (1.0 + x * (1.0 - s))


def timestep_embedding(t, dim: int) -> np.ndarray:
    """Sinusoidal features of diffusion time ``t`` in [0, 1], shape ``(B, dim)``."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / max(half, 1))
    args = 1000.0 * t[:, None] * freqs[None, :]
    emb = np.concatenate([np.cos(args), np.sin(args)], axis=1)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros((t.shape[0], 1))], axis=1)
    return emb


def value_residual(v_prev, v_cur, l1: float, l2: float) -> np.ndarray:
    """Mix values across depth: ``l1 * v_prev + l2 * v_cur``."""
    v_prev = np.asarray(v_prev, dtype=np.float64)
    v_cur = np.asarray(v_cur, dtype=np.float64)
    if v_prev.shape != v_cur.shape:
        raise ContractError(f"shape mismatch {v_prev.shape} vs {v_cur.shape}")
    return l1 * v_prev + l2 * v_cur


def patch_grid(frames: int, height: int, width: int, p_t: int, p_s: int) -> tuple[int, int, int, int]:
    """Patch counts along (t, h, w) and their product."""
    if min(p_t, p_s) < 1:
        raise ShapeError("patch sizes must be positive")
    if frames % p_t or height % p_s or width % p_s:
        raise ShapeError(
            f"({frames}, {height}, {width}) not divisible by patch ({p_t}, {p_s}, {p_s})"
        )
    n_t, n_h, n_w = frames // p_t, height // p_s, width // p_s
    return n_t, n_h, n_w, n_t * n_h * n_w


# Parameter file names (relative to the block prefix) and their fields.
PARAM_NAMES = {
    "unified.weight": "w_unified",
    "mlp2.weight": "w_mlp2",
    "proj.weight": "w_proj",
    "modulation.0.weight": "mod_w0",
    "modulation.0.bias": "mod_b0",
    "modulation.2.weight": "mod_w2",
    "modulation.2.bias": "mod_b2",
    "lambda1": "lambda1",
    "lambda2": "lambda2",
}
ARRAY_FIELDS = tuple(PARAM_NAMES.values())


@dataclass
class BlockParams:
    """Weights of one block.

    ``w_unified`` is ``(7d, d)``, ``w_mlp2`` and ``w_proj`` are ``(d, 2d)``.
    The modulation MLP maps a ``t_dim`` timestep embedding through a ``t_dim``
    hidden layer (SiLU) to ``3d`` outputs ``(s, b, g)``. ``lambda1`` and
    ``lambda2`` are stored as ``(1, 1)`` arrays so they can be optimized like
    any other tensor.
    """

    w_unified: np.ndarray
    w_mlp2: np.ndarray
    w_proj: np.ndarray
    mod_w0: np.ndarray
    mod_b0: np.ndarray
    mod_w2: np.ndarray
    mod_b2: np.ndarray
    lambda1: np.ndarray
    lambda2: np.ndarray
    n_layers: int = 1
    n_heads: int = 1
    gate_mode: str = "sqrt_depth"

    def __post_init__(self):
        for name in ARRAY_FIELDS:
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        self.lambda1 = self.lambda1.reshape(1, 1)
        self.lambda2 = self.lambda2.reshape(1, 1)
        d = self.d
        t_dim = self.mod_w0.shape[1]
        expected = {
            "w_unified": (7 * d, d),
            "w_mlp2": (d, 2 * d),
            "w_proj": (d, 2 * d),
            "mod_w0": (self.mod_w0.shape[0], t_dim),
            "mod_b0": (self.mod_w0.shape[0],),
            "mod_w2": (3 * d, self.mod_w0.shape[0]),
            "mod_b2": (3 * d,),
        }
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise ShapeError(f"{name} has shape {getattr(self, name).shape}, expected {shape}")
        if d % self.n_heads or (d // self.n_heads) % 2:
            raise ShapeError(f"d={d} must split into {self.n_heads} heads of even size")
        if self.gate_mode not in GATE_MODES:
            raise ContractError(f"gate_mode must be one of {GATE_MODES}")

    @property
    def d(self) -> int:
        return self.w_unified.shape[1]

    @property
    def t_dim(self) -> int:
        return self.mod_w0.shape[1]

    @property
    def head_dim(self) -> int:
        return self.d // self.n_heads

    @property
    def offset(self) -> float:
        if self.gate_mode == "sqrt_depth":
            return gate_offset(self.n_layers)
        if self.gate_mode == "constant":
            return CONSTANT_GATE
        return 0.0

    @classmethod
    def init(
        cls,
        d: int,
        rng: RngStream,
        n_heads: int = 1,
        n_layers: int = 1,
        t_dim: int | None = None,
        gate_mode: str = "sqrt_depth",
    ) -> "BlockParams":
        """Fresh block: unit-row matrices, zero output projection and zero
        modulation output, so the block is the identity map."""
        t_dim = d if t_dim is None else t_dim
        return cls(
            w_unified=sphere_init(7 * d, d, rng.child(1)),
            w_mlp2=sphere_init(d, 2 * d, rng.child(2)),
            w_proj=np.zeros((d, 2 * d)),
            mod_w0=sphere_init(t_dim, t_dim, rng.child(3)),
            mod_b0=np.zeros(t_dim),
            mod_w2=np.zeros((3 * d, t_dim)),
            mod_b2=np.zeros(3 * d),
            lambda1=np.full((1, 1), 0.5),
            lambda2=np.full((1, 1), 0.5),
            n_layers=n_layers,
            n_heads=n_heads,
            gate_mode=gate_mode,
        )

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in ARRAY_FIELDS}

    def replace(self, **arrays) -> "BlockParams":
        kw = {f.name: getattr(self, f.name) for f in fields(self)}
        kw.update(arrays)
        return BlockParams(**kw)


@dataclass
class BlockCache:
    """Forward intermediates consumed by :func:`block_backward`."""

    x: np.ndarray
    t_emb: np.ndarray
    h_mod: np.ndarray
    a_mod: np.ndarray
    s: np.ndarray
    b: np.ndarray
    g: np.ndarray
    rinv: np.ndarray
    r: np.ndarray
    x_mod: np.ndarray
    v: np.ndarray
    v_prev: np.ndarray
    is_first: bool
    q_rot: np.ndarray
    k_rot: np.ndarray
    v_out: np.ndarray
    probs: np.ndarray
    theta: np.ndarray
    zero_mask: np.ndarray
    h1: np.ndarray
    h2: np.ndarray
    gelu_h2: np.ndarray
    u: np.ndarray
    concat: np.ndarray
    proj: np.ndarray
    gate: np.ndarray
    params: BlockParams
    squeeze: bool


@dataclass
class BlockGrads:
    """Gradients for every :class:`BlockParams` array, the input, and the
    first layer's values (``dv_first`` is ``None`` for a first layer)."""

    w_unified: np.ndarray
    w_mlp2: np.ndarray
    w_proj: np.ndarray
    mod_w0: np.ndarray
    mod_b0: np.ndarray
    mod_w2: np.ndarray
    mod_b2: np.ndarray
    lambda1: np.ndarray
    lambda2: np.ndarray
    dx: np.ndarray
    dv_first: np.ndarray | None

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in ARRAY_FIELDS}


def _flat(a: np.ndarray) -> np.ndarray:
    return a.reshape(-1, a.shape[-1])


def _heads(a: np.ndarray, n_heads: int) -> np.ndarray:
    b, n, d = a.shape
    return a.reshape(b, n, n_heads, d // n_heads)


def block_forward(
    x,
    t_emb,
    params: BlockParams,
    rope: RopeLayerSpec,
    positions,
    v_first=None,
) -> tuple[np.ndarray, BlockCache]:
    """Run one block. Pass ``v_first`` (the first layer's ``V``) for every
    layer after the first; leave it ``None`` for the first layer."""
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 2
    if squeeze:
        x = x[None]
    t_emb = np.asarray(t_emb, dtype=np.float64)
    if t_emb.ndim == 1:
        t_emb = t_emb[None]
    bsz, n, d = x.shape
    if d != params.d:
        raise ShapeError(f"input width {d} != block width {params.d}")
    if t_emb.shape != (bsz, params.t_dim):
        raise ShapeError(f"t_emb shape {t_emb.shape} != {(bsz, params.t_dim)}")
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    if positions.shape[0] != n:
        raise ShapeError(f"{positions.shape[0]} positions for {n} tokens")
    nh, dh = params.n_heads, params.head_dim
    if rope.n_heads != nh or rope.head_dim != dh:
        raise ShapeError("rope spec does not match block heads")

    h_mod = t_emb @ params.mod_w0.T + params.mod_b0
    a_mod = silu(h_mod)
    mod = a_mod @ params.mod_w2.T + params.mod_b2
    s, b, g = mod[:, :d], mod[:, d : 2 * d], mod[:, 2 * d :]

    ms = np.mean(x * x, axis=-1, keepdims=True) + RMS_EPS
    rinv = 1.0 / np.sqrt(ms)
    r = x * rinv
    x_mod = r * (1.0 + s[:, None, :]) + b[:, None, :]

    z = x_mod @ params.w_unified.T
    q, k, v = z[..., :d], z[..., d : 2 * d], z[..., 2 * d : 3 * d]
    h1, h2 = z[..., 3 * d : 5 * d], z[..., 5 * d :]

    is_first = v_first is None
    v_prev = v if is_first else np.asarray(v_first, dtype=np.float64).reshape(v.shape)
    l1, l2 = float(params.lambda1[0, 0]), float(params.lambda2[0, 0])
    v_out = l1 * v_prev + l2 * v

    theta = rope3d.angles(rope, positions)[None]  # (1, n, H, bands)
    q_rot = rope3d.rotate(_heads(q, nh), theta, rope.zero_mask)
    k_rot = rope3d.rotate(_heads(k, nh), theta, rope.zero_mask)
    scale = 1.0 / math.sqrt(dh)
    qh = q_rot.transpose(0, 2, 1, 3)
    kh = k_rot.transpose(0, 2, 1, 3)
    scores = (qh @ kh.transpose(0, 1, 3, 2)) * scale
    scores -= scores.max(axis=-1, keepdims=True)
    probs = np.exp(scores)
    probs /= probs.sum(axis=-1, keepdims=True)
    attn = (probs @ _heads(v_out, nh).transpose(0, 2, 1, 3)).transpose(0, 2, 1, 3).reshape(bsz, n, d)

    gelu_h2 = gelu(h2)
    u = gelu_h2 * h1
    mlp = u @ params.w_mlp2.T

    concat = np.concatenate([attn, mlp], axis=-1)
    proj = concat @ params.w_proj.T
    gate = g + params.offset
    y = x + proj * gate[:, None, :]

    cache = BlockCache(
        x=x, t_emb=t_emb, h_mod=h_mod, a_mod=a_mod, s=s, b=b, g=g, rinv=rinv, r=r,
        x_mod=x_mod, v=v, v_prev=v_prev, is_first=is_first, q_rot=q_rot, k_rot=k_rot,
        v_out=v_out, probs=probs, theta=theta, zero_mask=rope.zero_mask, h1=h1, h2=h2,
        gelu_h2=gelu_h2, u=u, concat=concat, proj=proj, gate=gate, params=params,
        squeeze=squeeze,
    )
    return (y[0] if squeeze else y), cache


def block_backward(cache: BlockCache, dy, dv_extra=None) -> BlockGrads:
    """Gradients of a scalar loss given ``dy = dL/dy``.

    For a first layer, ``dv_extra`` carries the gradient that later layers sent
    back into its ``V`` through the value residual.
    """
    p = cache.params
    dy = np.asarray(dy, dtype=np.float64)
    if cache.squeeze and dy.ndim == 2:
        dy = dy[None]
    if dy.shape != cache.x.shape:
        raise ShapeError(f"dy shape {dy.shape} != forward output {cache.x.shape}")
    bsz, n, d = dy.shape
    nh, dh = p.n_heads, p.head_dim

    dproj = dy * cache.gate[:, None, :]
    dg = np.sum(dy * cache.proj, axis=1)
    dw_proj = _flat(dproj).T @ _flat(cache.concat)
    dconcat = dproj @ p.w_proj
    dattn, dmlp = dconcat[..., :d], dconcat[..., d:]

    dw_mlp2 = _flat(dmlp).T @ _flat(cache.u)
    du = dmlp @ p.w_mlp2
    dh1 = du * cache.gelu_h2
    dh2 = du * cache.h1 * gelu_grad(cache.h2)

    # per-head tensors in (B, H, n, dh) layout
    dattn_h = _heads(dattn, nh).transpose(0, 2, 1, 3)
    v_out_h = _heads(cache.v_out, nh).transpose(0, 2, 1, 3)
    probs = cache.probs
    dprobs = dattn_h @ v_out_h.transpose(0, 1, 3, 2)
    dv_out = (probs.transpose(0, 1, 3, 2) @ dattn_h).transpose(0, 2, 1, 3).reshape(bsz, n, d)
    dscores = probs * (dprobs - np.sum(dprobs * probs, axis=-1, keepdims=True))
    scale = 1.0 / math.sqrt(dh)
    dq_rot = ((dscores @ cache.k_rot.transpose(0, 2, 1, 3)) * scale).transpose(0, 2, 1, 3)
    dk_rot = ((dscores.transpose(0, 1, 3, 2) @ cache.q_rot.transpose(0, 2, 1, 3)) * scale).transpose(0, 2, 1, 3)
    dq = rope3d.rotate(dq_rot, cache.theta, cache.zero_mask, inverse=True).reshape(bsz, n, d)
    dk = rope3d.rotate(dk_rot, cache.theta, cache.zero_mask, inverse=True).reshape(bsz, n, d)

    l1, l2 = float(p.lambda1[0, 0]), float(p.lambda2[0, 0])
    dl1 = np.full((1, 1), np.sum(dv_out * cache.v_prev))
    dl2 = np.full((1, 1), np.sum(dv_out * cache.v))
    dv = l2 * dv_out
    if cache.is_first:
        dv = dv + l1 * dv_out
        if dv_extra is not None:
            dv = dv + np.asarray(dv_extra, dtype=np.float64).reshape(dv.shape)
        dv_first = None
    else:
        dv_first = l1 * dv_out

    dz = np.concatenate([dq, dk, dv, dh1, dh2], axis=-1)
    dw_unified = _flat(dz).T @ _flat(cache.x_mod)
    dx_mod = dz @ p.w_unified

    ds = np.sum(dx_mod * cache.r, axis=1)
    db = dx_mod.sum(axis=1)
    dr = dx_mod * (1.0 + cache.s[:, None, :])
    x = cache.x
    ms = 1.0 / (cache.rinv * cache.rinv)
    dx_norm = cache.rinv * (dr - x * np.mean(dr * x, axis=-1, keepdims=True) / ms)
    dx = dy + dx_norm

    dmod = np.concatenate([ds, db, dg], axis=-1)
    dmod_w2 = dmod.T @ cache.a_mod
    dmod_b2 = dmod.sum(axis=0)
    dh_mod = (dmod @ p.mod_w2) * silu_grad(cache.h_mod)
    dmod_w0 = dh_mod.T @ cache.t_emb
    dmod_b0 = dh_mod.sum(axis=0)

    if cache.squeeze:
        dx = dx[0]
        if dv_first is not None:
            dv_first = dv_first[0]
    return BlockGrads(
        w_unified=dw_unified, w_mlp2=dw_mlp2, w_proj=dw_proj, mod_w0=dmod_w0,
        mod_b0=dmod_b0, mod_w2=dmod_w2, mod_b2=dmod_b2, lambda1=dl1, lambda2=dl2,
        dx=dx, dv_first=dv_first,
    )


def first_layer_values(cache: BlockCache) -> np.ndarray:
    """The raw ``V`` of a first-layer forward, to feed later layers."""
    return cache.v[0] if cache.squeeze else cache.v
