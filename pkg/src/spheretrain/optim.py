"""AdamW on the product of unit spheres, plus the learning-rate schedule.

Two-dimensional linear weights are *norm-preserving*: every row lives on the
unit sphere. Their gradients are projected onto the tangent space before the
Adam moments see them, and each row is renormalized after the step. Other
parameters get plain Adam. There is no weight decay.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import kernels
from .errors import ContractError, NonFiniteGradientError, RetractionError
from .manifold import UNIT_TOL_PRE, row_norm_deviation
from .numcore import read_dmat, write_dmat

UNCONSTRAINED_NAME_PARTS = ("final_proj", "modulation.2", "dconv.weight")
# Rows that drifted less than this are silently renormalized before a step.
DRIFT_REPAIR_TOL = 1e-6


class ParamKind(str, enum.Enum):
    NORM_PRESERVING = "norm_preserving"
    STANDARD = "standard"


def classify_param(name: str, n_dims: int, owner_is_linear: bool) -> ParamKind:
    """Norm-preserving iff a 2-D Linear weight outside the unconstrained list."""
    if not name:
        raise ContractError("parameter name must be nonempty")
    if (
        n_dims == 2
        and owner_is_linear
        and not any(part in name for part in UNCONSTRAINED_NAME_PARTS)
    ):
        return ParamKind.NORM_PRESERVING
    return ParamKind.STANDARD


@dataclass
class ParamTensor:
    """A named parameter with its Adam state.

    ``lr_multiplier`` is the peak learning rate of this tensor (base rate
    already folded in); the schedule scales it over training. ``step`` is the
    number of accepted Adam steps and drives bias correction.
    """

    name: str
    value: np.ndarray
    kind: ParamKind = ParamKind.STANDARD
    lr_multiplier: float = 1.0
    m: np.ndarray | None = None
    v: np.ndarray | None = None
    step: int = 0
    zero_init: bool = False

    def __post_init__(self):
        self.value = np.array(self.value, dtype=np.float64, order="C")
        if self.m is None:
            self.m = np.zeros_like(self.value)
        if self.v is None:
            self.v = np.zeros_like(self.value)
        self.m = np.array(self.m, dtype=np.float64, order="C")
        self.v = np.array(self.v, dtype=np.float64, order="C")
        if self.m.shape != self.value.shape or self.v.shape != self.value.shape:
            raise ContractError(f"{self.name}: moment shapes differ from value")
        self.kind = ParamKind(self.kind)
        if self.kind is ParamKind.NORM_PRESERVING and self.value.ndim != 2:
            raise ContractError(f"{self.name}: norm-preserving params must be 2-D")

    @property
    def shape(self):
        return self.value.shape


@dataclass(frozen=True)
class AdamConfig:
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8

    def __post_init__(self):
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ContractError("betas must lie in [0, 1)")
        if not self.eps > 0:
            raise ContractError("eps must be positive")


def adam_step(p: ParamTensor, grad, lr: float, cfg: AdamConfig = AdamConfig()) -> ParamTensor:
    """Apply one AdamW step to ``p`` in place and return it.

    For norm-preserving tensors each row follows: tangent projection of the
    gradient, moment updates from the projected gradient, bias correction, the
    preconditioned step, and renormalization of the row. Standard tensors skip
    the projection and the renormalization.

    The step is transactional: on a non-finite gradient or a failed
    renormalization ``p`` is left untouched and an exception is raised.
    """
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != p.value.shape:
        raise ContractError(f"{p.name}: grad shape {grad.shape} != {p.value.shape}")
    if not lr > 0:
        raise ContractError(f"{p.name}: lr must be positive, got {lr!r}")
    if not np.all(np.isfinite(grad)):
        bad = int(np.count_nonzero(~np.isfinite(grad)))
        raise NonFiniteGradientError(f"{p.name}: {bad} non-finite gradient entries; step rejected")

    project = p.kind is ParamKind.NORM_PRESERVING
    w = p.value.reshape(p.value.shape[0] if p.value.ndim else 1, -1).copy()
    if project:
        dev = row_norm_deviation(w)
        worst = float(dev.max())
        if worst > DRIFT_REPAIR_TOL:
            raise ContractError(f"{p.name}: row norm drifted by {worst:.3e}")
        if worst > UNIT_TOL_PRE:
            w /= np.sqrt(np.einsum("ij,ij->i", w, w))[:, None]
    m = p.m.reshape(w.shape).copy()
    v = p.v.reshape(w.shape).copy()
    g = np.ascontiguousarray(grad.reshape(w.shape))

    t = p.step + 1
    bc1 = 1.0 - cfg.beta1**t
    bc2 = 1.0 - cfg.beta2**t
    bad_row = kernels.adam_rows(w, g, m, v, lr, cfg.beta1, cfg.beta2, cfg.eps, bc1, bc2, project)
    if bad_row >= 0:
        raise RetractionError(f"{p.name}: row {bad_row} collapsed during retraction")

    p.value = w.reshape(p.value.shape)
    p.m = m.reshape(p.value.shape)
    p.v = v.reshape(p.value.shape)
    p.step = t
    return p


@dataclass(frozen=True)
class ScheduleConfig:
    """Linear warmup, constant plateau, linear cooldown to zero."""

    total_steps: int
    warmup_steps: int = 0
    cooldown_start_fraction: float = 0.98
    base_lr: float = 0.01

    def __post_init__(self):
        if not 0 < self.cooldown_start_fraction <= 1:
            raise ContractError("cooldown_start_fraction must be in (0, 1]")
        if self.total_steps < 1 or not 0 <= self.warmup_steps < self.total_steps:
            raise ContractError("need 0 <= warmup_steps < total_steps")

    @property
    def cooldown_start(self) -> float:
        return self.cooldown_start_fraction * self.total_steps


def lr_at(step: int, sched: ScheduleConfig) -> float:
    """Scheduled learning rate at ``step`` (0 <= step <= total_steps)."""
    if not 0 <= step <= sched.total_steps:
        raise ContractError(f"step {step} outside [0, {sched.total_steps}]")
    lr = sched.base_lr
    if step < sched.warmup_steps:
        lr = min(lr, sched.base_lr * step / sched.warmup_steps)
    start = sched.cooldown_start
    if step >= start:
        span = sched.total_steps - start
        frac = 0.0 if span <= 0 else (sched.total_steps - step) / span
        lr = min(lr, sched.base_lr * frac)
    return lr


# -- checkpoints ---------------------------------------------------------------

CHECKPOINT_MANIFEST = "manifest.json"


def _safe(name: str) -> str:
    return name.replace("/", "_")


def save_checkpoint(directory, params: list[ParamTensor], step: int, extra: dict | None = None) -> Path:
    """Write ``manifest.json`` plus one DMAT file per value/m/v."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for p in params:
        shape = list(p.value.shape)
        cols = shape[-1] if len(shape) >= 1 else 1
        rows = int(np.prod(shape[:-1])) if len(shape) >= 2 else 1
        files = {}
        for part in ("value", "m", "v"):
            fname = f"{_safe(p.name)}.{part}.dmat"
            write_dmat(directory / fname, getattr(p, part).reshape(rows, cols))
            files[part] = fname
        entries.append(
            {
                "name": p.name,
                "kind": p.kind.value,
                "shape": shape,
                "lr_multiplier": p.lr_multiplier,
                "step": p.step,
                "zero_init": p.zero_init,
                "files": files,
            }
        )
    manifest = {"format": "spheretrain-checkpoint", "version": 1, "step": step, "params": entries}
    if extra:
        manifest["extra"] = extra
    (directory / CHECKPOINT_MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return directory


def load_checkpoint(directory) -> tuple[list[ParamTensor], dict]:
    directory = Path(directory)
    manifest = json.loads((directory / CHECKPOINT_MANIFEST).read_text())
    params = []
    for e in manifest["params"]:
        shape = tuple(e["shape"])
        arrays = {part: read_dmat(directory / f).reshape(shape) for part, f in e["files"].items()}
        params.append(
            ParamTensor(
                name=e["name"],
                value=arrays["value"],
                kind=ParamKind(e["kind"]),
                lr_multiplier=float(e["lr_multiplier"]),
                m=arrays.get("m"),
                v=arrays.get("v"),
                step=int(e.get("step", 0)),
                zero_init=bool(e.get("zero_init", False)),
            )
        )
    return params, manifest


def max_row_deviation(params: list[ParamTensor]) -> float:
    """Largest ``| ||row|| - 1 |`` over all norm-preserving tensors."""
    worst = 0.0
    for p in params:
        if p.kind is ParamKind.NORM_PRESERVING:
            worst = max(worst, float(row_norm_deviation(p.value).max()))
    return worst

