"""Post-hoc power-law averaging of saved checkpoints."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping

import numpy as np

from .errors import ContractError, ShapeError
from .manifold import retract_rows

DEFAULT_ALPHA = 6.22


def beta(t: int, alpha: float) -> float:
    """Checkpoint weight ``(1 - 1/(t+1)) ** (1 + alpha)``."""
    if t < 0 or alpha < 0:
        raise ContractError("need t >= 0 and alpha >= 0")
    return (1.0 - 1.0 / (t + 1)) ** (1.0 + alpha)


@dataclass
class CheckpointRef:
    step: int
    params: dict[str, np.ndarray]
    # Names of row-normalized tensors; their average is projected back to the sphere.
    sphere_params: frozenset[str] = field(default_factory=frozenset)


def ema_weights(steps: Iterable[int], alpha: float) -> np.ndarray:
    """Normalized weights for checkpoints at ``steps`` (in the given order)."""
    raw = np.array([beta(s, alpha) for s in steps])
    total = raw.sum()
    if not total > 0:
        raise ContractError("all checkpoint weights are zero (only step 0?)")
    return raw / total


def combine(checkpoints: list[CheckpointRef], alpha: float = DEFAULT_ALPHA, retract: bool = True) -> tuple[dict[str, np.ndarray], dict[int, float]]:
    """Weighted average of checkpoints with weights ``beta(step)`` normalized to 1.

    Returns ``(params, weights_by_step)``. The result does not depend on the
    order of ``checkpoints``. Tensors listed in ``sphere_params`` are
    renormalized row-wise after averaging when ``retract`` is set.
    """
    if not checkpoints:
        raise ContractError("need at least one checkpoint")
    ordered = sorted(checkpoints, key=lambda c: c.step)
    steps = [c.step for c in ordered]
    if len(set(steps)) != len(steps):
        raise ContractError(f"duplicate checkpoint steps in {steps}")
    ref = ordered[0]
    for c in ordered[1:]:
        if c.params.keys() != ref.params.keys():
            missing = sorted(set(ref.params) ^ set(c.params))
            raise ShapeError(f"checkpoint at step {c.step} has different parameters: {missing}")
        for name, arr in c.params.items():
            if np.shape(arr) != np.shape(ref.params[name]):
                raise ShapeError(
                    f"parameter {name!r}: shape {np.shape(arr)} at step {c.step} "
                    f"vs {np.shape(ref.params[name])} at step {ref.step}"
                )
    if len(ordered) == 1:
        return {k: np.array(v, dtype=np.float64) for k, v in ref.params.items()}, {ref.step: 1.0}

    w = ema_weights(steps, alpha)
    out = {}
    for name in ref.params:
        acc = np.zeros(np.shape(ref.params[name]))
        for wi, c in zip(w, ordered):
            acc += wi * np.asarray(c.params[name], dtype=np.float64)
        if retract and name in ref.sphere_params:
            acc = retract_rows(acc)
        out[name] = acc
    return out, {s: float(x) for s, x in zip(steps, w)}


@dataclass
class SweepResult:
    best_alpha: float
    losses: dict[float, float]
    failures: dict[float, str]


def sweep_alpha(
    checkpoints: list[CheckpointRef],
    alphas: Iterable[float],
    evaluate: Callable[[Mapping[str, np.ndarray]], float],
) -> SweepResult:
    """Pick the alpha whose averaged parameters minimize ``evaluate``.

    An alpha whose evaluation raises or returns a non-finite loss is recorded
    in ``failures`` and excluded.
    """
    alphas = list(alphas)
    if not alphas:
        raise ContractError("need at least one alpha")
    losses, failures = {}, {}
    for a in alphas:
        try:
            params, _ = combine(checkpoints, a)
            loss = float(evaluate(params))
        except Exception as exc:  # noqa: BLE001 - any evaluator failure excludes the alpha
            failures[a] = f"{type(exc).__name__}: {exc}"
            continue
        if not math.isfinite(loss):
            failures[a] = f"non-finite loss {loss!r}"
            continue
        losses[a] = loss
    if not losses:
        raise ContractError(f"every alpha failed: {failures}")
    best = min(losses, key=lambda a: (losses[a], alphas.index(a)))
    return SweepResult(best, losses, failures)
