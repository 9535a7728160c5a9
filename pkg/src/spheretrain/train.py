"""Toy network and training loop for the synthetic tasks.

The network embeds ``d_in`` features per token with a unit-row input
projection, runs ``depth`` parallel blocks, and reads out ``d_out`` features
with ``final_proj``. Tokens sit on a small (t, h, w) grid.

``synthetic-denoise``: clean tokens ``c`` are Gaussian, the input is
``c + t * noise`` for a per-sample time ``t`` in [0, 1], and the target is a
fixed random linear map of ``c``. The network must use the timestep to decide
how much to shrink. ``synthetic-regression``: input ``c``, target
``tanh(c A^T)``.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np

from .block import (
    PARAM_NAMES,
    BlockParams,
    block_backward,
    block_forward,
    timestep_embedding,
)
from .errors import ContractError, DivergenceError
from .manifold import sphere_init
from .mup import DynamicsRecord, ParamStats, assign_rules
from .numcore import RngStream
from .optim import (
    AdamConfig,
    ParamKind,
    ParamTensor,
    ScheduleConfig,
    adam_step,
    classify_param,
    lr_at,
)
from .rope3d import RopeLayerSpec, grid_positions, layer_seed

TASKS = ("synthetic-denoise", "synthetic-regression")


@dataclass(frozen=True)
class ExperimentConfig:
    task: str = "synthetic-denoise"
    width: int = 32
    depth: int = 2
    steps: int = 100
    batch: int = 16
    base_lr: float = 0.01
    seed: int = 0
    output_dir: str | None = None
    head_dim: int = 16
    d_in: int = 16
    d_out: int = 16
    grid: tuple[int, int, int] = (2, 2, 2)
    warmup_steps: int | None = None
    cooldown_start_fraction: float = 0.98
    gate_mode: str = "sqrt_depth"
    beta1: float = 0.9
    beta2: float = 0.95
    val_batch: int = 64
    trace_every: int = 1
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.task not in TASKS:
            raise ContractError(f"unknown task {self.task!r}; expected one of {TASKS}")
        for name in ("width", "depth", "batch", "head_dim", "d_in", "d_out", "val_batch", "trace_every"):
            if getattr(self, name) < 1:
                raise ContractError(f"{name} must be >= 1")
        if self.steps < 0:
            raise ContractError("steps must be >= 0")
        if self.width % self.head_dim and self.width > self.head_dim:
            raise ContractError("width must be a multiple of head_dim")
        if not self.base_lr > 0:
            raise ContractError("base_lr must be positive")
        object.__setattr__(self, "grid", tuple(int(g) for g in self.grid))

    @property
    def n_heads(self) -> int:
        return max(1, self.width // self.head_dim)

    @property
    def warmup(self) -> int:
        if self.warmup_steps is not None:
            return self.warmup_steps
        return max(0, min(self.steps // 20, self.steps - 1))

    def schedule(self) -> ScheduleConfig:
        return ScheduleConfig(
            total_steps=max(self.steps, 1),
            warmup_steps=self.warmup if self.steps else 0,
            cooldown_start_fraction=self.cooldown_start_fraction,
            base_lr=self.base_lr,
        )

    def with_task(self, task) -> "ExperimentConfig":
        if isinstance(task, str):
            return dataclasses.replace(self, task=task)
        return dataclasses.replace(self, **dict(task))

    def to_json(self) -> dict:
        out = dataclasses.asdict(self)
        out["grid"] = list(self.grid)
        return out


@dataclass
class Batch:
    x: np.ndarray  # (B, n, d_in)
    t: np.ndarray  # (B,)
    target: np.ndarray  # (B, n, d_out)


class SyntheticTask:
    """Deterministic batches: batch ``k`` depends only on ``(seed, k)``."""

    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        root = RngStream(cfg.seed)
        gen = root.child(1).generator()
        self.mapping = gen.standard_normal((cfg.d_out, cfg.d_in)) / math.sqrt(cfg.d_in)
        self._root = root
        self.n_tokens = int(np.prod(cfg.grid))
        self.positions = grid_positions(*cfg.grid)

    def batch(self, index: int, size: int | None = None, stream: int = 2) -> Batch:
        cfg = self.cfg
        size = cfg.batch if size is None else size
        gen = self._root.child(stream, index).generator()
        clean = gen.standard_normal((size, self.n_tokens, cfg.d_in))
        t = gen.random(size)
        if cfg.task == "synthetic-denoise":
            noisy = clean + t[:, None, None] * gen.standard_normal(clean.shape)
            return Batch(noisy, t, clean @ self.mapping.T)
        return Batch(clean, t, np.tanh(clean @ self.mapping.T))

    def validation(self) -> Batch:
        return self.batch(0, self.cfg.val_batch, stream=3)


def param_prefix(layer: int) -> str:
    return f"blocks.{layer}."


class ToyNetwork:
    """Input projection, ``depth`` blocks, output projection."""

    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        d = cfg.width
        head_dim = min(cfg.head_dim, d)
        n_heads = d // head_dim
        rng = RngStream(cfg.seed).child(4)
        self.params: dict[str, ParamTensor] = {}

        def add(name, value, kind=None):
            if kind is None:
                kind = classify_param(name, np.ndim(value), owner_is_linear=name.endswith("weight"))
            self.params[name] = ParamTensor(name, value, kind)

        add("input_proj.weight", sphere_init(d, cfg.d_in, rng.child(0)))
        self.ropes = []
        for layer in range(cfg.depth):
            bp = BlockParams.init(
                d, rng.child(10 + layer), n_heads=n_heads, n_layers=cfg.depth, gate_mode=cfg.gate_mode
            )
            for suffix, attr in PARAM_NAMES.items():
                name = param_prefix(layer) + suffix
                # Zero-initialized projections have no point on the sphere.
                kind = ParamKind.STANDARD if suffix == "proj.weight" else None
                add(name, getattr(bp, attr), kind)
            self.ropes.append(RopeLayerSpec.build(head_dim, n_heads, seed=layer_seed(cfg.seed, layer)))
        add("final_proj.weight", np.zeros((cfg.d_out, d)))
        add("final_proj.bias", np.zeros(cfg.d_out))
        self.n_heads = n_heads
        self.ruleset = assign_rules(self.params.values(), d, cfg.base_lr)

    def block_params(self, layer: int) -> BlockParams:
        pre = param_prefix(layer)
        arrays = {attr: self.params[pre + suffix].value for suffix, attr in PARAM_NAMES.items()}
        return BlockParams(
            **arrays, n_layers=self.cfg.depth, n_heads=self.n_heads, gate_mode=self.cfg.gate_mode
        )

    def owner(self, name: str) -> str:
        if name.startswith("blocks."):
            return "blocks." + name.split(".")[1]
        return name.split(".")[0]

    def forward_backward(self, batch: Batch, positions, need_grads: bool = True):
        """Return ``(loss, grads, activations)``; ``activations`` maps each
        layer name to the RMS of its output."""
        p = self.params
        x0 = batch.x @ p["input_proj.weight"].value.T
        temb = timestep_embedding(batch.t, self.cfg.width)
        acts = {"input_proj": float(np.sqrt(np.mean(x0 * x0)))}
        caches = []
        h = x0
        v_first = None
        for layer in range(self.cfg.depth):
            h, cache = block_forward(h, temb, self.block_params(layer), self.ropes[layer], positions, v_first)
            if layer == 0:
                v_first = cache.v
            caches.append(cache)
            acts[f"blocks.{layer}"] = float(np.sqrt(np.mean(h * h)))
        pred = h @ p["final_proj.weight"].value.T + p["final_proj.bias"].value
        diff = pred - batch.target
        loss = float(np.mean(diff * diff))
        acts["final_proj"] = float(np.sqrt(np.mean(pred * pred)))
        acts["hidden"] = acts[f"blocks.{self.cfg.depth - 1}"]
        if not need_grads:
            return loss, None, acts

        grads = {}
        dpred = (2.0 / diff.size) * diff
        grads["final_proj.weight"] = dpred.reshape(-1, dpred.shape[-1]).T @ h.reshape(-1, h.shape[-1])
        grads["final_proj.bias"] = dpred.sum(axis=(0, 1))
        dh = dpred @ p["final_proj.weight"].value
        dv_first = None
        for layer in reversed(range(self.cfg.depth)):
            g = block_backward(caches[layer], dh, dv_extra=dv_first if layer == 0 else None)
            if layer > 0:
                dv_first = g.dv_first if dv_first is None else dv_first + g.dv_first
            pre = param_prefix(layer)
            for suffix, attr in PARAM_NAMES.items():
                grads[pre + suffix] = getattr(g, attr).reshape(p[pre + suffix].shape)
            dh = g.dx
        grads["input_proj.weight"] = dh.reshape(-1, dh.shape[-1]).T @ batch.x.reshape(-1, batch.x.shape[-1])
        return loss, grads, acts

    def loss(self, batch: Batch, positions) -> float:
        return self.forward_backward(batch, positions, need_grads=False)[0]


@dataclass
class TrainResult:
    network: ToyNetwork
    losses: list[float] = field(default_factory=list)
    hidden_rms: list[float] = field(default_factory=list)
    trace: list[DynamicsRecord] = field(default_factory=list)
    initial_val_loss: float = math.nan
    final_val_loss: float = math.nan
    diverged_at: int | None = None


def train(cfg: ExperimentConfig, record_trace: bool = True, on_checkpoint=None, raise_on_divergence: bool = False) -> TrainResult:
    """Train a :class:`ToyNetwork` on the configured synthetic task.

    ``hidden_rms[k]`` is the RMS of the last block's output on the batch used
    at step ``k`` (``k = 0`` is the initialization). Divergence stops training
    and sets ``diverged_at``; with ``raise_on_divergence`` it raises
    :class:`DivergenceError` instead.
    """
    # divergence is detected from the loss and the optimizer checks, not from fp warnings
    with np.errstate(over="ignore", invalid="ignore"):
        return _train(cfg, record_trace, on_checkpoint, raise_on_divergence)


def _train(cfg, record_trace, on_checkpoint, raise_on_divergence) -> TrainResult:
    task = SyntheticTask(cfg)
    net = ToyNetwork(cfg)
    pos = task.positions
    val = task.validation()
    result = TrainResult(network=net)
    result.initial_val_loss = net.loss(val, pos)
    sched = cfg.schedule()
    adam = AdamConfig(beta1=cfg.beta1, beta2=cfg.beta2)

    for step in range(cfg.steps + 1):
        batch = task.batch(step)
        loss, grads, acts = net.forward_backward(batch, pos, need_grads=step < cfg.steps)
        if not math.isfinite(loss):
            result.diverged_at = step
            if raise_on_divergence:
                raise DivergenceError(f"non-finite loss at step {step}")
            break
        result.hidden_rms.append(acts["hidden"])
        if step == cfg.steps:
            break
        result.losses.append(loss)
        frac = lr_at(step + 1, sched) / cfg.base_lr
        stats = {}
        try:
            for name, p in net.params.items():
                old = p.value
                if frac > 0:
                    adam_step(p, grads[name], p.lr_multiplier * frac, adam)
                if record_trace and (step + 1) % cfg.trace_every == 0:
                    delta = p.value - old
                    stats[name] = ParamStats(
                        grad_norm=float(np.linalg.norm(grads[name])),
                        weight_norm=float(np.linalg.norm(p.value)),
                        update_rms=float(np.sqrt(np.mean(delta * delta))),
                        activation_rms=acts[net.owner(name)],
                    )
        except ArithmeticError as exc:
            result.diverged_at = step + 1
            if raise_on_divergence:
                raise DivergenceError(f"step {step + 1}: {exc}") from exc
            break
        if stats:
            result.trace.append(DynamicsRecord(step + 1, stats))
        if on_checkpoint is not None and cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
            on_checkpoint(step + 1, net)

    result.final_val_loss = net.loss(val, pos) if result.diverged_at is None else math.nan
    return result


@dataclass(frozen=True)
class SweepRow:
    width: int
    depth: int
    batch: int
    steps: int
    base_lr: float
    seed: int
    final_loss: float
    status: str  # "ok" | "diverged" | "error: ..."


def _run_point(cfg: ExperimentConfig) -> SweepRow:
    try:
        res = train(cfg, record_trace=False)
        status = "ok" if res.diverged_at is None else "diverged"
        loss = res.final_val_loss
    except Exception as exc:  # noqa: BLE001 - one bad grid point must not stop the sweep
        status, loss = f"error: {type(exc).__name__}: {exc}", math.nan
    return SweepRow(cfg.width, cfg.depth, cfg.batch, cfg.steps, cfg.base_lr, cfg.seed, loss, status)


def run_sweep(configs, parallel: bool = False, max_workers: int | None = None) -> list[SweepRow]:
    """Train every config; failures are recorded in ``status``."""
    configs = list(configs)
    if parallel and len(configs) > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=max_workers) as pool:
            return list(pool.map(_run_point, configs))
    return [_run_point(c) for c in configs]


def best_lr_by_width(rows: list[SweepRow]) -> dict[int, tuple[float, int]]:
    """Per width, the base LR with the lowest seed-averaged final loss and its
    index in the sorted LR grid. Failed runs count as infinite loss."""
    out = {}
    for width in sorted({r.width for r in rows}):
        sub = [r for r in rows if r.width == width]
        grid = sorted({r.base_lr for r in sub})
        means = []
        for lr in grid:
            losses = [r.final_loss if r.status == "ok" and math.isfinite(r.final_loss) else math.inf
                      for r in sub if r.base_lr == lr]
            means.append(float(np.mean(losses)))
        idx = int(np.argmin(means))
        out[width] = (grid[idx], idx)
    return out
