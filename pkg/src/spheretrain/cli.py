"""Command-line driver: ``spheretrain <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 numerical failure, 3 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import math
import statistics
import sys
from pathlib import Path

import numpy as np

from . import kernels
from .dedup import KmeansConfig, fit
from .ema import DEFAULT_ALPHA, CheckpointRef, combine
from .errors import ContractError, DivergenceError
from .mup import BandSpec, band_report, coordinate_check, parse_trace_csv, report_json, trace_csv
from .numcore import RngStream, read_dmat, write_dmat
from .optim import ParamKind, ParamTensor, load_checkpoint, lr_at, save_checkpoint
from .rope3d import RopeLayerSpec, layer_seed
from .train import ExperimentConfig, best_lr_by_width, run_sweep, train

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3


class UsageError(Exception):
    pass


class InputError(Exception):
    """Unreadable or malformed input file."""


def _read_dmat(path):
    try:
        return read_dmat(path)
    except ContractError as exc:
        raise InputError(str(exc)) from None


def _load_checkpoint(path):
    try:
        return load_checkpoint(path)
    except (ContractError, KeyError, json.JSONDecodeError) as exc:
        raise InputError(f"{path}: {exc}") from None


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _ints(text: str) -> list[int]:
    return [int(v) for v in text.split(",") if v]


def _floats(text: str) -> list[float]:
    return [float(v) for v in text.split(",") if v]


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="\n", encoding="utf-8") as fh:
        fh.write(text)


def _dump_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


# -- train ---------------------------------------------------------------------

_TRAIN_FLAGS = {
    "task": str, "width": int, "depth": int, "steps": int, "batch": int, "base_lr": float,
    "seed": int, "output_dir": str, "head_dim": int, "warmup_steps": int, "gate_mode": str,
    "trace_every": int, "checkpoint_every": int,
}


def _add_experiment_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat JSON file of ExperimentConfig fields")
    for name, typ in _TRAIN_FLAGS.items():
        p.add_argument("--" + name.replace("_", "-"), dest=name, type=typ, default=None)


def experiment_config(args) -> ExperimentConfig:
    """Defaults, then the JSON file, then explicit flags."""
    values = {}
    if args.config:
        try:
            values.update(json.loads(Path(args.config).read_text()))
        except json.JSONDecodeError as exc:
            raise UsageError(f"{args.config}: {exc}") from None
    for name in _TRAIN_FLAGS:
        v = getattr(args, name, None)
        if v is not None:
            values[name] = v
    known = {f.name for f in dataclasses.fields(ExperimentConfig)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise UsageError(f"unknown config fields: {', '.join(unknown)}")
    try:
        return ExperimentConfig(**values)
    except (TypeError, ContractError) as exc:
        raise UsageError(str(exc)) from None


def run_manifest(cfg: ExperimentConfig, result) -> dict:
    net = result.network
    return {
        "config": cfg.to_json(),
        "initial_val_loss": result.initial_val_loss,
        "final_val_loss": result.final_val_loss,
        "train_losses": result.losses,
        "diverged_at": result.diverged_at,
        "lr_multipliers": {name: p.lr_multiplier for name, p in net.params.items()},
        "kinds": {name: p.kind.value for name, p in net.params.items()},
    }


def cmd_train(args) -> int:
    cfg = experiment_config(args)
    if not cfg.output_dir:
        raise UsageError("--output-dir is required")
    out = Path(cfg.output_dir)

    def on_checkpoint(step, net):
        save_checkpoint(out / "checkpoints" / f"step_{step:08d}", list(net.params.values()), step)

    try:
        result = train(cfg, on_checkpoint=on_checkpoint)
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    params = list(result.network.params.values())
    final_step = cfg.steps if result.diverged_at is None else result.diverged_at
    save_checkpoint(out / "checkpoint", params, final_step)
    if cfg.steps > 0:
        _write(out / "trace.csv", trace_csv(result.trace))
    _write(out / "run.json", _dump_json(run_manifest(cfg, result)))
    if result.diverged_at is not None:
        print(f"error: training diverged at step {result.diverged_at}", file=sys.stderr)
        return EXIT_NUMERIC
    print(f"initial val loss {result.initial_val_loss:.6g}  final val loss {result.final_val_loss:.6g}")
    return EXIT_OK


# -- sweep ---------------------------------------------------------------------

SWEEP_COLUMNS = ("width", "depth", "batch", "steps", "base_lr", "seed", "final_loss", "status")


def cmd_sweep(args) -> int:
    base = experiment_config(args)
    widths = args.widths or [base.width]
    lrs = args.lrs or [base.base_lr]
    batches = args.batches or [base.batch]
    steps = args.steps_grid or [base.steps]
    seeds = args.seeds or [base.seed]
    try:
        configs = [
            dataclasses.replace(base, width=w, base_lr=lr, batch=b, steps=s, seed=sd, output_dir=None)
            for w in widths for b in batches for s in steps for lr in lrs for sd in seeds
        ]
    except ContractError as exc:
        raise UsageError(str(exc)) from None
    rows = run_sweep(configs, parallel=args.parallel, max_workers=kernels.thread_cap())
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SWEEP_COLUMNS)
    for r in rows:
        w.writerow([r.width, r.depth, r.batch, r.steps, repr(r.base_lr), r.seed, repr(r.final_loss), r.status])
    best = best_lr_by_width(rows)
    if base.output_dir:
        out = Path(base.output_dir)
        _write(out / "summary.csv", buf.getvalue())
        _write(out / "best_lr.json", _dump_json({str(k): {"base_lr": v[0], "grid_index": v[1]} for k, v in best.items()}))
    else:
        sys.stdout.write(buf.getvalue())
    for width, (lr, idx) in best.items():
        print(f"width {width}: best base_lr {lr:g} (grid index {idx})")
    failed = [r for r in rows if r.status != "ok"]
    if failed:
        print(f"{len(failed)} of {len(rows)} runs failed or diverged", file=sys.stderr)
    return EXIT_OK


# -- report --------------------------------------------------------------------


def band_spec_from_manifest(manifest: dict, lower: float, upper: float, start_step: int | None = None) -> BandSpec:
    cfg = ExperimentConfig(**{k: (tuple(v) if k == "grid" else v) for k, v in manifest["config"].items()})
    sched = cfg.schedule()
    return BandSpec(
        reference=manifest["lr_multipliers"],
        lower_factor=lower,
        upper_factor=upper,
        schedule=lambda step: lr_at(step, sched) / cfg.base_lr,
        start_step=sched.warmup_steps + 1 if start_step is None else start_step,
    )


def band_spec_from_trace(trace, lower: float, upper: float, start_step: int | None = None) -> BandSpec:
    per_param: dict[str, list[float]] = {}
    for rec in trace:
        for name, st in rec.stats.items():
            per_param.setdefault(name, []).append(st.update_rms)
    return BandSpec({k: statistics.median(v) for k, v in per_param.items()}, lower, upper,
                    start_step=start_step or 0)


def cmd_report(args) -> int:
    trace_path = Path(args.trace)
    text = trace_path.read_text()
    try:
        trace = parse_trace_csv(text)
    except ValueError as exc:
        print(f"error: {trace_path}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    if not trace:
        print(f"error: {trace_path}: trace has no records", file=sys.stderr)
        return EXIT_USAGE
    manifest_path = Path(args.manifest) if args.manifest else trace_path.with_name("run.json")
    if manifest_path.exists():
        band = band_spec_from_manifest(json.loads(manifest_path.read_text()), args.lower, args.upper, args.start_step)
    else:
        band = band_spec_from_trace(trace, args.lower, args.upper, args.start_step)
    report = band_report(trace, band)
    text = report_json(report)
    if args.output:
        _write(Path(args.output), text)
    else:
        sys.stdout.write(text)
    counts = {s: sum(1 for r in report.values() if r.status == s) for s in ("InBand", "Escaped", "Exempt")}
    print(f"{counts['InBand']} in band, {counts['Escaped']} escaped, {counts['Exempt']} exempt", file=sys.stderr)
    for r in report.values():
        if r.status == "Escaped":
            print(f"  ESCAPED {r.param} at step {r.escape_step}", file=sys.stderr)
    return EXIT_OK


# -- ema-combine ---------------------------------------------------------------


def cmd_ema_combine(args) -> int:
    manifest_path = Path(args.manifest)
    spec = json.loads(manifest_path.read_text())
    alpha = float(args.alpha if args.alpha is not None else spec.get("alpha", DEFAULT_ALPHA))
    dirs = [manifest_path.parent / d for d in spec["checkpoints"]]
    if not dirs:
        raise UsageError("manifest lists no checkpoints")
    refs, template = [], None
    for d in dirs:
        params, meta = _load_checkpoint(d)
        template = template or params
        sphere = frozenset(p.name for p in params if p.kind is ParamKind.NORM_PRESERVING)
        refs.append(CheckpointRef(int(meta["step"]), {p.name: p.value for p in params}, sphere))
    try:
        averaged, weights = combine(refs, alpha)
    except ContractError as exc:
        raise UsageError(str(exc)) from None
    out = Path(args.output_dir)
    combined = [
        ParamTensor(p.name, averaged[p.name], p.kind, p.lr_multiplier, zero_init=p.zero_init)
        for p in template
    ]
    save_checkpoint(out / "checkpoint", combined, max(weights))
    step_to_dir = {r.step: str(spec["checkpoints"][i]) for i, r in enumerate(refs)}
    table = {
        "alpha": alpha,
        "weights": [{"step": s, "weight": w, "checkpoint": step_to_dir[s]} for s, w in sorted(weights.items())],
    }
    _write(out / "weights.json", _dump_json(table))
    print(f"combined {len(refs)} checkpoints with alpha={alpha:g} into {out / 'checkpoint'}")
    return EXIT_OK


# -- cluster -------------------------------------------------------------------


def cmd_cluster(args) -> int:
    x = _read_dmat(args.input)
    try:
        cfg = KmeansConfig(
            K=args.k, J=args.subsamples, batch_size=args.batch_size, iterations=args.iters,
            subsample_fraction=args.subsample_fraction,
        )
    except ContractError as exc:
        raise UsageError(str(exc)) from None
    res = fit(x, cfg, RngStream(args.seed))
    out = Path(args.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["row_index", "cluster"])
    w.writerows(enumerate(res.assignments.tolist()))
    _write(out / "assignments.csv", buf.getvalue())
    write_dmat(out / "centroids.dmat", res.centroids)
    stats = {
        "inertia": res.inertia,
        "n_points": int(x.shape[0]),
        "dim": int(x.shape[1]),
        "k": cfg.K,
        "iterations": res.state.iteration,
        "events": [e.to_json() for e in res.events],
    }
    _write(out / "stats.json", _dump_json(stats))
    print(f"inertia {res.inertia:.6g}; {len(res.events)} maintenance events")
    return EXIT_OK


# -- rope-dump -----------------------------------------------------------------


def cmd_rope_dump(args) -> int:
    seed = layer_seed(args.seed, args.layer)
    try:
        spec = RopeLayerSpec.build(
            args.head_dim, args.heads, seed=seed, omega_min=args.omega_min,
            omega_max=args.omega_max, zero_fraction=args.zero_fraction,
        )
    except ContractError as exc:
        raise UsageError(str(exc)) from None
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["band", "x", "y", "z", "omega", "masked"])
    for h in range(spec.n_heads):
        for k in range(spec.n_bands):
            ax = spec.axes[h, k]
            w.writerow([h * spec.n_bands + k, repr(float(ax[0])), repr(float(ax[1])), repr(float(ax[2])),
                        repr(float(spec.freqs[k])), int(spec.zero_mask[k])])
    if args.output:
        _write(Path(args.output), buf.getvalue())
    else:
        sys.stdout.write(buf.getvalue())
    return EXIT_OK


# -- coordcheck ----------------------------------------------------------------


def cmd_coordcheck(args) -> int:
    table = coordinate_check(args.widths, args.steps, seed=args.seed, depth=args.depth, base_lr=args.base_lr)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["width", "step", "activation_rms"])
    for (width, step), v in sorted(table.items()):
        w.writerow([width, step, repr(v)])
    if args.output:
        _write(Path(args.output), buf.getvalue())
    else:
        sys.stdout.write(buf.getvalue())
    last = {width: table[(width, args.steps)] for width in args.widths}
    if any(not math.isfinite(v) for v in last.values()):
        print("warning: some widths diverged", file=sys.stderr)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="spheretrain", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train the toy block stack")
    _add_experiment_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sweep", help="grid of training runs")
    _add_experiment_flags(p)
    p.add_argument("--widths", type=_ints)
    p.add_argument("--lrs", type=_floats)
    p.add_argument("--batches", type=_ints)
    p.add_argument("--steps-grid", type=_ints)
    p.add_argument("--seeds", type=_ints)
    p.add_argument("--parallel", action="store_true")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("report", help="muP band report for a dynamics trace")
    p.add_argument("trace")
    p.add_argument("--manifest", help="run.json with lr multipliers (default: next to the trace)")
    p.add_argument("--lower", type=float, default=0.2)
    p.add_argument("--upper", type=float, default=5.0)
    p.add_argument("--start-step", type=int, help="first step checked (default: end of warmup)")
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("ema-combine", help="post-hoc EMA of saved checkpoints")
    p.add_argument("manifest", help='JSON: {"checkpoints": [dirs...], "alpha": 6.22}')
    p.add_argument("--alpha", type=float)
    p.add_argument("--output-dir", required=True)
    p.set_defaults(func=cmd_ema_combine)

    p = sub.add_parser("cluster", help="mini-batch k-means on a DMAT embedding file")
    p.add_argument("input")
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--batch-size", type=int, default=1024)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--iters", type=int)
    p.add_argument("--subsamples", type=int, default=10)
    p.add_argument("--subsample-fraction", type=float, default=0.01)
    p.add_argument("--output-dir", required=True)
    p.set_defaults(func=cmd_cluster)

    p = sub.add_parser("rope-dump", help="CSV of one layer's rotary axes")
    p.add_argument("--head-dim", type=int, default=64)
    p.add_argument("--heads", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--layer", type=int, default=0)
    p.add_argument("--zero-fraction", type=float, default=0.1)
    p.add_argument("--omega-min", type=float, default=0.2)
    p.add_argument("--omega-max", type=float, default=50.0)
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_rope_dump)

    p = sub.add_parser("coordcheck", help="hidden-activation RMS across widths")
    p.add_argument("--widths", type=_ints, default=[32, 64, 128, 256])
    p.add_argument("--steps", type=int, default=50)
    p.add_argument("--depth", type=int, default=2)
    p.add_argument("--base-lr", type=float, default=0.01)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_coordcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"spheretrain {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ArithmeticError, FloatingPointError) as exc:
        print(f"spheretrain {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, InputError, KeyError, json.JSONDecodeError) as exc:
        print(f"spheretrain {args.command}: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ContractError as exc:
        print(f"spheretrain {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
