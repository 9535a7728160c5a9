"""muP learning-rate rules, batch/duration scaling and the update-RMS band monitor."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from fnmatch import fnmatchcase
from fractions import Fraction
from typing import Callable, Iterable, Mapping

from .errors import ConfigError, ContractError

BASE_LR = 0.01
TRACE_COLUMNS = ("step", "param_name", "grad_norm", "weight_norm", "update_rms", "activation_rms")


@dataclass(frozen=True)
class MupRule:
    """Glob pattern and the learning rate it assigns.

    The rate is ``factor * base_lr / width`` when ``width_scaled`` is set and
    ``factor * base_lr`` otherwise.
    """

    pattern: str
    factor: float
    width_scaled: bool
    zero_init: bool = False
    label: str = ""

    def lr(self, base_lr: float, width: int) -> float:
        lr = self.factor * base_lr
        return lr / width if self.width_scaled else lr


DEFAULT_RULES: tuple[MupRule, ...] = (
    MupRule("*lambda*", 0.01, False, label="scalar"),
    MupRule("*pos_embed*", 0.01, False, zero_init=True, label="positional"),
    MupRule("*.modulation.2.bias", 0.01, False, zero_init=True, label="modulation-out bias"),
    MupRule("*.bias", 0.01, False, label="bias"),
    MupRule("input_proj.weight", 1.0, True, label="input"),
    MupRule("final_proj.weight", 1.0, True, label="output"),
    MupRule("blocks.*.unified.weight", 1.0, True, label="unified"),
    MupRule("blocks.*.modulation.2.weight", 0.1, True, zero_init=True, label="modulation-out"),
    MupRule("blocks.*.weight", 0.1, True, label="intermediate"),
    MupRule("*", 1.0, True, label="matrix"),
)


@dataclass
class MupRuleSet:
    """Ordered rules; the first whose pattern matches a name wins."""

    base_lr: float = BASE_LR
    width: int = 1
    rules: tuple[MupRule, ...] = DEFAULT_RULES
    assigned: dict[str, MupRule] = field(default_factory=dict)

    def match(self, name: str) -> MupRule:
        for rule in self.rules:
            if fnmatchcase(name, rule.pattern):
                return rule
        raise ConfigError(f"no learning-rate rule matches parameter {name!r}")

    def lr_for(self, name: str) -> float:
        return self.match(name).lr(self.base_lr, self.width)


def assign_rules(params, width: int, base_lr: float = BASE_LR, rules=DEFAULT_RULES) -> MupRuleSet:
    """Set ``lr_multiplier`` and ``zero_init`` on every parameter.

    Raises :class:`ConfigError` naming the first parameter no rule matches.
    """
    if width < 1:
        raise ContractError("width must be >= 1")
    ruleset = MupRuleSet(base_lr=base_lr, width=width, rules=tuple(rules))
    for p in params:
        rule = ruleset.match(p.name)
        p.lr_multiplier = rule.lr(base_lr, width)
        p.zero_init = rule.zero_init
        ruleset.assigned[p.name] = rule
    return ruleset


def scale_lr(base_lr: float, batch: int, batch_ref: int, steps: int, steps_ref: int) -> float:
    """Transfer a learning rate: ``lr * sqrt(B / B_ref) * sqrt(T_ref / T)``."""
    if min(batch, batch_ref, steps, steps_ref) < 1:
        raise ContractError("batch and step counts must be >= 1")
    ratio = Fraction(batch * steps_ref, batch_ref * steps)
    root = math.isqrt(ratio.numerator), math.isqrt(ratio.denominator)
    if root[0] ** 2 == ratio.numerator and root[1] ** 2 == ratio.denominator:
        return base_lr * root[0] / root[1]
    return base_lr * math.sqrt(ratio.numerator / ratio.denominator)


# -- training dynamics ---------------------------------------------------------


@dataclass(frozen=True)
class ParamStats:
    grad_norm: float
    weight_norm: float
    update_rms: float
    activation_rms: float


@dataclass
class DynamicsRecord:
    step: int
    stats: dict[str, ParamStats]


@dataclass(frozen=True)
class BandSpec:
    """Acceptable update RMS per parameter: ``[lower * ref, upper * ref]``.

    ``reference`` maps parameter names to the predicted update RMS at full
    learning rate; ``schedule`` (optional) gives the fraction of full rate in
    effect at a step and scales the reference. Steps before ``start_step``
    are not checked.
    """

    reference: Mapping[str, float]
    lower_factor: float = 0.2
    upper_factor: float = 5.0
    schedule: Callable[[int], float] | None = None
    start_step: int = 0

    def __post_init__(self):
        if not 0 < self.lower_factor < 1 < self.upper_factor:
            raise ContractError("need 0 < lower_factor < 1 < upper_factor")
        if self.start_step < 0:
            raise ContractError("start_step must be >= 0")


@dataclass(frozen=True)
class BandStatus:
    param: str
    status: str  # "InBand" | "Escaped" | "Exempt"
    escape_step: int | None = None

    def to_json(self) -> dict:
        out = {"param": self.param, "status": self.status}
        if self.escape_step is not None:
            out["escape_step"] = self.escape_step
        return out


def is_band_exempt(name: str) -> bool:
    """Modulation and lambda parameters legitimately leave the band."""
    return "lambda" in name or "modulation" in name


def band_report(trace: list[DynamicsRecord], band: BandSpec, exempt=is_band_exempt) -> dict[str, BandStatus]:
    """Classify every parameter in ``trace`` as InBand, Escaped or Exempt.

    A parameter escapes at the first step whose update RMS leaves its band.
    Records with an exactly zero gradient norm are skipped.
    """
    if not trace:
        raise ContractError("empty trace")
    names: list[str] = []
    for rec in trace:
        for name in rec.stats:
            if name not in names:
                names.append(name)
    report = {}
    for name in names:
        if exempt(name):
            report[name] = BandStatus(name, "Exempt")
            continue
        if name not in band.reference:
            raise ConfigError(f"no band reference for {name!r}")
        ref = band.reference[name]
        escape = None
        for rec in sorted(trace, key=lambda r: r.step):
            st = rec.stats.get(name)
            if st is None or st.grad_norm == 0.0 or rec.step < band.start_step:
                continue  # no gradient, no update to judge
            scale = ref if band.schedule is None else ref * band.schedule(rec.step)
            if not band.lower_factor * scale <= st.update_rms <= band.upper_factor * scale:
                escape = rec.step
                break
        report[name] = BandStatus(name, "InBand" if escape is None else "Escaped", escape)
    return report


def report_json(report: Mapping[str, BandStatus]) -> str:
    return json.dumps([s.to_json() for s in report.values()], indent=2) + "\n"


REPORT_SCHEMA = {
    "type": "array",
    "items": {
        "type": "object",
        "properties": {
            "param": {"type": "string"},
            "status": {"enum": ["InBand", "Escaped", "Exempt"]},
            "escape_step": {"type": "integer", "minimum": 0},
        },
        "required": ["param", "status"],
        "additionalProperties": False,
    },
}


def _fmt(x: float) -> str:
    return repr(float(x))


def trace_csv(trace: Iterable[DynamicsRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TRACE_COLUMNS)
    for rec in trace:
        for name, st in rec.stats.items():
            w.writerow(
                [rec.step, name, _fmt(st.grad_norm), _fmt(st.weight_norm),
                 _fmt(st.update_rms), _fmt(st.activation_rms)]
            )
    return buf.getvalue()


def parse_trace_csv(text: str) -> list[DynamicsRecord]:
    """Parse the dynamics CSV; errors name the offending line."""
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header is None or tuple(header) != TRACE_COLUMNS:
        raise ValueError(f"line 1: expected header {','.join(TRACE_COLUMNS)}")
    records: dict[int, DynamicsRecord] = {}
    for lineno, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != len(TRACE_COLUMNS):
            raise ValueError(f"line {lineno}: expected {len(TRACE_COLUMNS)} fields, got {len(row)}")
        try:
            step = int(row[0])
            vals = [float(v) for v in row[2:]]
        except ValueError as exc:
            raise ValueError(f"line {lineno}: {exc}") from None
        if step < 0 or not all(math.isfinite(v) and v >= 0 for v in vals):
            raise ValueError(f"line {lineno}: values must be finite and non-negative")
        rec = records.setdefault(step, DynamicsRecord(step, {}))
        rec.stats[row[1]] = ParamStats(*vals)
    return [records[s] for s in sorted(records)]


def coordinate_check(widths, steps: int, task=None, seed: int = 0, **overrides) -> dict[tuple[int, int], float]:
    """Hidden-activation RMS at every ``(width, step)`` of short toy trainings.

    Step 0 is the initialization. A width whose run diverges maps its
    remaining steps to ``nan`` instead of aborting the check.
    """
    from .train import ExperimentConfig, train  # local: train imports this module

    if len(widths) < 1 or steps < 0:
        raise ContractError("need at least one width and steps >= 0")
    table: dict[tuple[int, int], float] = {}
    for width in widths:
        cfg = ExperimentConfig(width=width, steps=steps, seed=seed, **overrides)
        if task is not None:
            cfg = cfg.with_task(task)
        result = train(cfg, record_trace=False)
        for step, value in enumerate(result.hidden_rms):
            table[(width, step)] = value
        for step in range(len(result.hidden_rms), steps + 1):
            table[(width, step)] = math.nan
    return table
