"""One-at-a-time sensitivity analysis around a base configuration."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from numbers import Real

from ._validation import DocumentError, check_keys, check_number, line_of

__all__ = ["OatPlan", "PlanError", "Effect", "EffectTable", "expand", "analyze"]


class PlanError(ValueError):
    """An OAT plan is inconsistent with the search space."""


@dataclass(frozen=True)
class OatPlan:
    base: tuple | None = None
    deltas: tuple = ()  # ((variable, (offset, ...)), ...)
    repeats: int = 1

    def __post_init__(self):
        if int(self.repeats) != self.repeats or self.repeats < 1:
            raise PlanError("repeats must be a positive integer")
        seen = set()
        for name, offsets in self.deltas:
            if name in seen:
                raise PlanError(f"variable {name!r} listed twice")
            seen.add(name)
            if len(set(offsets)) != len(offsets):
                raise PlanError(f"duplicate offsets for {name!r}")
            if any(isinstance(o, bool) or not isinstance(o, Real) or not math.isfinite(o)
                   for o in offsets):
                raise PlanError(f"offsets for {name!r} must be finite numbers")

    @classmethod
    def from_dict(cls, node, space):
        check_keys(node, "sensitivity", optional=("deltas", "base", "repeats"))
        deltas_node = node.get("deltas") or {}
        check_keys(deltas_node, "sensitivity.deltas", optional=space.names)
        deltas = []
        for name in space.names:
            if name not in deltas_node:
                continue
            offsets = deltas_node[name]
            line = line_of(deltas_node, name)
            if not isinstance(offsets, list):
                raise DocumentError("invalid_value", f"sensitivity.deltas.{name} must be a list", line)
            integer = space.variables[space.names.index(name)].is_integer
            vals = tuple(check_number(o, f"sensitivity.deltas.{name}", line, integer=integer)
                         for o in offsets)
            deltas.append((name, vals))
        base = None
        if node.get("base") is not None:
            check_keys(node["base"], "sensitivity.base", required=space.names)
            base = tuple(node["base"][n] for n in space.names)
        repeats = check_number(node.get("repeats", 1), "sensitivity.repeats",
                               line_of(node, "repeats"), integer=True, minimum=1)
        try:
            plan = cls(base, tuple(deltas), repeats)
            if base is not None:
                plan.validate(space)
        except PlanError as exc:
            raise DocumentError("invalid_value", f"sensitivity: {exc}", line_of(node)) from None
        return plan

    def with_base(self, base):
        return OatPlan(tuple(base), self.deltas, self.repeats)

    def validate(self, space):
        """Raise :class:`PlanError` naming the first out-of-bounds (variable, offset) pair."""
        if self.base is None:
            raise PlanError("plan has no base configuration")
        if len(self.base) != len(space):
            raise PlanError(f"base has {len(self.base)} values, space has {len(space)} variables")
        for v, x in zip(space.variables, self.base):
            if not v.lower <= x <= v.upper:
                raise PlanError(f"base value {x} of {v.name!r} is outside [{v.lower}, {v.upper}]")
        for name, offsets in self.deltas:
            if name not in space.names:
                raise PlanError(f"unknown variable {name!r}")
            j = space.names.index(name)
            var = space.variables[j]
            for o in offsets:
                if var.is_integer and float(o) != int(o):
                    raise PlanError(f"({name}, {o}): integer variable needs integer offsets")
                x = self.base[j] + o
                if not var.lower <= x <= var.upper:
                    raise PlanError(
                        f"({name}, {o:+g}) gives {x}, outside [{var.lower}, {var.upper}]")


def expand(plan, space):
    """``[(None, base), (variable, config), ...]``: variables in space order, offsets ascending."""
    plan.validate(space)
    base = space.configuration(plan.base)
    out = [(None, base)]
    deltas = dict(plan.deltas)
    for j, name in enumerate(space.names):
        for o in sorted(deltas.get(name, ())):
            if o == 0:
                continue
            point = list(base)
            point[j] = base[j] + o
            out.append((name, space.configuration(point)))
    return out


@dataclass(frozen=True)
class Effect:
    variable: str
    offset: float
    value: float  # the variable's value in this configuration
    metric: str
    base: float
    result: float

    @property
    def delta(self):
        return self.result - self.base

    @property
    def relative(self):
        if self.base == 0:
            return math.nan if self.delta else 0.0
        return self.delta / self.base


@dataclass
class EffectTable:
    effects: list
    best: dict  # variable -> best offset for the objective
    objective: str
    direction: str
    base_config: dict = None
    base_metrics: dict = None

    def rows(self, metric=None):
        return [e for e in self.effects if metric is None or e.metric == metric]

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["variable", "offset", "value", "metric", "base", "result", "delta",
                    "relative", "best"])
        for name, v in (self.base_metrics or {}).items():
            w.writerow(["(base)", 0, "", name, repr(v), repr(v), repr(0.0), repr(0.0), 0])
        for e in self.effects:
            best = e.metric == self.objective and self.best.get(e.variable) == e.offset
            w.writerow([e.variable, _num(e.offset), _num(e.value), e.metric, repr(e.base),
                        repr(e.result), repr(e.delta), repr(e.relative), int(best)])
        return buf.getvalue()

    def to_text(self):
        lines = [f"objective: {self.objective} ({self.direction})"]
        if self.base_config is not None:
            cfg = ", ".join(f"{k}={v}" for k, v in self.base_config.items())
            value = (self.base_metrics or {}).get(self.objective)
            lines.append(f"base: {cfg} -> {self.objective} = {value!r}")
        obj = self.rows(self.objective)
        if not obj:
            lines.append("base only: no variations evaluated")
        for var in dict.fromkeys(e.variable for e in obj):
            lines.append(f"\n{var}:")
            lines.append(f"  {'offset':>7} {'value':>8} {self.objective:>20} {'change':>9}")
            for e in (x for x in obj if x.variable == var):
                mark = "  <- best" if self.best.get(var) == e.offset else ""
                lines.append(f"  {_num(e.offset):>7} {_num(e.value):>8} {e.result:>20.6g} "
                             f"{100 * e.relative:>8.2f}%{mark}")
        return "\n".join(lines) + "\n"


def _num(x):
    return str(int(x)) if float(x).is_integer() else repr(float(x))


def _metrics_of(m):
    return m.metrics() if hasattr(m, "metrics") else dict(m)


def analyze(results, space, objective):
    """Effects of each single-variable change relative to the base.

    ``results`` is a list of ``(variable, configuration, metrics)`` where the
    base has variable ``None`` and metrics is a mapping or MetricsReport.
    Every variable's offset-0 row is the base itself.
    """
    base = [r for r in results if r[0] is None]
    if not base:
        raise PlanError("results do not include the base configuration")
    if len(base) > 1:
        raise PlanError("results include more than one base row")
    _, base_cfg, base_m = base[0]
    base_m = _metrics_of(base_m)
    sign = 1 if objective.direction == "minimize" else -1
    by_var = {}
    for var, cfg, m in results:
        if var is None:
            continue
        j = space.names.index(var)
        by_var.setdefault(var, []).append((cfg[j] - base_cfg[j], cfg[j], _metrics_of(m)))
    effects, best = [], {}
    for var in space.names:
        if var not in by_var:
            continue
        j = space.names.index(var)
        rows = sorted(by_var[var] + [(0, base_cfg[j], base_m)], key=lambda r: r[0])
        for off, val, m in rows:
            for name in base_m:
                if name in m:
                    effects.append(Effect(var, off, val, name, base_m[name], m[name]))
        key = objective.metric
        if not any(key in r[2] and math.isfinite(r[2][key]) for r in rows):
            continue
        best[var] = min(
            (r for r in rows if key in r[2] and math.isfinite(r[2][key])),
            key=lambda r: (sign * r[2][key], abs(r[0]), r[0]),
        )[0]
    return EffectTable(effects, best, objective.metric, objective.direction,
                       dict(zip(space.names, base_cfg)), base_m)
