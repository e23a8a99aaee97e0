"""Optimization problem definition: variables, objective, constraints.

A problem is a box-bounded search space of integer/real variables, a single
objective metric with a direction, and optional affine constraints over the
variables and measured metrics.  Problems are read from YAML/JSON documents.
"""
from __future__ import annotations

import ast
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ._validation import (
    DocumentError,
    check_choice,
    check_keys,
    check_number,
    line_of,
    load_tree,
)

__all__ = [
    "Variable",
    "SearchSpace",
    "ObjectiveSpec",
    "AffineExpression",
    "Constraint",
    "ProblemSpec",
    "ArityError",
    "UnknownMetricError",
    "validate_configuration",
    "check_constraints",
    "parse_problem",
    "serialize_problem",
    "DOCUMENT_KEYS",
]

#: Top-level keys accepted in a problem document.
DOCUMENT_KEYS = ("variables", "objective", "constraints", "search", "executor",
                 "sensitivity", "scenario")


class ArityError(ValueError):
    """A configuration has the wrong number of components."""


class UnknownMetricError(KeyError):
    """A constraint references a metric absent from the metrics map."""


def round_half_away(x):
    x = np.asarray(x, dtype=float)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


@dataclass(frozen=True)
class Variable:
    name: str
    kind: str
    lower: float
    upper: float

    def __post_init__(self):
        if not self.name.isidentifier():
            raise ValueError(f"variable name {self.name!r} is not an identifier")
        if self.kind not in ("integer", "real"):
            raise ValueError(f"variable kind must be 'integer' or 'real', got {self.kind!r}")
        if not (math.isfinite(self.lower) and math.isfinite(self.upper)):
            raise ValueError(f"bounds of {self.name!r} must be finite")
        if not self.lower < self.upper:
            raise ValueError(f"{self.name}: lower ({self.lower}) must be < upper ({self.upper})")
        if self.kind == "integer":
            if not (float(self.lower).is_integer() and float(self.upper).is_integer()):
                raise ValueError(f"integer variable {self.name!r} needs whole-number bounds")
            object.__setattr__(self, "lower", int(self.lower))
            object.__setattr__(self, "upper", int(self.upper))

    @property
    def is_integer(self):
        return self.kind == "integer"


@dataclass(frozen=True)
class SearchSpace:
    variables: tuple

    def __post_init__(self):
        object.__setattr__(self, "variables", tuple(self.variables))
        if not self.variables:
            raise ValueError("a search space needs at least one variable")
        names = [v.name for v in self.variables]
        dupes = sorted({n for n in names if names.count(n) > 1})
        if dupes:
            raise ValueError(f"duplicate variable names: {dupes}")

    def __len__(self):
        return len(self.variables)

    @property
    def names(self):
        return [v.name for v in self.variables]

    @property
    def lower(self):
        return np.array([v.lower for v in self.variables], dtype=float)

    @property
    def upper(self):
        return np.array([v.upper for v in self.variables], dtype=float)

    @property
    def integer_mask(self):
        return np.array([v.is_integer for v in self.variables])

    def to_unit(self, X):
        X = np.asarray(X, dtype=float)
        return (X - self.lower) / (self.upper - self.lower)

    def from_unit(self, U):
        """Scale unit-cube points to the bounds, rounding integer columns."""
        U = np.asarray(U, dtype=float)
        X = self.lower + U * (self.upper - self.lower)
        return self.snap(X)

    def snap(self, X):
        """Clamp to bounds and round integer columns (half away from zero)."""
        X = np.clip(np.asarray(X, dtype=float), self.lower, self.upper)
        mask = self.integer_mask
        if mask.any():
            X = X.copy()
            X[..., mask] = round_half_away(X[..., mask])
        return X

    def configuration(self, row):
        """Convert an array row into a configuration tuple of Python numbers."""
        return tuple(
            int(x) if v.is_integer else float(x) for v, x in zip(self.variables, row)
        )

    def as_dict(self, point):
        return dict(zip(self.names, point))


@dataclass(frozen=True)
class ObjectiveSpec:
    metric: str
    direction: str = "minimize"

    def __post_init__(self):
        if self.direction not in ("minimize", "maximize"):
            raise ValueError(f"direction must be 'minimize' or 'maximize', got {self.direction!r}")

    @property
    def sign(self):
        """Multiplier that turns the objective into a loss to minimize."""
        return 1.0 if self.direction == "minimize" else -1.0


_ALLOWED_NODES = (ast.Expression, ast.BinOp, ast.UnaryOp, ast.Add, ast.Sub, ast.Mult,
                  ast.Div, ast.USub, ast.UAdd, ast.Name, ast.Load, ast.Constant)


def _affine(node):
    """Reduce an expression node to ({name: coef}, constant); reject non-affine forms."""
    if isinstance(node, ast.Expression):
        return _affine(node.body)
    if isinstance(node, ast.Constant):
        if isinstance(node.value, bool) or not isinstance(node.value, (int, float)):
            raise ValueError(f"unsupported constant {node.value!r}")
        return {}, float(node.value)
    if isinstance(node, ast.Name):
        return {node.id: 1.0}, 0.0
    if isinstance(node, ast.UnaryOp):
        terms, const = _affine(node.operand)
        if isinstance(node.op, ast.USub):
            return {k: -v for k, v in terms.items()}, -const
        return terms, const
    if isinstance(node, ast.BinOp):
        lt, lc = _affine(node.left)
        rt, rc = _affine(node.right)
        if isinstance(node.op, (ast.Add, ast.Sub)):
            s = 1.0 if isinstance(node.op, ast.Add) else -1.0
            terms = dict(lt)
            for k, v in rt.items():
                terms[k] = terms.get(k, 0.0) + s * v
            return terms, lc + s * rc
        if isinstance(node.op, ast.Mult):
            if lt and rt:
                raise ValueError("product of two variables is not affine")
            if lt:
                return {k: v * rc for k, v in lt.items()}, lc * rc
            return {k: v * lc for k, v in rt.items()}, lc * rc
        if isinstance(node.op, ast.Div):
            if rt:
                raise ValueError("division by a variable is not affine")
            if rc == 0:
                raise ValueError("division by zero")
            return {k: v / rc for k, v in lt.items()}, lc / rc
    raise ValueError(f"unsupported syntax: {type(node).__name__}")


@dataclass(frozen=True)
class AffineExpression:
    """``constant + sum(coef * name)`` over variable and metric names."""

    terms: tuple = ()
    constant: float = 0.0

    @classmethod
    def parse(cls, text):
        try:
            tree = ast.parse(str(text), mode="eval")
        except SyntaxError as exc:
            raise ValueError(f"cannot parse expression {text!r}: {exc.msg}") from None
        for node in ast.walk(tree):
            if not isinstance(node, _ALLOWED_NODES):
                raise ValueError(f"unsupported syntax in {text!r}: {type(node).__name__}")
        terms, const = _affine(tree)
        kept = tuple(sorted((k, v) for k, v in terms.items() if v != 0.0))
        return cls(kept, const)

    @property
    def names(self):
        return [k for k, _ in self.terms]

    def evaluate(self, values):
        return self.constant + sum(c * values[k] for k, c in self.terms)

    def __str__(self):
        parts = []
        for name, coef in self.terms:
            sign = "-" if coef < 0 else "+"
            mag = abs(coef)
            parts.append((sign, name if mag == 1.0 else f"{mag!r}*{name}"))
        if self.constant != 0.0 or not parts:
            sign = "-" if self.constant < 0 else "+"
            parts.append((sign, repr(abs(self.constant))))
        first_sign, first = parts[0]
        text = ("-" if first_sign == "-" else "") + first
        for sign, body in parts[1:]:
            text += f" {sign} {body}"
        return text


@dataclass(frozen=True)
class Constraint:
    kind: str
    expression: AffineExpression
    tolerance: float = 0.0

    def __post_init__(self):
        if self.kind not in ("inequality", "equality"):
            raise ValueError(f"constraint kind must be 'inequality' or 'equality', got {self.kind!r}")
        if isinstance(self.expression, str):
            object.__setattr__(self, "expression", AffineExpression.parse(self.expression))
        if self.tolerance < 0:
            raise ValueError("tolerance must be >= 0")
        if self.kind == "equality" and not self.tolerance > 0:
            raise ValueError("equality constraints need a strictly positive tolerance")

    def is_satisfied(self, values):
        g = self.expression.evaluate(values)
        if self.kind == "inequality":
            return g <= 0.0
        return abs(g) <= self.tolerance

    def __str__(self):
        if self.kind == "inequality":
            return f"{self.expression} <= 0"
        return f"|{self.expression}| <= {self.tolerance!r}"


@dataclass(frozen=True)
class ProblemSpec:
    space: SearchSpace
    objective: ObjectiveSpec
    constraints: tuple = field(default=())

    def __post_init__(self):
        object.__setattr__(self, "constraints", tuple(self.constraints))
        for c in self.constraints:
            for ref in c.expression.names:
                if not ref.isidentifier():
                    raise ValueError(f"bad reference {ref!r} in constraint {c}")

    @property
    def config_constraints(self):
        """Constraints that reference variables only (checkable before evaluation)."""
        names = set(self.space.names)
        return [c for c in self.constraints if set(c.expression.names) <= names]

    @property
    def metric_constraints(self):
        names = set(self.space.names)
        return [c for c in self.constraints if not set(c.expression.names) <= names]


def validate_configuration(space, point):
    """Return the list of bound/integrality violations of ``point`` (empty when ok).

    Raises ArityError when the point has the wrong number of components.
    """
    point = tuple(point)
    if len(point) != len(space):
        raise ArityError(f"configuration has {len(point)} values, space has {len(space)} variables")
    violations = []
    for var, x in zip(space.variables, point):
        x = float(x)
        if not math.isfinite(x):
            violations.append(f"{var.name}={x} is not finite")
            continue
        if x < var.lower:
            violations.append(f"{var.name}={x:g} below lower bound {var.lower}")
        elif x > var.upper:
            violations.append(f"{var.name}={x:g} above upper bound {var.upper}")
        if var.is_integer and not x.is_integer():
            violations.append(f"{var.name}={x:g} is not a whole number")
    return violations


def check_constraints(spec, point, metrics):
    """Return the constraints violated by ``point``/``metrics`` (empty when feasible)."""
    values = dict(metrics)
    values.update(spec.space.as_dict(point))
    for c in spec.constraints:
        missing = [n for n in c.expression.names if n not in values]
        if missing:
            raise UnknownMetricError(f"unknown metric {missing[0]!r} in constraint {c}")
    return [c for c in spec.constraints if not c.is_satisfied(values)]


# -- document parsing -------------------------------------------------------

def _parse_variables(node):
    if not isinstance(node, list) or not node:
        raise DocumentError("invalid_value", "variables must be a non-empty list", line_of(node))
    out, seen = [], {}
    for i, item in enumerate(node):
        where = f"variables[{i}]"
        check_keys(item, where, required=("name", "kind", "lower", "upper"))
        line = line_of(item)
        name = item["name"]
        if not isinstance(name, str) or not name.isidentifier():
            raise DocumentError("invalid_value", f"{where}.name must be an identifier", line)
        if name in seen:
            raise DocumentError(
                "duplicate_name",
                f"duplicate variable name {name!r} (first declared on line {seen[name]})",
                line,
            )
        seen[name] = line
        kind = check_choice(item["kind"], f"{where}.kind", {"integer", "real"}, line_of(item, "kind"))
        integer = kind == "integer"
        lower = check_number(item["lower"], f"{where}.lower", line_of(item, "lower"), integer=integer)
        upper = check_number(item["upper"], f"{where}.upper", line_of(item, "upper"), integer=integer)
        if not lower < upper:
            raise DocumentError(
                "bound_inversion",
                f"variable {name!r}: lower ({lower}) must be strictly below upper ({upper})",
                line,
            )
        out.append(Variable(name, kind, lower, upper))
    return SearchSpace(tuple(out))


def _parse_objective(node):
    check_keys(node, "objective", required=("metric", "direction"))
    metric = node["metric"]
    if not isinstance(metric, str) or not metric.isidentifier():
        raise DocumentError("invalid_value", "objective.metric must be an identifier", line_of(node, "metric"))
    direction = check_choice(node["direction"], "objective.direction",
                             {"minimize", "maximize"}, line_of(node, "direction"))
    return ObjectiveSpec(metric, direction)


def _parse_constraints(node):
    if node is None:
        return ()
    if not isinstance(node, list):
        raise DocumentError("invalid_value", "constraints must be a list", line_of(node))
    out = []
    for i, item in enumerate(node):
        where = f"constraints[{i}]"
        check_keys(item, where, required=("kind", "expression"), optional=("tolerance",))
        kind = check_choice(item["kind"], f"{where}.kind", {"inequality", "equality"},
                            line_of(item, "kind"))
        tol = item.get("tolerance", 0.0)
        tol = check_number(tol, f"{where}.tolerance", line_of(item, "tolerance"), minimum=0)
        try:
            out.append(Constraint(kind, AffineExpression.parse(item["expression"]), float(tol)))
        except ValueError as exc:
            raise DocumentError("invalid_value", f"{where}: {exc}", line_of(item)) from None
    return tuple(out)


def read_document(source):
    """Load a document from a path, YAML/JSON text, or an already-parsed mapping."""
    if isinstance(source, dict):
        return source
    if isinstance(source, Path) or (isinstance(source, str) and "\n" not in source
                                    and Path(source).suffix in (".yaml", ".yml", ".json")):
        try:
            text = Path(source).read_text()
        except OSError as exc:
            raise DocumentError("malformed", f"cannot read {source}: {exc.strerror}") from None
        return load_tree(text)
    return load_tree(source)


def parse_problem(source):
    """Parse and validate the problem part of a document into a ProblemSpec.

    ``source`` may be a path, document text, or a parsed mapping.  The whole
    top level is checked for unknown keys; the ``search``/``executor`` sections
    are validated by their own modules.
    """
    tree = read_document(source)
    check_keys(tree, "document", required=("variables", "objective"),
               optional=[k for k in DOCUMENT_KEYS if k not in ("variables", "objective")])
    space = _parse_variables(tree["variables"])
    objective = _parse_objective(tree["objective"])
    constraints = _parse_constraints(tree.get("constraints"))
    try:
        return ProblemSpec(space, objective, constraints)
    except ValueError as exc:
        raise DocumentError("invalid_value", str(exc)) from None


def problem_to_dict(spec):
    return {
        "variables": [
            {"name": v.name, "kind": v.kind, "lower": v.lower, "upper": v.upper}
            for v in spec.space.variables
        ],
        "objective": {"metric": spec.objective.metric, "direction": spec.objective.direction},
        "constraints": [
            {"kind": c.kind, "expression": str(c.expression), "tolerance": c.tolerance}
            for c in spec.constraints
        ],
    }


def serialize_problem(spec):
    """Serialize a ProblemSpec to document text accepted by parse_problem."""
    return json.dumps(problem_to_dict(spec), indent=2) + "\n"


def as_configuration(space, point):
    """Coerce a sequence to a configuration tuple, validating arity and bounds."""
    point = tuple(point)
    problems = validate_configuration(space, point)
    if problems:
        raise ValueError("; ".join(problems))
    return tuple(
        int(x) if v.is_integer else float(x) for v, x in zip(space.variables, point)
    )
