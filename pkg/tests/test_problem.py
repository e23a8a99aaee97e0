import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from contune._validation import DocumentError
from contune.problem import (
    AffineExpression,
    ArityError,
    Constraint,
    ObjectiveSpec,
    ProblemSpec,
    SearchSpace,
    UnknownMetricError,
    Variable,
    check_constraints,
    parse_problem,
    serialize_problem,
    validate_configuration,
)
from contune.runner import scenario_path

DOC = """\
variables:
  - {name: http, kind: integer, lower: 20, upper: 60}
  - {name: download, kind: integer, lower: 20, upper: 60}
objective:
  metric: response_time_mean
  direction: minimize
"""


def test_preliminary_optimum_is_valid(space):
    assert validate_configuration(space, (54, 54, 7, 53)) == []


def test_all_lower_bounds_valid(space):
    assert validate_configuration(space, (20, 20, 3, 20)) == []


def test_single_bound_violation_names_variable(space):
    problems = validate_configuration(space, (61, 20, 3, 20))
    assert len(problems) == 1
    assert problems[0].startswith("http=")


def test_every_violation_listed(space):
    problems = validate_configuration(space, (61, 19, 3.5, 20))
    assert [p.split("=")[0] for p in problems] == ["http", "download", "extract"]


def test_arity_mismatch_is_structural(space):
    with pytest.raises(ArityError):
        validate_configuration(space, (40, 40, 7))


def test_response_time_constraint():
    space = SearchSpace((Variable("x", "real", 0, 1),))
    spec = ProblemSpec(space, ObjectiveSpec("response_time"),
                       (Constraint("inequality", "response_time - 4.0"),))
    assert check_constraints(spec, (0.5,), {"response_time": 2.657}) == []
    assert check_constraints(spec, (0.5,), {"response_time": 4.0}) == []
    assert len(check_constraints(spec, (0.5,), {"response_time": 4.01})) == 1


def test_equality_identity_feasible():
    space = SearchSpace((Variable("x1", "real", 0, 1), Variable("x2", "real", 0, 1)))
    spec = ProblemSpec(space, ObjectiveSpec("f"),
                       (Constraint("equality", "x1 - x2", 1e-9),))
    assert check_constraints(spec, (0.3, 0.3), {}) == []
    assert check_constraints(spec, (0.3, 0.4), {}) != []


def test_unknown_metric():
    space = SearchSpace((Variable("x", "real", 0, 1),))
    spec = ProblemSpec(space, ObjectiveSpec("f"), (Constraint("inequality", "latency - 1"),))
    with pytest.raises(UnknownMetricError):
        check_constraints(spec, (0.5,), {"f": 1.0})


def test_equality_needs_positive_tolerance():
    with pytest.raises(ValueError):
        Constraint("equality", "x", 0.0)


@pytest.mark.parametrize("text", ["x * y", "x / y", "x ** 2", "f(x)", "x < 1", "'a'"])
def test_non_affine_rejected(text):
    with pytest.raises(ValueError):
        AffineExpression.parse(text)


def test_affine_normal_form():
    e = AffineExpression.parse("2*(x - 1) + y/4 - x")
    assert dict(e.terms) == {"x": 1.0, "y": 0.25}
    assert e.constant == -2.0
    assert AffineExpression.parse(str(e)) == e


def test_shipped_scenario_parses_to_eq2_bounds():
    spec = parse_problem(scenario_path("plantnet"))
    assert spec.space.names == ["http", "download", "extract", "simsearch"]
    bounds = {v.name: (v.kind, v.lower, v.upper) for v in spec.space.variables}
    assert bounds == {"http": ("integer", 20, 60), "download": ("integer", 20, 60),
                      "extract": ("integer", 3, 9), "simsearch": ("integer", 20, 60)}
    assert spec.objective == ObjectiveSpec("response_time_mean", "minimize")


def test_degenerate_bound_rejected():
    doc = DOC.replace("lower: 20, upper: 60}\n  - {name: download", "lower: 30, upper: 30}\n  - {name: download")
    with pytest.raises(DocumentError) as err:
        parse_problem(doc)
    assert err.value.code == "bound_inversion"
    assert err.value.line == 2


def test_missing_direction():
    with pytest.raises(DocumentError) as err:
        parse_problem(DOC.replace("  direction: minimize\n", ""))
    assert err.value.code == "missing_field"
    assert "objective.direction" in str(err.value)


def test_duplicate_name():
    with pytest.raises(DocumentError) as err:
        parse_problem(DOC.replace("name: download", "name: http"))
    assert err.value.code == "duplicate_name"
    assert err.value.line == 3


def test_unknown_top_level_key():
    with pytest.raises(DocumentError) as err:
        parse_problem(DOC + "extras: 1\n")
    assert err.value.code == "unknown_key"
    assert err.value.line == 7


def test_malformed_document():
    with pytest.raises(DocumentError) as err:
        parse_problem("variables: [\n")
    assert err.value.code == "malformed"


def test_json_document_accepted():
    doc = json.dumps({"variables": [{"name": "a", "kind": "real", "lower": 0, "upper": 1}],
                      "objective": {"metric": "m", "direction": "maximize"}})
    spec = parse_problem(doc)
    assert spec.objective.sign == -1.0


names = st.sampled_from(["a", "b", "c", "d", "http", "extract"])


@st.composite
def specs(draw):
    chosen = draw(st.lists(names, min_size=1, max_size=4, unique=True))
    variables = []
    for n in chosen:
        if draw(st.booleans()):
            lo = draw(st.integers(-50, 50))
            variables.append(Variable(n, "integer", lo, lo + draw(st.integers(1, 50))))
        else:
            lo = draw(st.floats(-1e3, 1e3, allow_nan=False))
            hi = lo + draw(st.floats(1e-3, 1e3))
            variables.append(Variable(n, "real", lo, hi))
    cons = []
    if draw(st.booleans()):
        c = draw(st.floats(-10, 10, allow_nan=False))
        cons.append(Constraint("inequality", f"{chosen[0]} - {c!r}"))
    if draw(st.booleans()):
        cons.append(Constraint("equality", f"2*{chosen[-1]} + m", draw(st.floats(1e-6, 1))))
    direction = draw(st.sampled_from(["minimize", "maximize"]))
    return ProblemSpec(SearchSpace(variables), ObjectiveSpec("m", direction), cons)


@settings(max_examples=100, deadline=None)
@given(specs())
def test_serialize_round_trip(spec):
    assert parse_problem(serialize_problem(spec)) == spec


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-100, 100, allow_nan=False), min_size=4, max_size=4))
def test_validation_total(point):
    space = SearchSpace((Variable("http", "integer", 20, 60), Variable("download", "integer", 20, 60),
                         Variable("extract", "integer", 3, 9), Variable("simsearch", "integer", 20, 60)))
    problems = validate_configuration(space, point)
    inside = all(v.lower <= x <= v.upper and float(x).is_integer()
                 for v, x in zip(space.variables, point))
    assert (problems == []) == inside


@settings(max_examples=100, deadline=None)
@given(st.floats(-1, 1), st.floats(1e-9, 1), st.floats(1e-9, 1))
def test_feasibility_monotone_in_tolerance(gap, t1, t2):
    lo, hi = sorted((t1, t2))
    space = SearchSpace((Variable("x", "real", -5, 5), Variable("y", "real", -5, 5)))
    tight = ProblemSpec(space, ObjectiveSpec("f"), (Constraint("equality", "x - y", lo),))
    loose = ProblemSpec(space, ObjectiveSpec("f"), (Constraint("equality", "x - y", hi),))
    point = (gap, 0.0)
    if not check_constraints(tight, point, {}):
        assert not check_constraints(loose, point, {})
