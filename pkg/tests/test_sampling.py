import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from contune.problem import SearchSpace, Variable, validate_configuration
from contune.sampling import (
    SamplerSpec,
    default_n_initial,
    first_primes,
    halton,
    latin_hypercube,
    radical_inverse,
    random_candidates,
    sample,
)

UNIT2 = SearchSpace((Variable("x", "real", 0, 1), Variable("y", "real", 0, 1)))


def test_lhs_two_by_four_strata():
    pts = np.array(sample(UNIT2, SamplerSpec("latin_hypercube", 4, 7)))
    for col in pts.T:
        assert sorted(np.floor(col * 4).astype(int)) == [0, 1, 2, 3]


def test_halton_base_two_first_three():
    space = SearchSpace((Variable("x", "real", 0, 1),))
    assert [p[0] for p in sample(space, SamplerSpec("halton", 3, 0))] == [0.5, 0.25, 0.75]


def test_halton_first_eight_exact():
    expected = [1 / 2, 1 / 4, 3 / 4, 1 / 8, 5 / 8, 3 / 8, 7 / 8, 1 / 16]
    assert halton(8, 1)[:, 0].tolist() == expected


def test_halton_bases_are_first_primes():
    assert first_primes(5) == [2, 3, 5, 7, 11]
    assert halton(2, 3).tolist() == [[1 / 2, 1 / 3, 1 / 5], [1 / 4, 2 / 3, 2 / 5]]
    # 11 = 102 in base 3, mirrored to 0.201
    assert radical_inverse(11, 3) == pytest.approx(19 / 27, rel=1e-15)


def test_lhs_on_pool_space(space):
    pts = sample(space, SamplerSpec("latin_hypercube", 5, 0))
    assert len(pts) == 5
    assert all(validate_configuration(space, p) == [] for p in pts)


def test_default_n_initial():
    assert default_n_initial(4) == 8
    assert default_n_initial(1) == 5


def test_sampler_spec_rejects_bad_values():
    with pytest.raises(ValueError):
        SamplerSpec("sobol", 4, 0)
    with pytest.raises(ValueError):
        SamplerSpec("halton", 0, 0)
    with pytest.raises(ValueError):
        SamplerSpec("halton", 4, -1)


def test_sample_deterministic(space):
    spec = SamplerSpec("latin_hypercube", 12, 123)
    assert sample(space, spec) == sample(space, spec)
    assert sample(space, spec) != sample(space, SamplerSpec("latin_hypercube", 12, 124))


def test_random_candidates_single_point_repeatable():
    space = SearchSpace((Variable("x", "real", 0, 1),))
    a = random_candidates(space, 1, 5)
    assert a == random_candidates(space, 1, 5)
    assert 0 <= a[0][0] <= 1


def test_random_candidates_cover_integer_range():
    space = SearchSpace((Variable("extract", "integer", 3, 9),))
    values = {p[0] for p in random_candidates(space, 1000, 0)}
    assert values == set(range(3, 10))


def test_random_candidates_rejects_zero():
    with pytest.raises(ValueError):
        random_candidates(UNIT2, 0, 0)


def test_integer_rounding_ties_away_from_zero():
    space = SearchSpace((Variable("a", "integer", -5, 5),))
    assert space.configuration(space.snap(np.array([2.5])))[0] == 3
    assert space.configuration(space.snap(np.array([-2.5])))[0] == -3


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 1000), st.integers(1, 20), st.integers(0, 2**64 - 1))
def test_lhs_stratification_property(n, d, seed):
    unit = latin_hypercube(n, d, seed)
    assert unit.shape == (n, d)
    strata = np.floor(unit * n).astype(int)
    expected = np.arange(n)
    for j in range(d):
        assert np.array_equal(np.sort(strata[:, j]), expected)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 60), st.sampled_from(["latin_hypercube", "halton"]), st.integers(0, 1000))
def test_samples_within_bounds(n, method, seed):
    space = SearchSpace((Variable("a", "integer", -3, 4), Variable("b", "real", 2.5, 7.25),
                         Variable("c", "integer", 20, 60)))
    for p in sample(space, SamplerSpec(method, n, seed)):
        assert validate_configuration(space, p) == []
