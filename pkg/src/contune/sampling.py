"""Space-filling initial designs and uniform candidate pools."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._validation import check_seed

__all__ = [
    "SamplerSpec",
    "default_n_initial",
    "latin_hypercube",
    "halton",
    "radical_inverse",
    "first_primes",
    "sample",
    "random_candidates",
]

METHODS = ("latin_hypercube", "halton")


def default_n_initial(d):
    return max(5, 2 * d)


@dataclass(frozen=True)
class SamplerSpec:
    method: str = "latin_hypercube"
    n_initial: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"sampler method must be one of {METHODS}, got {self.method!r}")
        if isinstance(self.n_initial, bool) or int(self.n_initial) != self.n_initial or self.n_initial < 1:
            raise ValueError(f"n_initial must be a positive integer, got {self.n_initial!r}")
        check_seed(self.seed)


def latin_hypercube(n, d, seed):
    """Unit-cube LHS: one point per stratum ``[k/n, (k+1)/n)`` in every column."""
    rng = np.random.default_rng(seed)
    strata = np.stack([rng.permutation(n) for _ in range(d)], axis=1)
    jitter = rng.random((n, d))
    return (strata + jitter) / n


def first_primes(k):
    primes = []
    candidate = 2
    while len(primes) < k:
        if all(candidate % p for p in primes if p * p <= candidate):
            primes.append(candidate)
        candidate += 1
    return primes


def radical_inverse(i, base):
    """Van der Corput radical inverse of the positive integer ``i``."""
    inv, scale = 0.0, 1.0 / base
    while i > 0:
        i, digit = divmod(i, base)
        inv += digit * scale
        scale /= base
    return inv


def halton(n, d, start=1):
    """Unit-cube Halton points ``start .. start+n-1`` using the first d prime bases."""
    bases = first_primes(d)
    return np.array(
        [[radical_inverse(i, b) for b in bases] for i in range(start, start + n)],
        dtype=float,
    ).reshape(n, d)


def sample(space, spec):
    """Initial design of ``spec.n_initial`` configurations over ``space``."""
    n, d = spec.n_initial, len(space)
    if spec.method == "latin_hypercube":
        unit = latin_hypercube(n, d, spec.seed)
    else:
        unit = halton(n, d)
    return [space.configuration(row) for row in space.from_unit(unit)]


def random_candidates(space, n, seed):
    """``n`` independent uniform draws within the bounds (integers uniform on the range)."""
    return [space.configuration(row) for row in random_candidate_array(space, n, seed)]


def random_candidate_array(space, n, seed):
    """Array form of :func:`random_candidates`, used for acquisition pools."""
    if isinstance(n, bool) or int(n) != n or n < 1:
        raise ValueError(f"n must be a positive integer, got {n!r}")
    rng = np.random.default_rng(seed)
    X = np.empty((int(n), len(space)))
    for j, var in enumerate(space.variables):
        if var.is_integer:
            X[:, j] = rng.integers(var.lower, var.upper + 1, size=int(n))
        else:
            X[:, j] = rng.uniform(var.lower, var.upper, size=int(n))
    return X
