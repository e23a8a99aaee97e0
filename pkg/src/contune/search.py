"""Ask/tell optimizers over a :class:`~contune.problem.ProblemSpec`.

Three algorithms share one protocol:

* :class:`BayesianOptimizer` -- Extra-Trees surrogate + LCB/EI acquisition
  maximized over a random candidate pool (for expensive evaluations);
* :class:`SimulatedAnnealing` and :class:`DifferentialEvolution` -- cheap
  derivative-free searches for short-running evaluations.

``ask()`` returns the next configuration or ``None`` when nothing can be
proposed right now (budget reached, converged, or waiting on outstanding
evaluations); ``tell(point, value)`` feeds back a measured objective.
Internally everything is minimized: ``loss = sign * value``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.stats import norm
from sklearn.base import BaseEstimator

from ._validation import DocumentError, check_choice, check_keys, check_number, derive_seed, line_of
from .problem import check_constraints
from .sampling import SamplerSpec, default_n_initial, random_candidate_array, sample
from .surrogate import ExtraTreesSurrogate

__all__ = [
    "Observation",
    "UnknownPointError",
    "BaseOptimizer",
    "BayesianOptimizer",
    "SimulatedAnnealing",
    "DifferentialEvolution",
    "SearchSpec",
    "make_optimizer",
    "acceptance_probability",
    "ALGORITHMS",
]


class UnknownPointError(KeyError):
    """``tell`` was called with a configuration that is not pending."""


@dataclass(frozen=True)
class Observation:
    point: tuple
    value: float  # raw objective as measured (nan for failures)
    loss: float  # minimized quantity; the penalty for failed evaluations
    failed: bool = False


def _penalty(losses):
    finite = [x for x in losses if math.isfinite(x)]
    if not finite:
        return 0.0
    worst, best = max(finite), min(finite)
    return worst + 3.0 * (worst - best)


class BaseOptimizer(BaseEstimator):
    """Shared ask/tell bookkeeping: pending set, dataset, best-so-far, convergence."""

    algorithm = None

    def _setup(self):
        self._space = self.problem.space
        self._sign = self.problem.objective.sign
        n_init = self.n_initial if self.n_initial is not None else self._default_n_initial()
        self.sampler_spec_ = SamplerSpec(self.sampler, int(n_init), self.random_state)
        self.dataset_ = []
        self.pending_ = []
        self.n_asked_ = 0
        self.best_ = None  # Observation
        self.no_improvement_ = 0
        self.history_ = []  # best value after each tell
        self._initial = self._initial_design()

    def _default_n_initial(self):
        return default_n_initial(len(self.problem.space))

    def _ensure_setup(self):
        if not hasattr(self, "dataset_"):
            self._setup()

    def _initial_design(self):
        points = sample(self._space, self.sampler_spec_)
        if not self.problem.config_constraints:
            return points
        out = []
        for i, p in enumerate(points):
            if self._feasible(p):
                out.append(p)
            else:
                out.append(self._random_feasible(derive_seed(self.random_state, 3, i)))
        return out

    def _feasible(self, point):
        return not check_constraints(
            type(self.problem)(self.problem.space, self.problem.objective,
                               self.problem.config_constraints),
            point, {},
        )

    def _random_feasible(self, seed, tries=20):
        for k in range(tries):
            X = random_candidate_array(self._space, 256, derive_seed(seed, k))
            for row in X:
                p = self._space.configuration(row)
                if self._feasible(p):
                    return p
        raise RuntimeError("could not find a configuration satisfying the constraints")

    # -- protocol -----------------------------------------------------------

    @property
    def budget_left(self):
        self._ensure_setup()
        return self.budget - len(self.dataset_) - len(self.pending_)

    def converged(self):
        """Return ``(done, reason)`` where reason is ``"budget"``, ``"patience"`` or None."""
        self._ensure_setup()
        if len(self.dataset_) >= self.budget:
            return True, "budget"
        if self.no_improvement_ >= self.patience:
            return True, "patience"
        return False, None

    def ask(self):
        self._ensure_setup()
        if self.converged()[0] or self.budget_left <= 0:
            return None
        point = self._propose()
        if point is None:
            return None
        self.pending_.append(point)
        self.n_asked_ += 1
        return point

    def tell(self, point, value):
        self._ensure_setup()
        point = tuple(point)
        try:
            idx = self.pending_.index(point)
        except ValueError:
            raise UnknownPointError(f"{point} was not returned by ask or was already told") from None
        del self.pending_[idx]
        value = float(value)
        failed = not math.isfinite(value)
        loss = _penalty([o.loss for o in self.dataset_ if not o.failed]) if failed else self._sign * value
        obs = Observation(point, value, loss, failed)

        previous = self.best_
        if not failed and (previous is None or loss < previous.loss):
            self.best_ = obs
        if previous is None:
            improvement = math.inf if not failed else 0.0
            threshold = 0.0
        else:
            improvement = previous.loss - self.best_.loss
            threshold = self.epsilon if self.epsilon is not None else 1e-3 * abs(previous.loss)
        if improvement > 0 and improvement >= threshold:
            self.no_improvement_ = 0
        else:
            self.no_improvement_ += 1

        self._on_tell(obs, idx)
        self.dataset_.append(obs)
        self.history_.append(None if self.best_ is None else self.best_.value)
        return self

    @property
    def best(self):
        """(configuration, objective value) of the best successful evaluation."""
        self._ensure_setup()
        if self.best_ is None:
            return None
        return self.best_.point, self.best_.value

    @property
    def n_initial_(self):
        self._ensure_setup()
        return self.sampler_spec_.n_initial

    def training_data(self):
        """Completed rows as (X, losses); failures re-penalized against current data."""
        ok = [o.loss for o in self.dataset_ if not o.failed]
        pen = _penalty(ok)
        X = np.array([o.point for o in self.dataset_], dtype=float).reshape(-1, len(self._space))
        y = np.array([pen if o.failed else o.loss for o in self.dataset_])
        return X, y

    def resolved_params(self):
        """Hyperparameters with defaults applied (for the run manifest)."""
        self._ensure_setup()
        params = {k: v for k, v in self.get_params(deep=False).items() if k != "problem"}
        params["n_initial"] = self.sampler_spec_.n_initial
        params["epsilon"] = (self.epsilon if self.epsilon is not None
                             else "relative:1e-3*|best|")
        return params

    # -- hooks --------------------------------------------------------------

    def _propose(self):
        raise NotImplementedError

    def _on_tell(self, obs, pending_index):
        pass


class BayesianOptimizer(BaseOptimizer):
    """Sequential model-based optimization with an Extra-Trees surrogate.

    The surrogate is refit on completed evaluations only.  Pending points
    influence the next proposal only through duplicate suppression: candidates
    within ``dup_radius`` (unit-normalized Euclidean distance) of a pending
    point are discarded.
    """

    algorithm = "bo_extra_trees"

    def __init__(self, problem, budget=40, patience=10, epsilon=None, n_initial=None,
                 sampler="latin_hypercube", random_state=0, acquisition="lower_confidence_bound",
                 kappa=1.0, xi=0.0, candidate_pool=1000, dup_radius=1e-6, n_trees=100,
                 min_samples_split=2, max_features=None, splits_per_feature=1):
        self.problem = problem
        self.budget = budget
        self.patience = patience
        self.epsilon = epsilon
        self.n_initial = n_initial
        self.sampler = sampler
        self.random_state = random_state
        self.acquisition = acquisition
        self.kappa = kappa
        self.xi = xi
        self.candidate_pool = candidate_pool
        self.dup_radius = dup_radius
        self.n_trees = n_trees
        self.min_samples_split = min_samples_split
        self.max_features = max_features
        self.splits_per_feature = splits_per_feature

    def _setup(self):
        if self.acquisition not in ("lower_confidence_bound", "expected_improvement"):
            raise ValueError(f"unknown acquisition {self.acquisition!r}")
        if not self.kappa > 0:
            raise ValueError("kappa must be > 0")
        if self.xi < 0:
            raise ValueError("xi must be >= 0")
        super()._setup()
        self.model_ = None

    def surrogate(self):
        return ExtraTreesSurrogate(
            n_trees=self.n_trees, min_samples_split=self.min_samples_split,
            max_features=self.max_features, splits_per_feature=self.splits_per_feature,
            random_state=derive_seed(self.random_state, 1),
        )

    def acquisition_values(self, model, X):
        """Score to minimize for each candidate row."""
        mean, spread = model.predict(X, return_std=True)
        if self.acquisition == "lower_confidence_bound":
            return mean - self.kappa * spread
        best = self.best_.loss if self.best_ is not None else float(np.min(model.y_))
        gain = best - self.xi - mean
        with np.errstate(divide="ignore", invalid="ignore"):
            z = np.where(spread > 0, gain / spread, 0.0)
            ei = np.where(spread > 0, gain * norm.cdf(z) + spread * norm.pdf(z),
                          np.maximum(gain, 0.0))
        return -ei

    def _not_pending(self, X):
        if not self.pending_:
            return np.ones(len(X), dtype=bool)
        U = self._space.to_unit(X)
        P = self._space.to_unit(np.array(self.pending_, dtype=float))
        dist = np.sqrt(((U[:, None, :] - P[None, :, :]) ** 2).sum(axis=2))
        return dist.min(axis=1) > self.dup_radius

    def _candidates(self, tag):
        X = random_candidate_array(self._space, self.candidate_pool,
                                   derive_seed(self.random_state, 2, self.n_asked_, tag))
        keep = self._not_pending(X)
        if self.problem.config_constraints:
            keep &= np.array([self._feasible(self._space.configuration(r)) for r in X])
        return X[keep]

    def _propose(self):
        if self.n_asked_ < len(self._initial):
            return self._initial[self.n_asked_]
        X = self._candidates(0)
        for tag in range(1, 10):
            if len(X):
                break
            X = self._candidates(tag)
        if not len(X):
            raise RuntimeError("no admissible candidate found in the acquisition pool")
        if len(self.dataset_) < 2:
            # not enough completed rows to fit a model yet (asynchronous start)
            return self._space.configuration(X[0])
        self.model_ = self._fitted_model()
        scores = self.acquisition_values(self.model_, X)
        return self._space.configuration(X[int(np.argmin(scores))])

    def current_model(self):
        """Surrogate fitted on all completed rows (None with fewer than 2 rows)."""
        self._ensure_setup()
        if len(self.dataset_) < 2:
            return None
        return self._fitted_model()

    def _fitted_model(self):
        # the training set only grows, so its size identifies it
        cached = getattr(self, "_model_cache", None)
        if cached is not None and cached[0] == len(self.dataset_):
            return cached[1]
        Xd, yd = self.training_data()
        model = self.surrogate().fit(Xd, yd)
        self._model_cache = (len(self.dataset_), model)
        return model


def acceptance_probability(delta, temperature):
    """Metropolis rule: 1 for non-worsening moves, exp(-delta/T) otherwise."""
    if delta <= 0:
        return 1.0
    if temperature <= 0:
        return 0.0
    return math.exp(-delta / temperature)


class SimulatedAnnealing(BaseOptimizer):
    """Single-variable random-walk annealing with a geometric cooling schedule."""

    algorithm = "simulated_annealing"

    def __init__(self, problem, budget=40, patience=10, epsilon=None, n_initial=1,
                 sampler="latin_hypercube", random_state=0, initial_temperature=10.0,
                 cooling=0.95, step_fraction=0.1):
        self.problem = problem
        self.budget = budget
        self.patience = patience
        self.epsilon = epsilon
        self.n_initial = n_initial
        self.sampler = sampler
        self.random_state = random_state
        self.initial_temperature = initial_temperature
        self.cooling = cooling
        self.step_fraction = step_fraction

    def _setup(self):
        if not 0 < self.cooling <= 1:
            raise ValueError("cooling must be in (0, 1]")
        if not self.step_fraction > 0:
            raise ValueError("step_fraction must be > 0")
        super()._setup()
        self._rng = np.random.default_rng(derive_seed(self.random_state, 4))
        self.temperature_ = float(self.initial_temperature)
        self.current_ = None  # Observation
        self._n_initial_told = 0

    def anneal_step(self):
        """Perturb one uniformly chosen variable of the current point."""
        self._ensure_setup()
        x = np.array(self.current_.point, dtype=float)
        j = int(self._rng.integers(len(x)))
        span = self._space.upper[j] - self._space.lower[j]
        x[j] += self._rng.uniform(-self.step_fraction * span, self.step_fraction * span)
        return self._space.configuration(self._space.snap(x))

    def _propose(self):
        if self.n_asked_ < len(self._initial):
            return self._initial[self.n_asked_]
        if self.current_ is None:
            return None
        return self.anneal_step()

    def _on_tell(self, obs, pending_index):
        if self._n_initial_told < len(self._initial):
            self._n_initial_told += 1
            if self.current_ is None or obs.loss < self.current_.loss:
                self.current_ = obs
            return
        if self.current_ is None:
            self.current_ = obs
            return
        delta = obs.loss - self.current_.loss
        p = acceptance_probability(delta, self.temperature_)
        u = self._rng.random()
        if p >= 1.0 or u < p:
            self.current_ = obs
        self.temperature_ *= self.cooling


class DifferentialEvolution(BaseOptimizer):
    """DE/rand/1/bin with generation-synchronous selection.

    The initial population comes from the sampler (``population_size``
    points).  A new generation is built once every trial of the previous one
    has been told; until then ``ask`` returns None.
    """

    algorithm = "differential_evolution"

    def __init__(self, problem, budget=40, patience=10, epsilon=None, population_size=None,
                 sampler="latin_hypercube", random_state=0, mutation=0.8, crossover=0.9):
        self.problem = problem
        self.budget = budget
        self.patience = patience
        self.epsilon = epsilon
        self.population_size = population_size
        self.sampler = sampler
        self.random_state = random_state
        self.mutation = mutation
        self.crossover = crossover

    @property
    def n_initial(self):
        return self.population_size

    def _setup(self):
        super()._setup()
        if self.sampler_spec_.n_initial < 4:
            raise ValueError("differential evolution needs a population of at least 4")
        if not 0 <= self.crossover <= 1:
            raise ValueError("crossover must be in [0, 1]")
        if self.mutation < 0:
            raise ValueError("mutation must be >= 0")
        self._rng = np.random.default_rng(derive_seed(self.random_state, 5))
        self.population_ = np.array(self._initial, dtype=float)
        self.population_loss_ = np.full(len(self._initial), np.nan)
        self._queue = []  # (member, trial point) not yet asked
        self._owner = []  # member index for each pending entry, parallel to pending_
        self.generation_ = 0

    def de_generation(self, population=None):
        """One trial vector per member: mutant a + F (b - c), binomial crossover."""
        self._ensure_setup()
        pop = self.population_ if population is None else np.asarray(population, dtype=float)
        NP, d = pop.shape
        if NP < 4:
            raise ValueError("rand/1 mutation needs a population of at least 4")
        lower, upper = self._space.lower, self._space.upper
        trials = []
        for i in range(NP):
            others = [k for k in range(NP) if k != i]
            a, b, c = self._rng.choice(others, size=3, replace=False)
            mutant = np.clip(pop[a] + self.mutation * (pop[b] - pop[c]), lower, upper)
            cross = self._rng.random(d) < self.crossover
            cross[int(self._rng.integers(d))] = True
            trial = np.where(cross, mutant, pop[i])
            trials.append(self._space.configuration(self._space.snap(trial)))
        return trials

    def _propose(self):
        if self.n_asked_ < len(self._initial):
            member = self.n_asked_
            point = self._initial[member]
        else:
            if not self._queue:
                if self.pending_ or np.isnan(self.population_loss_).any():
                    return None
                self.generation_ += 1
                self._queue = list(enumerate(self.de_generation()))
            member, point = self._queue.pop(0)
        self._owner.append(member)
        return point

    def _on_tell(self, obs, pending_index):
        member = self._owner.pop(pending_index)
        current = self.population_loss_[member]
        if np.isnan(current) or obs.loss <= current:
            self.population_[member] = obs.point
            self.population_loss_[member] = obs.loss


ALGORITHMS = {
    cls.algorithm: cls
    for cls in (BayesianOptimizer, SimulatedAnnealing, DifferentialEvolution)
}

_HYPER_KEYS = {
    "bo_extra_trees": ("acquisition", "kappa", "xi", "candidate_pool", "dup_radius", "n_trees",
                       "min_samples_split", "max_features", "splits_per_feature"),
    "simulated_annealing": ("initial_temperature", "cooling", "step_fraction"),
    "differential_evolution": ("mutation", "crossover"),
}


@dataclass(frozen=True)
class SearchSpec:
    """The ``search`` section of a problem document."""

    algorithm: str = "bo_extra_trees"
    budget: int = 40
    patience: int = 10
    epsilon: float | None = None
    seed: int = 0
    sampler: str = "latin_hypercube"
    n_initial: int | None = None
    hyperparameters: tuple = ()

    @classmethod
    def from_dict(cls, node):
        if node is None:
            return cls()
        check_keys(node, "search", optional=("algorithm", "budget", "patience", "epsilon",
                                               "seed", "sampler", "hyperparameters"))
        algorithm = check_choice(node.get("algorithm", "bo_extra_trees"), "search.algorithm",
                                 set(ALGORITHMS), line_of(node, "algorithm"))
        budget = check_number(node.get("budget", 40), "search.budget", line_of(node, "budget"),
                              integer=True, minimum=1)
        patience = check_number(node.get("patience", 10), "search.patience",
                                line_of(node, "patience"), integer=True, minimum=1)
        epsilon = node.get("epsilon")
        if epsilon is not None:
            epsilon = float(check_number(epsilon, "search.epsilon", line_of(node, "epsilon"),
                                         minimum=0))
        seed = check_number(node.get("seed", 0), "search.seed", line_of(node, "seed"),
                            integer=True, minimum=0, maximum=2**64 - 1)
        sampler, n_initial = "latin_hypercube", None
        if node.get("sampler") is not None:
            sn = node["sampler"]
            check_keys(sn, "search.sampler", optional=("method", "n_initial"))
            sampler = check_choice(sn.get("method", sampler), "search.sampler.method",
                                   {"latin_hypercube", "halton"}, line_of(sn, "method"))
            if sn.get("n_initial") is not None:
                n_initial = check_number(sn["n_initial"], "search.sampler.n_initial",
                                         line_of(sn, "n_initial"), integer=True, minimum=1)
        hyper = node.get("hyperparameters") or {}
        check_keys(hyper, "search.hyperparameters", optional=_HYPER_KEYS[algorithm])
        return cls(algorithm, budget, patience, epsilon, seed, sampler, n_initial,
                   tuple(sorted(hyper.items())))

    def to_dict(self):
        return {
            "algorithm": self.algorithm,
            "budget": self.budget,
            "patience": self.patience,
            "epsilon": self.epsilon,
            "seed": self.seed,
            "sampler": {"method": self.sampler, "n_initial": self.n_initial},
            "hyperparameters": dict(self.hyperparameters),
        }


def make_optimizer(problem, spec, seed=None):
    """Instantiate the optimizer named by a :class:`SearchSpec`."""
    cls = ALGORITHMS[spec.algorithm]
    kwargs = dict(problem=problem, budget=spec.budget, patience=spec.patience,
                  epsilon=spec.epsilon, sampler=spec.sampler,
                  random_state=spec.seed if seed is None else seed)
    if spec.n_initial is not None:
        key = "population_size" if cls is DifferentialEvolution else "n_initial"
        kwargs[key] = spec.n_initial
    kwargs.update(dict(spec.hyperparameters))
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise DocumentError("invalid_value", f"search.hyperparameters: {exc}") from None
