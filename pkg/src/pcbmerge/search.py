"""Coefficient search: uniform-lambda grid search and box-constrained CMA-ES.

Everything maximizes. The CMA-ES is the standard (mu/mu_w, lambda) variant
with cumulative step-size adaptation and default learning rates; box
constraints are enforced by clipping samples as they are drawn.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ConfigError, FitnessFailure, LengthMismatch, NonFiniteFitness

Fitness = Callable[[np.ndarray], float]

CACHE_DECIMALS = 4


@dataclass(frozen=True)
class SearchSpace:
    dim: int
    lower: float = 0.8
    upper: float = 2.5

    def __post_init__(self):
        if self.dim < 1:
            raise ConfigError("search dimension must be >= 1")
        if not self.lower < self.upper:
            raise ConfigError(f"empty search box [{self.lower}, {self.upper}]")


@dataclass
class FitnessReport:
    best_params: list
    best_fitness: float
    evaluations_used: int
    history: list = field(default_factory=list)
    samples_drawn: int = 0
    generations: int = 0

    def to_dict(self) -> dict:
        return {
            "best_params": [float(x) for x in self.best_params],
            "best_fitness": float(self.best_fitness),
            "evaluations_used": self.evaluations_used,
            "samples_drawn": self.samples_drawn,
            "generations": self.generations,
            "history": [
                {"params": [float(x) for x in p], "fitness": float(f)} for p, f in self.history
            ],
        }


def _call(fitness: Fitness, params: np.ndarray) -> float:
    try:
        value = float(fitness(params))
    except FitnessFailure as exc:
        if exc.params is None:
            exc.params = [float(p) for p in params]
        raise
    except Exception as exc:
        raise FitnessFailure(f"fitness raised {type(exc).__name__}: {exc}", params) from exc
    if not math.isfinite(value):
        raise NonFiniteFitness(f"fitness returned {value}", params)
    return value


def grid_candidates(lower: float, upper: float, step: float) -> list:
    """Inclusive grid lower, lower + step, ..., <= upper, rounded to 10 places."""
    if step <= 0:
        raise ConfigError("grid step must be positive")
    if upper < lower:
        raise ConfigError(f"empty grid range [{lower}, {upper}]")
    count = int(math.floor((upper - lower) / step + 1e-9)) + 1
    return [round(lower + i * step, 10) for i in range(count)]


def grid_search(candidates: Sequence[float], fitness: Fitness, dim: int = 1) -> FitnessReport:
    """Evaluate each uniform lambda (replicated to ``dim``); ties go to the smaller lambda."""
    if not candidates:
        raise ConfigError("grid search needs at least one candidate")
    history = []
    best_lam, best_fit = None, -math.inf
    for lam in sorted(float(c) for c in candidates):
        params = np.full(dim, lam)
        value = _call(fitness, params)
        history.append((params.tolist(), value))
        if best_lam is None or value > best_fit:
            best_lam, best_fit = lam, value
    return FitnessReport(
        [best_lam] * dim, best_fit, len(history), history, samples_drawn=len(history), generations=1
    )


@dataclass
class CmaState:
    space: SearchSpace
    mean: np.ndarray
    sigma: float
    cov: np.ndarray
    p_sigma: np.ndarray
    p_c: np.ndarray
    population_size: int
    rng_state: dict
    generation: int = 0

    # strategy constants, derived from dim and population size
    weights: np.ndarray = field(default=None, repr=False)
    mu_eff: float = 0.0
    c_sigma: float = 0.0
    d_sigma: float = 0.0
    c_c: float = 0.0
    c_1: float = 0.0
    c_mu: float = 0.0
    chi_n: float = 0.0

    def eigen(self) -> tuple:
        vals, vecs = np.linalg.eigh(self.cov)
        vals = np.maximum(vals, 1e-300)
        return vals, vecs


def default_population(dim: int) -> int:
    return 4 + int(math.floor(3 * math.log(dim)))


def cma_init(space: SearchSpace, seed: int = 0, population_size: Optional[int] = None) -> CmaState:
    n = space.dim
    lam = population_size or default_population(n)
    if lam < 2:
        raise ConfigError("CMA-ES population must be >= 2")
    mu = lam // 2
    w = math.log(mu + 0.5) - np.log(np.arange(1, mu + 1))
    w /= w.sum()
    mu_eff = 1.0 / float(np.sum(w**2))
    c_sigma = (mu_eff + 2) / (n + mu_eff + 5)
    d_sigma = 1 + 2 * max(0.0, math.sqrt((mu_eff - 1) / (n + 1)) - 1) + c_sigma
    c_c = (4 + mu_eff / n) / (n + 4 + 2 * mu_eff / n)
    c_1 = 2 / ((n + 1.3) ** 2 + mu_eff)
    c_mu = min(1 - c_1, 2 * (mu_eff - 2 + 1 / mu_eff) / ((n + 2) ** 2 + mu_eff))
    chi_n = math.sqrt(n) * (1 - 1 / (4 * n) + 1 / (21 * n * n))
    return CmaState(
        space=space,
        mean=np.full(n, (space.lower + space.upper) / 2),
        sigma=0.2 * (space.upper - space.lower),
        cov=np.eye(n),
        p_sigma=np.zeros(n),
        p_c=np.zeros(n),
        population_size=lam,
        rng_state=np.random.Generator(np.random.PCG64(seed)).bit_generator.state,
        weights=w,
        mu_eff=mu_eff,
        c_sigma=c_sigma,
        d_sigma=d_sigma,
        c_c=c_c,
        c_1=c_1,
        c_mu=c_mu,
        chi_n=chi_n,
    )


def cma_ask(state: CmaState) -> list:
    """Draw a population from N(mean, sigma^2 C), clipped into the box.

    Advances ``state.rng_state``; the draw is a pure function of the state
    it was given.
    """
    bitgen = np.random.PCG64()
    bitgen.state = state.rng_state
    rng = np.random.Generator(bitgen)
    z = rng.standard_normal((state.population_size, state.space.dim))
    state.rng_state = bitgen.state
    vals, vecs = state.eigen()
    y = z @ (vecs * np.sqrt(vals)).T
    x = state.mean + state.sigma * y
    np.clip(x, state.space.lower, state.space.upper, out=x)
    return [row.copy() for row in x]


def cma_tell(state: CmaState, samples: Sequence[np.ndarray], fitnesses: Sequence[float]) -> CmaState:
    """One generation of the CMA-ES update (ranked for maximization)."""
    if len(samples) != state.population_size or len(fitnesses) != state.population_size:
        raise LengthMismatch(
            f"expected {state.population_size} samples and fitnesses, "
            f"got {len(samples)} and {len(fitnesses)}"
        )
    fit = np.asarray(fitnesses, dtype=float)
    if not np.all(np.isfinite(fit)):
        raise NonFiniteFitness("cma_tell received a non-finite fitness")
    n = state.space.dim
    xs = np.asarray(samples, dtype=float)
    # stable sort: equal fitness keeps sample order, so ties are deterministic
    order = np.argsort(-fit, kind="stable")
    mu = len(state.weights)
    y = (xs[order[:mu]] - state.mean) / state.sigma
    y_w = state.weights @ y

    vals, vecs = state.eigen()
    inv_sqrt_c = (vecs / np.sqrt(vals)) @ vecs.T

    mean = state.mean + state.sigma * y_w
    p_sigma = (1 - state.c_sigma) * state.p_sigma + math.sqrt(
        state.c_sigma * (2 - state.c_sigma) * state.mu_eff
    ) * (inv_sqrt_c @ y_w)
    gen = state.generation + 1
    ps_norm = float(np.linalg.norm(p_sigma))
    h_sigma = ps_norm / math.sqrt(1 - (1 - state.c_sigma) ** (2 * gen)) < (1.4 + 2 / (n + 1)) * state.chi_n
    p_c = (1 - state.c_c) * state.p_c
    if h_sigma:
        p_c = p_c + math.sqrt(state.c_c * (2 - state.c_c) * state.mu_eff) * y_w
    rank_mu = (y.T * state.weights) @ y
    cov = (
        (1 - state.c_1 - state.c_mu) * state.cov
        + state.c_1 * (np.outer(p_c, p_c) + (0.0 if h_sigma else state.c_c * (2 - state.c_c)) * state.cov)
        + state.c_mu * rank_mu
    )
    cov = (cov + cov.T) / 2
    sigma = state.sigma * math.exp((state.c_sigma / state.d_sigma) * (ps_norm / state.chi_n - 1))
    sigma = min(max(sigma, 1e-300), 1e300)

    state.mean, state.p_sigma, state.p_c, state.cov, state.sigma = mean, p_sigma, p_c, cov, sigma
    state.generation = gen
    return state


def search(
    space: SearchSpace,
    fitness: Fitness,
    budget: int,
    seed: int = 0,
    population_size: Optional[int] = None,
    evaluate: Optional[Callable[[Fitness, list], list]] = None,
) -> FitnessReport:
    """CMA-ES ask/tell loop until ``budget`` samples have been drawn.

    Fitness is called on each sample rounded to 4 decimals and cached by that
    rounded vector, so repeated points cost nothing. ``evaluate`` may map a
    batch of distinct parameter vectors to fitness values (e.g. in parallel);
    results are paired by position.
    """
    state = cma_init(space, seed, population_size)
    if budget < state.population_size:
        raise ConfigError(f"budget {budget} is below the population size {state.population_size}")
    cache: dict = {}
    history = []
    best_params, best_fit = None, -math.inf
    drawn = 0
    while drawn + state.population_size <= budget:
        samples = cma_ask(state)
        drawn += len(samples)
        keys = [tuple((np.round(x, CACHE_DECIMALS) + 0.0).tolist()) for x in samples]
        fresh = list(dict.fromkeys(k for k in keys if k not in cache))
        if fresh:
            points = [np.asarray(k) for k in fresh]
            if evaluate is None:
                values = [_call(fitness, p) for p in points]
            else:
                values = [float(v) for v in evaluate(fitness, points)]
                for p, v in zip(points, values):
                    if not math.isfinite(v):
                        raise NonFiniteFitness(f"fitness returned {v}", p)
            for k, v in zip(fresh, values):
                cache[k] = v
                history.append((list(k), v))
                if v > best_fit:
                    best_params, best_fit = list(k), v
        cma_tell(state, samples, [cache[k] for k in keys])
    return FitnessReport(best_params, best_fit, len(cache), history, drawn, state.generation)
