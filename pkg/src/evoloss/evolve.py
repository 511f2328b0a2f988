"""Black-box search over loss-weight genomes in [0, 1]^d.

Four strategies share one driver, :func:`evolve`: tournament selection,
CMA-ES, uniform random search and a grid.  Budgets count fitness
evaluations for every strategy, so strategies compare at equal cost.
"""
from __future__ import annotations

import itertools
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .synthgen import LabelAccessError

log = logging.getLogger(__name__)

STRATEGIES = ("tournament", "cmaes", "random", "grid")


@dataclass
class Individual:
    genome: np.ndarray
    eval_seed: int
    round_born: int
    fitness: float | None = None
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        self.genome = np.clip(np.asarray(self.genome, dtype=np.float64), 0.0, 1.0)

    def set_fitness(self, value: float, info: dict | None = None) -> None:
        if self.fitness is not None:
            raise RuntimeError("fitness is assigned exactly once")
        self.fitness = float(value)
        self.info = dict(info or {})


# ---------------------------------------------------------------------------
# fitness plumbing


class FitnessCache:
    """Memo of (genome bytes, eval seed) -> (fitness, info)."""

    def __init__(self):
        self._memo = {}
        self.hits = 0

    @staticmethod
    def key(genome: np.ndarray, seed: int):
        return (np.asarray(genome, dtype=np.float64).tobytes(), int(seed))

    def get(self, genome, seed):
        hit = self._memo.get(self.key(genome, seed))
        if hit is not None:
            self.hits += 1
        return hit

    def put(self, genome, seed, value) -> None:
        self._memo[self.key(genome, seed)] = value

    def __len__(self):
        return len(self._memo)


def _call_fitness(fn, genome, seed):
    out = fn(genome, seed)
    if isinstance(out, tuple):
        value, info = out
    else:
        value, info = out, {}
    return float(value), dict(info)


# ---------------------------------------------------------------------------
# state


@dataclass
class CmaState:
    mean: np.ndarray
    sigma: float
    cov: np.ndarray
    pc: np.ndarray
    ps: np.ndarray
    lam: int
    generation: int = 0
    floor_events: int = 0

    # derived constants, filled by __post_init__
    def __post_init__(self):
        n = len(self.mean)
        self.mu = self.lam // 2
        w = math.log(self.mu + 0.5) - np.log(np.arange(1, self.mu + 1))
        self.weights = w / w.sum()
        self.mueff = 1.0 / np.sum(self.weights ** 2)
        self.cc = (4 + self.mueff / n) / (n + 4 + 2 * self.mueff / n)
        self.cs = (self.mueff + 2) / (n + self.mueff + 5)
        self.c1 = 2 / ((n + 1.3) ** 2 + self.mueff)
        self.cmu = min(1 - self.c1, 2 * (self.mueff - 2 + 1 / self.mueff) / ((n + 2) ** 2 + self.mueff))
        self.damps = 1 + 2 * max(0.0, math.sqrt((self.mueff - 1) / (n + 1)) - 1) + self.cs
        self.chi_n = math.sqrt(n) * (1 - 1 / (4 * n) + 1 / (21 * n * n))
        self._decompose()

    def _decompose(self):
        self.cov = 0.5 * (self.cov + self.cov.T)
        vals, vecs = np.linalg.eigh(self.cov)
        if np.any(vals < 1e-10):
            self.floor_events += 1
            log.warning("CMA-ES covariance lost definiteness (min eigenvalue %.3g); flooring",
                        vals.min())
            vals = np.maximum(vals, 1e-10)
            self.cov = (vecs * vals) @ vecs.T
        self.B, self.D = vecs, np.sqrt(vals)


def default_popsize(d: int) -> int:
    return 4 + int(math.floor(3 * math.log(d)))


def new_cma(d: int, mean: float = 0.5, sigma: float = 0.3, lam: int | None = None) -> CmaState:
    lam = default_popsize(d) if lam is None else lam
    if lam < 2:
        raise ValueError("CMA-ES needs a population of at least 2")
    return CmaState(np.full(d, float(mean)), float(sigma), np.eye(d), np.zeros(d), np.zeros(d), lam)


@dataclass
class EvolutionState:
    strategy: str
    dim: int
    rng_seed: int
    population: list = field(default_factory=list)
    history: list = field(default_factory=list)
    cma: CmaState | None = None
    capacity: int = 25

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}; pick one of {STRATEGIES}")
        self.rng = np.random.default_rng(self.rng_seed)

    @property
    def evaluations(self) -> int:
        return len(self.history)

    def best(self) -> dict | None:
        best = None
        for rec in self.history:
            if best is None or rec["fitness"] > best["fitness"]:
                best = rec
        return best


# ---------------------------------------------------------------------------
# operators


def mutate(parent: Individual, rng: np.random.Generator, round_born: int | None = None) -> Individual:
    """Resample one uniformly chosen coordinate from U[0, 1]."""
    d = len(parent.genome)
    if d < 1:
        raise ValueError("cannot mutate an empty genome")
    child = parent.genome.copy()
    child[rng.integers(d)] = rng.random()
    born = parent.round_born + 1 if round_born is None else round_born
    return Individual(child, parent.eval_seed, born)


def select_parent(population: list, t_size: int, rng: np.random.Generator) -> Individual:
    if not population:
        raise ValueError("population is empty")
    if not 1 <= t_size <= len(population):
        raise ValueError(f"t_size must be in [1, {len(population)}], got {t_size}")
    picks = rng.choice(len(population), size=t_size, replace=False)
    # ties go to the earliest pick
    return max((population[i] for i in picks), key=lambda ind: ind.fitness)


def tournament_step(state: EvolutionState, t_size: int, rng: np.random.Generator,
                    evaluate: Callable[[Individual], None]) -> Individual:
    parent = select_parent(state.population, t_size, rng)
    child = mutate(parent, rng, round_born=state.evaluations)
    evaluate(child)
    state.population.append(child)
    while len(state.population) > state.capacity:
        oldest = min(range(len(state.population)), key=lambda i: state.population[i].round_born)
        state.population.pop(oldest)
    return child


def cma_ask(state: EvolutionState, rng: np.random.Generator | None = None,
            round_born: int = 0, eval_seed: int = 0) -> list[Individual]:
    cma = state.cma
    rng = state.rng if rng is None else rng
    z = rng.standard_normal((cma.lam, len(cma.mean)))
    xs = cma.mean + cma.sigma * (z * cma.D) @ cma.B.T
    return [Individual(x, eval_seed, round_born) for x in xs]


def cma_tell(state: EvolutionState, evaluated: list[Individual]) -> EvolutionState:
    """Rank-mu update with evolution paths; samples enter the update as clamped."""
    cma = state.cma
    if len(evaluated) != cma.lam:
        raise ValueError(f"tell expects {cma.lam} individuals, got {len(evaluated)}")
    n = len(cma.mean)
    order = sorted(range(cma.lam), key=lambda i: -evaluated[i].fitness)
    X = np.array([evaluated[i].genome for i in order[:cma.mu]])
    old = cma.mean
    Y = (X - old) / cma.sigma
    yw = cma.weights @ Y
    cma.mean = np.clip(old + cma.sigma * yw, 0.0, 1.0)

    inv_sqrt = (cma.B / cma.D) @ cma.B.T
    cma.ps = (1 - cma.cs) * cma.ps + math.sqrt(cma.cs * (2 - cma.cs) * cma.mueff) * (inv_sqrt @ yw)
    g = cma.generation + 1
    ps_norm = np.linalg.norm(cma.ps)
    hsig = ps_norm / math.sqrt(1 - (1 - cma.cs) ** (2 * g)) / cma.chi_n < 1.4 + 2 / (n + 1)
    cma.pc = (1 - cma.cc) * cma.pc + hsig * math.sqrt(cma.cc * (2 - cma.cc) * cma.mueff) * yw
    rank_mu = (Y.T * cma.weights) @ Y
    cma.cov = ((1 - cma.c1 - cma.cmu) * cma.cov
               + cma.c1 * (np.outer(cma.pc, cma.pc) + (1 - hsig) * cma.cc * (2 - cma.cc) * cma.cov)
               + cma.cmu * rank_mu)
    cma.sigma *= math.exp((cma.cs / cma.damps) * (ps_norm / cma.chi_n - 1))
    cma.generation = g
    cma._decompose()
    return state


def grid_points(d: int, levels: int, budget: int, rng: np.random.Generator) -> np.ndarray:
    """Full lattice in lexicographic order when it fits the budget, else a seeded subset."""
    if levels < 2:
        raise ValueError("grid needs at least 2 levels per axis")
    axis = np.linspace(0.0, 1.0, levels)
    total = levels ** d
    if total <= budget:
        return np.array(list(itertools.product(axis, repeat=d)))
    flat = rng.choice(total, size=budget, replace=False)
    digits = np.array([np.unravel_index(int(i), (levels,) * d) for i in flat])
    return axis[digits]


# ---------------------------------------------------------------------------
# driver


def evolve(strategy: str, budget: int, fitness_fn, rng_seed: int, dim: int,
           eval_seed: int | None = None, cache: FitnessCache | None = None,
           capacity: int = 25, t_size: int = 5, grid_levels: int = 3,
           cma_sigma: float = 0.3, cma_popsize: int | None = None,
           on_record=None) -> tuple[dict, EvolutionState]:
    """Run ``strategy`` for ``budget`` fitness evaluations.

    ``fitness_fn(genome, eval_seed)`` returns a float or ``(float, info)``.
    Every individual uses the same ``eval_seed`` (default ``rng_seed``), so
    genomes are compared under common random numbers.  A failing evaluation
    scores ``-inf`` and the run continues.  Returns the best history record
    and the final state.
    """
    if budget < 1:
        raise ValueError("budget must be >= 1")
    if dim < 1:
        raise ValueError("genome dimension must be >= 1")
    eval_seed = rng_seed if eval_seed is None else eval_seed
    state = EvolutionState(strategy, dim, rng_seed, capacity=capacity)
    rng = state.rng
    best_so_far = -math.inf

    def evaluate(ind: Individual, rnd: int, index: int = 0) -> None:
        nonlocal best_so_far
        t0 = time.perf_counter()
        hit = cache.get(ind.genome, ind.eval_seed) if cache is not None else None
        if hit is not None:
            value, info = hit
        else:
            try:
                value, info = _call_fitness(fitness_fn, ind.genome, ind.eval_seed)
                if math.isnan(value):
                    raise ValueError("fitness is NaN")
            except LabelAccessError:
                raise  # a label leak is a protocol violation, not a bad genome
            except Exception as exc:  # noqa: BLE001 - one bad genome must not end the run
                log.warning("evaluation failed at round %d: %s", rnd, exc)
                value, info = -math.inf, {"error": f"{type(exc).__name__}: {exc}"}
            if cache is not None:
                cache.put(ind.genome, ind.eval_seed, (value, info))
        ind.set_fitness(value, info)
        best_so_far = max(best_so_far, value)
        rec = {
            "round": rnd,
            "index": index,
            "strategy": strategy,
            "genome": ind.genome.tolist(),
            "fitness": value,
            "best_so_far": best_so_far,
            "cached": hit is not None,
            **info,
        }
        state.history.append(rec)
        if on_record is not None:
            on_record(rec, time.perf_counter() - t0)

    if strategy == "random":
        for r in range(budget):
            evaluate(Individual(rng.random(dim), eval_seed, r), r)

    elif strategy == "grid":
        for r, g in enumerate(grid_points(dim, grid_levels, budget, rng)):
            evaluate(Individual(g, eval_seed, r), r)

    elif strategy == "tournament":
        # the seed population is drawn exactly like random search
        for r in range(min(capacity, budget)):
            ind = Individual(rng.random(dim), eval_seed, r)
            evaluate(ind, r)
            state.population.append(ind)
        while state.evaluations < budget:
            r = state.evaluations
            tournament_step(state, min(t_size, len(state.population)), rng,
                            lambda child: evaluate(child, r))

    elif strategy == "cmaes":
        state.cma = new_cma(dim, sigma=cma_sigma, lam=cma_popsize)
        while state.evaluations < budget:
            gen = state.cma.generation
            batch = cma_ask(state, rng, round_born=gen, eval_seed=eval_seed)
            room = budget - state.evaluations
            for i, ind in enumerate(batch[:room]):
                evaluate(ind, gen, i)
            if room >= len(batch):
                cma_tell(state, batch)
            # a partial final generation is scored but never told

    best = state.best()
    return best, state


def random_genomes(n: int, dim: int, seed: int) -> np.ndarray:
    return np.random.default_rng(seed).random((n, dim))
