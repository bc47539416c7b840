"""Genetic-algorithm search over both parties' intensities and probabilities.

The search vector has 12 entries, Alice's ``(s, mu, nu, p_s, p_mu, p_nu)``
followed by Bob's. Intensities are searched in log10 space, because the two
parties' optima differ by orders of magnitude. Probabilities are searched
linearly. The weakest decoy ``omega`` is fixed.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .channel import ChannelSpec, discretize
from .detection import counts_table, pooled_counts
from .finite_key import key_rate_arrays
from .params import DeviceParams, ParameterError, ProtocolParams

logger = logging.getLogger(__name__)

N_PARAMS = 12
INTENSITY_SLOTS = (0, 1, 2, 6, 7, 8)
PROBABILITY_SLOTS = ((3, 4, 5), (9, 10, 11))
MIN_GAP = 1e-4
SIMPLEX_TARGET = 0.999
INFEASIBLE = -np.inf
FITNESS_MODES = ("static-mean", "turbulence-averaged")


class OptimizationError(RuntimeError):
    """The problem admits no feasible candidate."""


@dataclass(frozen=True)
class SearchBounds:
    intensity: tuple[float, float] = (1e-4, 1.0)
    probability: tuple[float, float] = (1e-3, 0.997)

    def __post_init__(self):
        lo, hi = self.intensity
        if not 0 < lo < hi:
            raise OptimizationError(f"intensity bounds {self.intensity} are empty or non-positive")
        plo, phi = self.probability
        if not 0 < plo < phi < 1:
            raise OptimizationError(f"probability bounds {self.probability} are invalid")
        if 3 * plo >= SIMPLEX_TARGET:
            raise OptimizationError("probability lower bounds leave no room on the simplex")

    def lower(self) -> np.ndarray:
        out = np.empty(N_PARAMS)
        for k in range(N_PARAMS):
            out[k] = self.intensity[0] if k in INTENSITY_SLOTS else self.probability[0]
        return out

    def upper(self) -> np.ndarray:
        out = np.empty(N_PARAMS)
        for k in range(N_PARAMS):
            out[k] = self.intensity[1] if k in INTENSITY_SLOTS else self.probability[1]
        return out


@dataclass(frozen=True)
class OptimizationProblem:
    """Key-rate maximization at given mean transmittances.

    With ``tie_signal_flux`` Bob's signal is not searched; it is set to
    ``s_A * eta0_a / eta0_b`` so both signals reach the relay with equal
    mean photon flux.
    """

    eta0_a: float
    eta0_b: float
    dev: DeviceParams
    omega: float = 0.0
    fitness_mode: str = "static-mean"
    bounds: SearchBounds = field(default_factory=SearchBounds)
    sigma2_a: float = 0.0
    sigma2_b: float = 0.0
    n_bins: int = 30
    form: str = "standard"
    tie_signal_flux: bool = False

    def __post_init__(self):
        if self.fitness_mode not in FITNESS_MODES:
            raise OptimizationError(f"unknown fitness mode {self.fitness_mode!r}")
        if not (0 < self.eta0_a <= 1 and 0 < self.eta0_b <= 1):
            raise OptimizationError("mean transmittances must lie in (0, 1]")
        if self.omega < 0:
            raise OptimizationError(f"omega={self.omega} out of range")
        if self.omega + 2 * MIN_GAP > self.bounds.intensity[1]:
            raise OptimizationError("omega leaves no room for mu > nu > omega")

    def decode(self, x) -> tuple[ProtocolParams, ProtocolParams]:
        x = np.asarray(x, dtype=float)
        a = x[:6].copy()
        b = x[6:].copy()
        if self.tie_signal_flux:
            b[0] = a[0] * self.eta0_a / self.eta0_b
        return (ProtocolParams.from_vector(a, self.omega),
                ProtocolParams.from_vector(b, self.omega))


@dataclass(frozen=True)
class GaConfig:
    population: int = 80
    generations: int = 300
    crossover_rate: float = 0.9
    mutation_rate: float = 0.15
    mutation_scale: float = 0.1
    tournament_size: int = 3
    seed: int = 0
    elitism: int = 2
    blend_alpha: float = 0.5

    def __post_init__(self):
        if self.population < 4:
            raise OptimizationError(f"population must be >= 4, got {self.population}")
        if self.generations < 0:
            raise OptimizationError("generations must be >= 0")
        for name in ("crossover_rate", "mutation_rate", "mutation_scale"):
            v = getattr(self, name)
            if not 0 <= v <= 1:
                raise OptimizationError(f"{name}={v} must lie in [0, 1]")
        if not 0 <= self.elitism < self.population:
            raise OptimizationError("elitism must be smaller than the population")
        if not 1 <= self.tournament_size <= self.population:
            raise OptimizationError("tournament size out of range")


def constrain(candidate, bounds: SearchBounds = SearchBounds(), omega: float = 0.0) -> np.ndarray:
    """Repair a raw candidate into the feasible set.

    Clips to the bounds, sorts each party's decoys so that mu > nu with
    ``nu >= omega + 1e-4`` and ``mu >= nu + 1e-4``, and pulls each party's
    probabilities towards the lower bound until they sum to at most 0.999.
    Applying it twice gives the same vector as applying it once.
    """
    x = np.array(candidate, dtype=float)
    if x.shape != (N_PARAMS,):
        raise ValueError(f"candidate must have {N_PARAMS} entries")
    x = np.clip(x, bounds.lower(), bounds.upper())
    lo_i, hi_i = bounds.intensity
    for base in (0, 6):
        mu, nu = sorted((x[base + 1], x[base + 2]), reverse=True)
        nu = min(max(nu, omega + MIN_GAP, lo_i), hi_i - MIN_GAP)
        mu = min(max(mu, nu + MIN_GAP), hi_i)
        x[base + 1], x[base + 2] = mu, nu
    plo = bounds.probability[0]
    for slots in PROBABILITY_SLOTS:
        p = x[list(slots)]
        total = p.sum()
        if total > SIMPLEX_TARGET + 1e-12:
            p = plo + (p - plo) * (SIMPLEX_TARGET - 3 * plo) / (total - 3 * plo)
            x[list(slots)] = p
    return x


def _evaluate(x, problem: OptimizationProblem, dists=None) -> dict | None:
    try:
        alice, bob = problem.decode(x)
    except ParameterError:
        return None
    dev = problem.dev
    if problem.fitness_mode == "static-mean":
        counts = counts_table(alice, bob, problem.eta0_a, problem.eta0_b, dev, dev.n_pulses)
    else:
        da, db = dists if dists is not None else _distributions(problem)
        counts = pooled_counts(alice, bob, da, db, dev)
    with np.errstate(all="ignore"):
        r = key_rate_arrays(counts, alice, bob, dev, problem.form)
    return {k: float(v) for k, v in r.items()} | {"p_ss": alice.p_s * bob.p_s}


def _distributions(problem: OptimizationProblem):
    return (discretize(ChannelSpec(problem.eta0_a, problem.sigma2_a), problem.n_bins),
            discretize(ChannelSpec(problem.eta0_b, problem.sigma2_b), problem.n_bins))


def fitness(candidate, problem: OptimizationProblem) -> float:
    """Key rate per pulse pair of a candidate, or ``-inf`` if it is infeasible.

    Infeasible means the vector is not a valid pair of parameter sets
    (ordering violated, probabilities outside (0, 1) or summing above 1).
    """
    x = np.asarray(candidate, dtype=float)
    if np.all(x[list(INTENSITY_SLOTS)] == 0) and problem.omega == 0:
        # no light at all: a valid experiment that simply produces no key
        return 0.0
    r = _evaluate(x, problem)
    if r is None:
        return INFEASIBLE
    return r["rate"]


def _search_score(r: dict | None) -> float:
    """Selection score: the rate where positive, otherwise a value in (-2, -1.5].

    Most of the space has rate exactly 0, which gives selection nothing to
    work with. There the score is a logistic map of the signed key fraction
    of sifted Z events, ``raw / (p_s p_s Q_zz)``, so selection still climbs
    towards the key-generating region. Every candidate with a positive rate
    outranks every candidate without one.
    """
    if r is None:
        return -np.inf
    if r["rate"] > 0:
        return r["rate"]
    denom = r["p_ss"] * r["q_zz"]
    if not denom > 0 or not np.isfinite(r["raw_rate"]):
        return -2.0
    margin = r["raw_rate"] / denom
    return -2.0 + float(expit(margin))


def _encode(x, bounds: SearchBounds) -> np.ndarray:
    g = np.array(x, dtype=float)
    g[list(INTENSITY_SLOTS)] = np.log10(g[list(INTENSITY_SLOTS)])
    return g


def _decode(g) -> np.ndarray:
    x = np.array(g, dtype=float)
    x[list(INTENSITY_SLOTS)] = 10.0 ** x[list(INTENSITY_SLOTS)]
    return x


@dataclass
class OptimizationResult:
    alice: ProtocolParams
    bob: ProtocolParams
    best_rate: float
    best_vector: np.ndarray
    trace: list[tuple[int, float, float]]  # (generation, best_rate, mean_rate)
    evaluations: int

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["generation", "best_rate", "mean_rate"])
            for g, best, mean in self.trace:
                w.writerow([g, repr(best), repr(mean)])


def optimize(problem: OptimizationProblem, ga: GaConfig = GaConfig()) -> OptimizationResult:
    """Maximize the key rate with a seeded elitist genetic algorithm.

    Tournament selection, blend crossover and Gaussian mutation operate on
    the encoded vector; every child is repaired with :func:`constrain`. The
    best rate in the trace never decreases because the elite are copied
    unchanged. Results depend only on ``ga.seed``.
    """
    rng = np.random.default_rng(ga.seed)
    bounds = problem.bounds
    glo = _encode(bounds.lower(), bounds)
    ghi = _encode(bounds.upper(), bounds)
    span = ghi - glo
    dists = _distributions(problem) if problem.fitness_mode == "turbulence-averaged" else None
    evaluations = 0

    def repair(g):
        return _encode(constrain(_decode(g), bounds, problem.omega), bounds)

    def score(g):
        nonlocal evaluations
        evaluations += 1
        r = _evaluate(_decode(g), problem, dists)
        return _search_score(r), (r["rate"] if r is not None else 0.0)

    pop = np.empty((ga.population, N_PARAMS))
    scores = np.full(ga.population, -np.inf)
    rates = np.zeros(ga.population)
    for k in range(ga.population):
        for _ in range(100):
            g = repair(glo + rng.random(N_PARAMS) * span)
            s, r = score(g)
            if np.isfinite(s):
                break
        else:
            raise OptimizationError("no feasible candidate after 100 resampling attempts")
        pop[k], scores[k], rates[k] = g, s, r

    def record(gen):
        best = int(np.argmax(scores))
        trace.append((gen, float(rates[best]), float(np.mean(rates))))

    trace: list[tuple[int, float, float]] = []
    record(0)

    def tournament():
        idx = rng.integers(ga.population, size=ga.tournament_size)
        return pop[idx[np.argmax(scores[idx])]]

    for gen in range(1, ga.generations + 1):
        order = np.argsort(-scores, kind="stable")
        new_pop = [pop[i].copy() for i in order[:ga.elitism]]
        new_scores = [scores[i] for i in order[:ga.elitism]]
        new_rates = [rates[i] for i in order[:ga.elitism]]
        while len(new_pop) < ga.population:
            p1, p2 = tournament(), tournament()
            if rng.random() < ga.crossover_rate:
                lam = rng.uniform(-ga.blend_alpha, 1 + ga.blend_alpha, N_PARAMS)
                child = p1 + lam * (p2 - p1)
            else:
                child = p1.copy()
            mask = rng.random(N_PARAMS) < ga.mutation_rate
            child = child + mask * rng.normal(0.0, ga.mutation_scale, N_PARAMS) * span
            child = repair(child)
            s, r = score(child)
            new_pop.append(child)
            new_scores.append(s)
            new_rates.append(r)
        pop = np.array(new_pop)
        scores = np.array(new_scores)
        rates = np.array(new_rates)
        record(gen)
        if gen % 50 == 0:
            logger.info("generation %d: best rate %.4g", gen, trace[-1][1])

    best = int(np.argmax(scores))
    x = _decode(pop[best])
    alice, bob = problem.decode(x)
    return OptimizationResult(alice, bob, float(rates[best]), x, trace, evaluations)


def flux_symmetric_problem(problem: OptimizationProblem) -> OptimizationProblem:
    """Same problem with Bob's signal tied to equal mean flux at the relay."""
    from dataclasses import replace

    return replace(problem, tie_signal_flux=True)


def params_vector(alice: ProtocolParams, bob: ProtocolParams) -> np.ndarray:
    return np.concatenate([alice.as_vector(), bob.as_vector()])
