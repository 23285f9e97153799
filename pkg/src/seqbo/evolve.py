"""Genetic-algorithm maximiser of an acquisition function over masked mutants.

Offspring are built by optional single-point splice crossover followed by a
single-residue mutation inside the CDR mask. Children are repaired so that
every position outside the mask equals the wild type. Fitness values are
cached, so a sequence is never evaluated twice.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from .seqcore import DEFAULT_ALPHABET, Alphabet, AntibodySequence, CdrMask, RngStream, SequenceError


class GaExhausted(RuntimeError):
    """No non-forbidden sequence was reached within the GA budget."""


@dataclass(frozen=True)
class GaConfig:
    mask: CdrMask
    population_size: int = 128
    generations: int = 50
    offspring: int = 64
    crossover_prob: float = 0.5
    elite_fraction: float = 0.25
    # cap on the number of positions differing from the wild type
    max_mutations: int | None = None

    def __post_init__(self):
        for name in ("population_size", "generations", "offspring"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if not 0.0 <= self.crossover_prob <= 1.0:
            raise ValueError("crossover_prob must lie in [0, 1]")
        if not 0.0 < self.elite_fraction <= 1.0:
            raise ValueError("elite_fraction must lie in (0, 1]")
        if self.max_mutations is not None and self.max_mutations < 1:
            raise ValueError("max_mutations must be positive")


@dataclass(frozen=True)
class ScoredIndividual:
    sequence: AntibodySequence
    fitness: float


def ga_mutate(seq: AntibodySequence, mask: CdrMask, rng: RngStream,
              alphabet: Alphabet = DEFAULT_ALPHABET) -> AntibodySequence:
    """Change one uniformly chosen mask position to a different residue."""
    pos = mask.positions[int(rng.integers(len(mask)))]
    current = seq.joined[pos]
    choices = [r for r in alphabet.residues if r != current]
    return seq.with_residues({pos: choices[int(rng.integers(len(choices)))]})


def crossover_at(a: AntibodySequence, b: AntibodySequence, cut: int) -> AntibodySequence:
    return AntibodySequence(a.joined[:cut] + b.joined[cut:], a.separator_position)


def ga_crossover(a: AntibodySequence, b: AntibodySequence, rng: RngStream) -> AntibodySequence:
    """Splice ``a[:c] + b[c:]`` at a uniform cut ``c`` in ``1..L-1``."""
    if len(a) != len(b):
        raise SequenceError(f"length mismatch: {len(a)} vs {len(b)}")
    if len(a) < 2:
        return a
    return crossover_at(a, b, int(rng.integers(1, len(a))))


def _repair(child: AntibodySequence, wt: AntibodySequence, mask: CdrMask,
            max_mutations: int | None, rng: RngStream) -> AntibodySequence:
    chars = list(child.joined)
    mask_set = set(mask.positions)
    for i, (c, w) in enumerate(zip(chars, wt.joined)):
        if c != w and i not in mask_set:
            chars[i] = w
    if max_mutations is not None:
        diffs = [i for i in mask.positions if chars[i] != wt.joined[i]]
        while len(diffs) > max_mutations:
            i = diffs.pop(int(rng.integers(len(diffs))))
            chars[i] = wt.joined[i]
    return AntibodySequence("".join(chars), wt.separator_position)


def per_sequence(f: Callable[[AntibodySequence], float]) -> Callable[[list], np.ndarray]:
    """Adapt a single-sequence fitness function to the batched interface."""
    return lambda seqs: np.array([f(s) for s in seqs], dtype=np.float64)


class GeneticOptimizer:
    """Elitist GA; see :func:`ga_maximize` for the public entry point."""

    def __init__(self, fitness: Callable[[list], Sequence[float]], cfg: GaConfig,
                 wild_type: AntibodySequence, rng: RngStream,
                 alphabet: Alphabet = DEFAULT_ALPHABET):
        self.fitness = fitness
        self.cfg = cfg
        self.wt = wild_type
        self.rng = rng
        self.alphabet = alphabet
        self.cache: dict[AntibodySequence, float] = {}
        self.n_proposed = 0

    @property
    def n_evaluations(self) -> int:
        return len(self.cache)

    def evaluate(self, seqs: Iterable[AntibodySequence]) -> None:
        fresh = list(dict.fromkeys(s for s in seqs if s not in self.cache))
        if not fresh:
            return
        values = np.asarray(self.fitness(fresh), dtype=np.float64)
        if values.shape != (len(fresh),):
            raise ValueError("fitness must return one value per sequence")
        values = np.where(np.isfinite(values), values, -np.inf)
        for s, v in zip(fresh, values):
            self.cache[s] = float(v)

    def repair(self, seq: AntibodySequence) -> AntibodySequence:
        return _repair(seq, self.wt, self.cfg.mask, self.cfg.max_mutations, self.rng)

    def _ranked(self, pop: list[AntibodySequence]) -> list[AntibodySequence]:
        # stable: ties keep insertion order
        return sorted(pop, key=lambda s: -self.cache[s])

    def _tournament(self, elite: list[AntibodySequence]) -> AntibodySequence:
        i, j = self.rng.integers(len(elite), size=2)
        return elite[min(int(i), int(j))]

    def initial_population(self, seeds: Sequence[AntibodySequence]) -> list[AntibodySequence]:
        pop = list(dict.fromkeys(self.repair(s) for s in seeds))
        attempts = 0
        limit = 20 * self.cfg.population_size
        while len(pop) < self.cfg.population_size and attempts < limit:
            attempts += 1
            parent = pop[int(self.rng.integers(len(pop)))]
            child = self.repair(ga_mutate(parent, self.cfg.mask, self.rng, self.alphabet))
            if child not in pop:
                pop.append(child)
        self.evaluate(pop)
        return self._ranked(pop)[: self.cfg.population_size]

    def step(self, pop: list[AntibodySequence]) -> list[AntibodySequence]:
        cfg = self.cfg
        n_elite = max(1, math.ceil(cfg.elite_fraction * len(pop)))
        elite = pop[:n_elite]
        children = []
        for _ in range(cfg.offspring):
            child = self._tournament(elite)
            if self.rng.random() < cfg.crossover_prob:
                child = ga_crossover(child, self._tournament(elite), self.rng)
            child = self.repair(ga_mutate(child, cfg.mask, self.rng, self.alphabet))
            children.append(child)
        self.n_proposed += len(children)
        self.evaluate(children)
        merged = list(dict.fromkeys(pop + children))
        return self._ranked(merged)[: cfg.population_size]

    def run(self, seeds: Sequence[AntibodySequence]) -> list[AntibodySequence]:
        pop = self.initial_population(seeds)
        for _ in range(self.cfg.generations):
            pop = self.step(pop)
        return pop

    def best(self, forbidden=frozenset()) -> ScoredIndividual:
        best = None
        for s, v in self.cache.items():
            if s in forbidden or not np.isfinite(v):
                continue
            if best is None or v > best.fitness:
                best = ScoredIndividual(s, v)
        if best is None:
            raise GaExhausted("every sequence reached by the GA is forbidden")
        return best


def ga_maximize(
    fitness: Callable[[list], Sequence[float]],
    seedpop: Sequence[AntibodySequence],
    cfg: GaConfig,
    forbidden=frozenset(),
    rng: RngStream | None = None,
    wild_type: AntibodySequence | None = None,
    alphabet: Alphabet = DEFAULT_ALPHABET,
) -> ScoredIndividual:
    """Evolve ``seedpop`` to maximise ``fitness`` and return the best new sequence.

    Parameters
    ----------
    fitness : callable
        Batched fitness: takes a list of sequences, returns one float each.
        Use :func:`per_sequence` to wrap a scalar function.
    seedpop : sequence of AntibodySequence
        Initial individuals; padded with mutants up to the population size.
    cfg : GaConfig
        GA settings, including the CDR mask.
    forbidden : set of AntibodySequence
        Sequences that may be used as parents but are never returned.
    rng : RngStream
        Source of randomness; identical streams give identical results.
    wild_type : AntibodySequence, optional
        Reference for repairing positions outside the mask. Defaults to the
        first seed.

    Raises
    ------
    GaExhausted
        If every evaluated sequence is forbidden.
    """
    if not seedpop:
        raise ValueError("seed population must be non-empty")
    rng = rng if rng is not None else RngStream(0, "ga")
    wt = wild_type if wild_type is not None else seedpop[0]
    cfg.mask.validate_for(wt)
    ga = GeneticOptimizer(fitness, cfg, wt, rng, alphabet)
    ga.run(seedpop)
    return ga.best(forbidden)
