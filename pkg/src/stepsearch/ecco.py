"""Evolutionary co-optimisation of hyperparameters and a data curriculum.

A genome couples a :class:`Configuration` with a :class:`CurriculumSchedule`.
Continuous genes recombine by simulated binary crossover in the unit-cube
encoding (so log-scaled parameters recombine in log space), categorical and
integer-tuple genes by uniform crossover, integers by SBX then rounding, and
curricula by one-point crossover on the stage list followed by repair.
Selection is a k-tournament with single-genome elitism; fitness is
``performance - lam * cost / reference_cost``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from stepsearch.curriculum import ALL_CONDITIONS, CurriculumSchedule, Stage
from stepsearch.seeding import as_rng, derive_seed
from stepsearch.space import (
    Categorical,
    Configuration,
    Continuous,
    Integer,
    IntTuple,
    SearchSpace,
    sample_random,
    validate_config,
)
from stepsearch.trainer import FidelityLevel, TrialError, parallel_map


class EccoError(RuntimeError):
    pass


@dataclass(frozen=True)
class Genome:
    hyperparams: Configuration
    curriculum: CurriculumSchedule

    def to_dict(self) -> dict:
        return {"hyperparams": self.hyperparams.to_dict(), "curriculum": self.curriculum.to_pairs()}

    @classmethod
    def from_dict(cls, d) -> "Genome":
        return cls(Configuration(d["hyperparams"]), CurriculumSchedule.from_pairs(d["curriculum"]))


def genome_violations(g: Genome, space: SearchSpace, total_epochs: int) -> list[str]:
    return validate_config(space, g.hyperparams) + g.curriculum.violations(total_epochs)


@dataclass(frozen=True)
class Fitness:
    performance: float
    cost: float
    scalar: float
    failed: bool = False

    def to_dict(self) -> dict:
        return {"performance": self.performance, "cost": self.cost, "scalar": self.scalar, "failed": self.failed}


def make_fitness(performance: float, cost: float, reference_cost: float, lam: float) -> Fitness:
    return Fitness(performance, cost, performance - lam * (cost / reference_cost))


FAILED = Fitness(0.0, 0.0, -math.inf, failed=True)


# ---------------------------------------------------------------------------
# Operators
# ---------------------------------------------------------------------------


def sbx_crossover(p1: float, p2: float, eta: float, bounds=None, seed=None) -> tuple[float, float]:
    """Simulated binary crossover with spread factor ``beta``.

    Children are ``((1 +- beta) p1 + (1 -+ beta) p2) / 2``, so their mean is
    the parents' mean before clipping to ``bounds``.
    """
    if eta <= 0:
        raise ValueError("eta must be > 0")
    u = as_rng(seed).random()
    if u <= 0.5:
        beta = (2.0 * u) ** (1.0 / (eta + 1.0))
    else:
        beta = (1.0 / (2.0 * (1.0 - u))) ** (1.0 / (eta + 1.0))
    # mean +- half-spread form keeps identical parents fixed exactly
    mid, half = 0.5 * (p1 + p2), 0.5 * beta * (p1 - p2)
    c1, c2 = mid + half, mid - half
    if bounds is not None:
        lo, hi = bounds
        c1, c2 = min(max(c1, lo), hi), min(max(c2, lo), hi)
    return c1, c2


def uniform_crossover(p1, p2, seed=None):
    rng = as_rng(seed)
    pick = rng.random(2) < 0.5
    return (p1 if pick[0] else p2), (p1 if pick[1] else p2)


def repair_schedule(stages: Sequence[tuple[int, frozenset]], total_epochs: int) -> CurriculumSchedule:
    """Force a stage list into a valid schedule.

    The first stage starts at epoch 1, starts become strictly increasing and
    end before ``total_epochs``, and condition sets become the running union
    (so they nest). Stages that cannot fit are dropped; the last survivor
    inherits the final (largest) condition set.
    """
    if total_epochs < 2:
        raise ValueError("a curriculum needs at least two epochs")
    stages = [(int(s), frozenset(c)) for s, c in stages]
    acc: frozenset = frozenset()
    nested = []
    for s, c in stages:
        acc = acc | c
        nested.append([s, acc])
    if not nested or not nested[0][1]:
        raise ValueError("first stage needs a non-empty condition set")
    cap = total_epochs - 1
    if len(nested) > cap:
        final = nested[-1][1]
        nested = nested[:cap]
        nested[-1][1] = final
    n = len(nested)
    nested[0][0] = 1
    for i in range(1, n):
        nested[i][0] = max(nested[i][0], nested[i - 1][0] + 1)
    for i in range(n):
        nested[i][0] = min(nested[i][0], cap - (n - 1 - i))
    return CurriculumSchedule(tuple(Stage(s, c) for s, c in nested))


def curriculum_crossover(a: CurriculumSchedule, b: CurriculumSchedule, total_epochs: int, seed=None):
    rng = as_rng(seed)
    longest = max(len(a.stages), len(b.stages))
    if longest < 2:
        return a, b
    cut = int(rng.integers(1, longest))
    sa = [(s.start_epoch, s.conditions) for s in a.stages]
    sb = [(s.start_epoch, s.conditions) for s in b.stages]
    return (
        repair_schedule(sa[:cut] + sb[cut:], total_epochs),
        repair_schedule(sb[:cut] + sa[cut:], total_epochs),
    )


def crossover_genomes(g1: Genome, g2: Genome, space: SearchSpace, total_epochs: int, eta: float = 15.0, seed=None):
    rng = as_rng(seed)
    h1, h2 = {}, {}
    for p in space.params:
        v1, v2 = g1.hyperparams[p.name], g2.hyperparams[p.name]
        if isinstance(p, Continuous):
            u1, u2 = sbx_crossover(p.encode(v1)[0], p.encode(v2)[0], eta, (0.0, 1.0), rng)
            h1[p.name], h2[p.name] = p.decode([u1]), p.decode([u2])
        elif isinstance(p, Integer):
            a, b = sbx_crossover(float(v1), float(v2), eta, (p.lo, p.hi), rng)
            h1[p.name], h2[p.name] = int(round(a)), int(round(b))
        else:
            h1[p.name], h2[p.name] = uniform_crossover(v1, v2, rng)
    c1, c2 = curriculum_crossover(g1.curriculum, g2.curriculum, total_epochs, rng)
    return Genome(Configuration(h1), c1), Genome(Configuration(h2), c2)


@dataclass(frozen=True)
class MutationRates:
    param: float = 0.2
    boundary: float = 0.3
    condition: float = 0.1
    max_shift: int = 5
    sigma: float = 0.1  # fraction of the (encoded) range


def mutate_genome(g: Genome, rates: MutationRates, space: SearchSpace, total_epochs: int, seed=None) -> Genome:
    rng = as_rng(seed)
    h = dict(g.hyperparams)
    for p in space.params:
        if rng.random() >= rates.param:
            continue
        v = h[p.name]
        if isinstance(p, Categorical):
            h[p.name] = p.sample(rng)
        elif isinstance(p, IntTuple):
            x = np.asarray(p.encode(v)) + rates.sigma * rng.standard_normal(p.length)
            h[p.name] = p.decode(np.clip(x, 0.0, 1.0))
        else:
            x = p.encode(v)[0] + rates.sigma * rng.standard_normal()
            h[p.name] = p.decode([min(max(x, 0.0), 1.0)])

    stages = [[s.start_epoch, s.conditions] for s in g.curriculum.stages]
    changed = False
    for st in stages[1:]:
        if rng.random() < rates.boundary:
            shift = int(rng.integers(1, rates.max_shift + 1)) * (1 if rng.random() < 0.5 else -1)
            st[0] += shift
            changed = True
    for i in range(len(stages)):
        if rng.random() < rates.condition:
            missing = sorted(set(ALL_CONDITIONS) - stages[i][1])
            if missing:
                tag = missing[int(rng.integers(len(missing)))]
                for later in stages[i:]:
                    later[1] = later[1] | {tag}
                changed = True
    curriculum = repair_schedule(stages, total_epochs) if changed else g.curriculum
    return Genome(Configuration(h), curriculum)


def random_curriculum(total_epochs: int, rng, max_stages: int = 4) -> CurriculumSchedule:
    n = int(rng.integers(1, min(max_stages, total_epochs - 1) + 1))
    starts = [1] + sorted(int(s) for s in rng.choice(np.arange(2, total_epochs), size=n - 1, replace=False))
    order = [ALL_CONDITIONS[i] for i in rng.permutation(len(ALL_CONDITIONS))]
    # first stage 1-4 combinations, later stages each add at least one more
    take = int(rng.integers(1, 5))
    stages = []
    for i, s in enumerate(starts):
        if i:
            remaining = len(ALL_CONDITIONS) - take
            take += int(rng.integers(1, remaining + 1)) if remaining else 0
        stages.append((s, frozenset(order[:take])))
    return repair_schedule(stages, total_epochs)


def random_genome(space: SearchSpace, total_epochs: int, seed=None, max_stages: int = 4) -> Genome:
    rng = as_rng(seed)
    return Genome(sample_random(space, rng), random_curriculum(total_epochs, rng, max_stages))


def tournament_index(scalars: Sequence[float], k: int, seed=None) -> int:
    if not len(scalars):
        raise ValueError("empty population")
    if k < 1:
        raise ValueError("tournament size must be >= 1")
    rng = as_rng(seed)
    drawn = rng.integers(0, len(scalars), size=k)
    return int(min(drawn, key=lambda i: (-scalars[i], i)))


def tournament_select(population: Sequence[tuple[Genome, Fitness]], k: int = 3, seed=None) -> Genome:
    """k draws with replacement; best scalar wins, lowest index on ties."""
    i = tournament_index([f.scalar for _, f in population], k, seed)
    return population[i][0]


# ---------------------------------------------------------------------------
# Fitness and search
# ---------------------------------------------------------------------------


def evaluate_fitness(
    g: Genome,
    trainer,
    lam: float,
    seed: int,
    *,
    arch,
    total_epochs: int,
    data_fraction: float = 1.0,
    reference_cost: float | None = None,
) -> Fitness:
    """Full-length curriculum-aware trial; failures map to the ``FAILED`` sentinel."""
    fid = FidelityLevel(total_epochs, data_fraction, rung=0, full=True)
    ref = reference_cost if reference_cost is not None else total_epochs * data_fraction
    try:
        rec = trainer.run(arch, g.hyperparams, fid, seed, g.curriculum)
    except TrialError:
        return FAILED
    return make_fitness(rec.final_performance, rec.cost, ref, lam)


@dataclass(frozen=True)
class EccoConfig:
    pop_size: int = 16
    generations: int = 30
    total_epochs: int = 30
    lam: float = 0.1
    tournament_k: int = 3
    crossover_prob: float = 0.9
    sbx_eta: float = 15.0
    rates: MutationRates = MutationRates()
    max_stages: int = 4
    data_fraction: float = 1.0
    reference_cost: float | None = None
    failure_cap: int = 5

    def __post_init__(self):
        if self.pop_size < 2:
            raise ValueError("pop_size must be >= 2")
        if self.generations < 0:
            raise ValueError("generations must be >= 0")
        if self.total_epochs < 2:
            raise ValueError("total_epochs must be >= 2")


@dataclass
class EccoResult:
    best: Genome
    fitness: Fitness
    history: list[dict]
    populations: list[list[Genome]] = field(default_factory=list, repr=False)


Evaluator = Callable[[Genome, int], Fitness]


def ecco_search(
    space: SearchSpace,
    trainer,
    cfg: EccoConfig = EccoConfig(),
    seed: int = 0,
    *,
    arch=None,
    workers: int = 1,
    history_path: str | Path | None = None,
    evaluator: Evaluator | None = None,
    keep_populations: bool = False,
) -> EccoResult:
    """Generational GA; ``history`` has one entry per generation after the initial one.

    ``evaluator(genome, seed)`` replaces the trainer-backed fitness when given.
    """
    arch = space.classes[0] if arch is None else space.arch(arch)
    sub = space.for_class(arch)
    if evaluator is None:
        def evaluator(g: Genome, s: int) -> Fitness:
            return evaluate_fitness(
                g, trainer, cfg.lam, s, arch=arch, total_epochs=cfg.total_epochs,
                data_fraction=cfg.data_fraction, reference_cost=cfg.reference_cost,
            )

    path = Path(history_path) if history_path is not None else None
    if path is not None and path.exists():
        path.unlink()
    failures = 0

    def evaluate(genomes: list[Genome], gen: int, offset: int) -> list[Fitness]:
        nonlocal failures
        jobs = [(g, derive_seed(seed, "eval", gen, offset + i)) for i, g in enumerate(genomes)]
        out = parallel_map(lambda j: evaluator(*j), jobs, workers)
        failures += sum(f.failed for f in out)
        if failures > cfg.failure_cap:
            raise EccoError(f"generation {gen}: {failures} failed evaluations exceed the cap")
        return out

    rng = as_rng(derive_seed(seed, "ecco"))
    pop = [random_genome(sub, cfg.total_epochs, rng, cfg.max_stages) for _ in range(cfg.pop_size)]
    fits = evaluate(pop, 0, 0)
    best_i = _argbest(fits)
    best, best_fit = pop[best_i], fits[best_i]
    history: list[dict] = []
    populations = [pop] if keep_populations else []

    for gen in range(1, cfg.generations + 1):
        elite = _argbest(fits)
        scalars = [f.scalar for f in fits]
        children: list[Genome] = []
        while len(children) < cfg.pop_size - 1:
            p1 = pop[tournament_index(scalars, cfg.tournament_k, rng)]
            p2 = pop[tournament_index(scalars, cfg.tournament_k, rng)]
            if rng.random() < cfg.crossover_prob:
                c1, c2 = crossover_genomes(p1, p2, sub, cfg.total_epochs, cfg.sbx_eta, rng)
            else:
                c1, c2 = p1, p2
            children.append(mutate_genome(c1, cfg.rates, sub, cfg.total_epochs, rng))
            if len(children) < cfg.pop_size - 1:
                children.append(mutate_genome(c2, cfg.rates, sub, cfg.total_epochs, rng))
        pop = [pop[elite]] + children
        fits = [fits[elite]] + evaluate(children, gen, 1)
        if keep_populations:
            populations.append(pop)
        gi = _argbest(fits)
        if fits[gi].scalar > best_fit.scalar:
            best, best_fit = pop[gi], fits[gi]
        ok = [f.scalar for f in fits if not f.failed]
        entry = {
            "generation": gen,
            "best_scalar": fits[gi].scalar,
            "mean_scalar": float(np.mean(ok)) if ok else -math.inf,
            "best_genome": pop[gi].to_dict(),
            "best_fitness": fits[gi].to_dict(),
            "failed": sum(f.failed for f in fits),
        }
        history.append(entry)
        if path is not None:
            with path.open("a") as fh:
                fh.write(json.dumps(entry, sort_keys=True) + "\n")

    return EccoResult(best, best_fit, history, populations)


def _argbest(fits: Sequence[Fitness]) -> int:
    return min(range(len(fits)), key=lambda i: (-fits[i].scalar, i))


def curriculum_optimum(bench, lam: float, total_epochs: int) -> tuple[float, float]:
    """Supremum over curricula of ``-(curriculum penalty) - lam * rho`` for the synthetic bench.

    Returns ``(rho_opt, value)``. Assumes the final stage uses every
    condition combination, which is optimal whenever ``coverage_weight >= lam``.
    """
    n = len(ALL_CONDITIONS)
    rho_min = ((total_epochs - 1) + n) / (n * total_epochs)
    kappa, target = bench.curriculum_weight, bench.curriculum_target
    if kappa > 0:
        rho = min(max(target - lam / (2 * kappa), rho_min), 1.0)
    else:
        rho = rho_min if lam > 0 else 1.0
    return rho, -(kappa * (rho - target) ** 2) - lam * rho
