import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from stepsearch.curriculum import ALL_CONDITIONS, CurriculumSchedule, Stage
from stepsearch.ecco import (
    FAILED,
    EccoConfig,
    EccoError,
    Fitness,
    Genome,
    MutationRates,
    crossover_genomes,
    curriculum_crossover,
    curriculum_optimum,
    ecco_search,
    evaluate_fitness,
    genome_violations,
    make_fitness,
    mutate_genome,
    random_genome,
    repair_schedule,
    sbx_crossover,
    tournament_index,
    tournament_select,
    uniform_crossover,
)
from stepsearch.seeding import as_rng, derive_seed
from stepsearch.space import ArchitectureClass, Categorical, Configuration, Continuous, SearchSpace
from stepsearch.suite import ARCH, curriculum_problem
from stepsearch.synthetic import SyntheticTrainer
from stepsearch.trainer import TrialError

E = 30
BF_W1 = frozenset(ALL_CONDITIONS[:1])
HALF = frozenset(ALL_CONDITIONS[:8])
ALL = frozenset(ALL_CONDITIONS)


@pytest.fixture(scope="module")
def problem():
    return curriculum_problem()


# -- SBX / uniform -----------------------------------------------------------


@given(st.floats(-10, 10), st.floats(0.1, 50), st.integers(0, 2**32 - 1))
def test_sbx_identical_parents(x, eta, seed):
    assert sbx_crossover(x, x, eta, seed=seed) == (x, x)


def test_sbx_mean_preservation():
    rng = as_rng(0)
    p1, p2 = 0.3, 0.7
    mids = [sum(sbx_crossover(p1, p2, 15, seed=rng)) / 2 for _ in range(100_000)]
    assert abs(np.mean(mids) - 0.5) <= 0.005
    # the per-draw identity holds exactly before clipping
    assert np.allclose(mids, 0.5, atol=1e-12)


def test_sbx_bounds_fuzz():
    rng = as_rng(1)
    for _ in range(10_000):
        lo = rng.uniform(-5, 0)
        hi = lo + rng.uniform(0.01, 5)
        p1, p2 = rng.uniform(lo, hi, 2)
        c1, c2 = sbx_crossover(p1, p2, rng.uniform(0.5, 30), (lo, hi), rng)
        assert lo <= c1 <= hi and lo <= c2 <= hi


def test_sbx_deterministic_and_rejects_bad_eta():
    assert sbx_crossover(0.1, 0.9, 5, seed=3) == sbx_crossover(0.1, 0.9, 5, seed=3)
    with pytest.raises(ValueError):
        sbx_crossover(0.1, 0.9, 0.0)


def test_uniform_crossover_frequencies():
    rng = as_rng(2)
    counts = {}
    n = 100_000
    for _ in range(n):
        pair = uniform_crossover("a", "b", rng)
        counts[pair] = counts.get(pair, 0) + 1
    assert set(counts) == {("a", "a"), ("a", "b"), ("b", "a"), ("b", "b")}
    assert all(abs(c / n - 0.25) <= 0.01 for c in counts.values())
    assert uniform_crossover("x", "x", seed=0) == ("x", "x")


# -- curricula -----------------------------------------------------------------


def test_repair_restores_order():
    out = repair_schedule([(1, BF_W1), (12, HALF), (9, ALL)], E)
    assert [s.start_epoch for s in out.stages] == [1, 12, 13]
    assert out.violations(E) == []


def test_repair_clamps_and_nests():
    out = repair_schedule([(4, HALF), (40, BF_W1), (41, BF_W1)], 10)
    assert [s.start_epoch for s in out.stages] == [1, 8, 9]
    assert all(s.conditions == HALF for s in out.stages)
    tiny = repair_schedule([(1, BF_W1), (2, HALF), (3, ALL)], 3)
    assert [s.start_epoch for s in tiny.stages] == [1, 2] and tiny.stages[-1].conditions == ALL
    with pytest.raises(ValueError):
        repair_schedule([(1, frozenset())], E)


@given(st.lists(st.tuples(st.integers(-50, 80), st.sets(st.sampled_from(ALL_CONDITIONS), max_size=4)),
                min_size=1, max_size=8).filter(lambda s: s[0][1]),
       st.integers(2, 60))
def test_repair_always_valid(stages, total):
    assert repair_schedule(stages, total).violations(total) == []


def test_curriculum_crossover_valid():
    rng = as_rng(3)
    for _ in range(500):
        a = random_genome(_space(), E, rng).curriculum
        b = random_genome(_space(), E, rng).curriculum
        for child in curriculum_crossover(a, b, E, rng):
            assert child.violations(E) == []


# -- mutation ----------------------------------------------------------------


def _space():
    return curriculum_problem()[0].space


def test_zero_rates_is_identity(problem):
    bench, _ = problem
    zero = MutationRates(0.0, 0.0, 0.0)
    rng = as_rng(4)
    for _ in range(50):
        g = random_genome(bench.space, E, rng)
        assert mutate_genome(g, zero, bench.space, E, rng) == g


def test_mutation_fuzz_validity(problem):
    bench, _ = problem
    rates = MutationRates(0.5, 0.5, 0.3)
    rng = as_rng(5)
    g = random_genome(bench.space, E, rng)
    for _ in range(10_000):
        g = mutate_genome(g, rates, bench.space, E, rng)
        assert genome_violations(g, bench.space, E) == []


def test_boundary_shift_is_repaired(problem):
    bench, _ = problem
    g = Genome(Configuration({"lr": 1e-3, "optimizer": "Adam", "dropout": 0.1}),
               CurriculumSchedule((Stage(1, BF_W1), Stage(2, HALF), Stage(3, ALL))))
    rates = MutationRates(0.0, 1.0, 0.0, max_shift=5)
    for s in range(200):
        out = mutate_genome(g, rates, bench.space, E, seed=s)
        starts = [st.start_epoch for st in out.curriculum.stages]
        assert starts[0] == 1 and all(b > a for a, b in zip(starts, starts[1:]))
        assert out.curriculum.violations(E) == []


def test_crossover_children_valid(problem):
    bench, _ = problem
    rng = as_rng(6)
    for _ in range(500):
        a, b = random_genome(bench.space, E, rng), random_genome(bench.space, E, rng)
        for child in crossover_genomes(a, b, bench.space, E, 15, rng):
            assert genome_violations(child, bench.space, E) == []


def test_genome_round_trip(problem):
    g = random_genome(problem[0].space, E, seed=7)
    assert Genome.from_dict(g.to_dict()) == g


# -- fitness ----------------------------------------------------------------


def test_fitness_arithmetic():
    assert make_fitness(0.8, 1.0, 1.0, 0.0).scalar == 0.8
    full, cheap = make_fitness(0.8, 1.0, 1.0, 0.1), make_fitness(0.8, 0.5, 1.0, 0.1)
    assert cheap.scalar - full.scalar == pytest.approx(0.05, abs=1e-12)


def test_fixture_ordering_matches_closed_form(problem):
    bench, _ = problem
    center = bench.curves[ARCH].center
    trainer = SyntheticTrainer(bench)
    schedules = {
        "full": CurriculumSchedule((Stage(1, ALL),)),
        "half_then_full": CurriculumSchedule((Stage(1, HALF), Stage(16, ALL))),
        "late_full": CurriculumSchedule((Stage(1, BF_W1), Stage(29, ALL))),
    }

    def closed_form(sched):
        # coverage per epoch is |conditions| / 16; rho is its mean, cost/reference equals rho
        cov = [len(sched.conditions_at(t)) / 16 for t in range(1, E + 1)]
        rho = sum(cov) / E
        perf = 1 - 0.05 - (rho - 0.6) ** 2 - (1 - cov[-1])
        return perf - 0.1 * rho

    got = {k: evaluate_fitness(Genome(center, s), trainer, 0.1, 0, arch=ARCH, total_epochs=E).scalar
           for k, s in schedules.items()}
    want = {k: closed_form(s) for k, s in schedules.items()}
    for k in schedules:
        assert got[k] == pytest.approx(want[k], abs=1e-12)
    assert sorted(got, key=got.get) == sorted(want, key=want.get)
    assert got["half_then_full"] > got["late_full"] > got["full"]


def test_failed_trial_gets_sentinel(problem):
    class Broken:
        def run(self, *a, **k):
            raise TrialError("boom")

    g = random_genome(problem[0].space, E, seed=0)
    f = evaluate_fitness(g, Broken(), 0.1, 0, arch=ARCH, total_epochs=E)
    assert f is FAILED and f.failed and f.scalar == -math.inf


# -- selection ----------------------------------------------------------------


def test_tournament_k1_is_uniform():
    rng = as_rng(8)
    scalars = [0.1, 0.5, 0.3, 0.9, 0.2]
    n = 100_000
    counts = np.bincount([tournament_index(scalars, 1, rng) for _ in range(n)], minlength=5)
    assert np.all(np.abs(counts / n - 0.2) <= 0.01)


def test_tournament_properties():
    g = random_genome(_space(), E, seed=0)
    assert tournament_select([(g, Fitness(0.1, 1.0, 0.1))], 3, seed=1) is g
    assert tournament_index([0.2] * 4, 4, seed=5) == min(as_rng(5).integers(0, 4, size=4))
    assert tournament_index([0.3, 0.1, 0.9], 3, seed=9) == tournament_index([0.3, 0.1, 0.9], 3, seed=9)
    with pytest.raises(ValueError):
        tournament_index([], 3)
    with pytest.raises(ValueError):
        tournament_index([0.1], 0)


# -- search ----------------------------------------------------------------


SMALL = EccoConfig(pop_size=8, generations=6, total_epochs=E)


def test_zero_generations_is_best_of_initial(problem):
    bench, _ = problem
    cfg = EccoConfig(pop_size=8, generations=0, total_epochs=E)
    res = ecco_search(bench.space, SyntheticTrainer(bench), cfg, seed=1, keep_populations=True)
    assert res.history == [] and len(res.populations) == 1
    trainer = SyntheticTrainer(bench)
    scalars = [evaluate_fitness(g, trainer, cfg.lam, derive_seed(1, "eval", 0, i), arch=ARCH, total_epochs=E).scalar
               for i, g in enumerate(res.populations[0])]
    assert res.fitness.scalar == max(scalars)


def test_history_and_elitism(problem, tmp_path):
    bench, _ = problem
    path = tmp_path / "h.jsonl"
    res = ecco_search(bench.space, SyntheticTrainer(bench), SMALL, seed=2, history_path=path, keep_populations=True)
    assert len(res.history) == SMALL.generations
    assert len(path.read_text().splitlines()) == SMALL.generations
    best = [h["best_scalar"] for h in res.history]
    assert all(b >= a for a, b in zip(best, best[1:]))
    assert res.fitness.scalar == max(best)
    for pop in res.populations:
        assert len(pop) == SMALL.pop_size
        assert all(genome_violations(g, bench.space, E) == [] for g in pop)


def test_deterministic_and_worker_independent(problem):
    bench, _ = problem
    a = ecco_search(bench.space, SyntheticTrainer(bench), SMALL, seed=3)
    b = ecco_search(bench.space, SyntheticTrainer(bench), SMALL, seed=3, workers=4)
    assert a.history == b.history and a.best == b.best


def test_failure_cap(problem):
    bench, _ = problem
    with pytest.raises(EccoError):
        ecco_search(bench.space, None, SMALL, seed=0, evaluator=lambda g, s: FAILED)


def test_config_validation():
    with pytest.raises(ValueError):
        EccoConfig(pop_size=1)
    with pytest.raises(ValueError):
        EccoConfig(generations=-1)


def test_curriculum_optimum_closed_form(problem):
    bench, opt = problem
    rho, value = curriculum_optimum(bench, 0.1, E)
    assert rho == pytest.approx(0.55)
    assert value == pytest.approx(-(0.05 ** 2) - 0.055)
    assert opt == pytest.approx(0.95 + value)


def _plain_ga(space, fitness, cfg, seed):
    """Reference generational GA: elitism of one, tournament, crossover, mutation."""
    rng = as_rng(derive_seed(seed, "ecco"))
    pop = [random_genome(space, cfg.total_epochs, rng, cfg.max_stages) for _ in range(cfg.pop_size)]
    fit = [fitness(g) for g in pop]
    best = max(fit)
    for _ in range(cfg.generations):
        elite = int(np.argmax(fit))
        nxt = [pop[elite]]
        while len(nxt) < cfg.pop_size:
            i = tournament_index(fit, cfg.tournament_k, rng)
            j = tournament_index(fit, cfg.tournament_k, rng)
            kids = [pop[i], pop[j]]
            if rng.random() < cfg.crossover_prob:
                kids = list(crossover_genomes(pop[i], pop[j], space, cfg.total_epochs, cfg.sbx_eta, rng))
            for kid in kids:
                if len(nxt) < cfg.pop_size:
                    nxt.append(mutate_genome(kid, cfg.rates, space, cfg.total_epochs, rng))
        pop = nxt
        fit = [fit[elite]] + [fitness(g) for g in pop[1:]]
        best = max(best, max(fit))
    return best


@pytest.mark.parametrize("seed", range(3))
def test_matches_plain_ga_reference(seed):
    space = SearchSpace((ArchitectureClass(ARCH),),
                        (Continuous("x", -1.0, 1.0), Categorical("mode", ("a", "b"))))

    def perf(g):
        h = g.hyperparams
        return 1.0 - h["x"] ** 2 - (0.0 if h["mode"] == "b" else 0.3)

    cfg = EccoConfig(pop_size=10, generations=15, total_epochs=E, lam=0.0)
    res = ecco_search(space, None, cfg, seed=seed, evaluator=lambda g, s: make_fitness(perf(g), 0.0, 1.0, 0.0))
    assert res.fitness.scalar == _plain_ga(space, perf, cfg, seed)
    assert res.fitness.scalar > 0.95
