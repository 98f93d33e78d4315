import numpy as np
import pytest

from stepsearch.curriculum import ALL_CONDITIONS, CurriculumSchedule
from stepsearch.space import (
    ArchitectureClass,
    Categorical,
    Continuous,
    SearchSpace,
    decode_unit_cube,
    sample_random,
    validate_config,
)
from stepsearch.synthetic import (
    CurveParams,
    SyntheticBenchmark,
    benchmark_optimum,
    quadratic_bowl,
    simulate_training,
)
from stepsearch.trainer import FidelityLevel

ARCH = "R(2+1)D"


def square():
    return SearchSpace((ArchitectureClass(ARCH),), (Continuous("a", 0.0, 1.0), Continuous("b", 0.0, 1.0)))


def test_bowl_optimum_is_midpoint_with_value_one():
    bench = quadratic_bowl(square())
    cfg, val = benchmark_optimum(bench)
    assert cfg.to_dict() == {"a": 0.5, "b": 0.5}
    assert val == 1.0
    assert validate_config(bench.space, cfg) == []


def test_optimum_value_matches_random_sweep():
    bench = quadratic_bowl(square())
    rng = np.random.default_rng(0)
    X = rng.random((100_000, 2))
    best = max(bench.true_performance(ARCH, decode_unit_cube(bench.space, x)) for x in X)
    assert abs(best - benchmark_optimum(bench)[1]) < 1e-3


def test_optimum_dominates_random_configs():
    space = SearchSpace(
        (ArchitectureClass(ARCH),),
        (Continuous("lr", 1e-4, 1e-1, log=True), Categorical("opt", ("Adam", "SGD")), Continuous("d", 0, 0.5)),
    )
    bench = quadratic_bowl(space, {"lr": 1e-3, "opt": "SGD", "d": 0.1}, floor=0.05)
    _, best = benchmark_optimum(bench)
    for s in range(10_000):
        assert bench.true_performance(ARCH, sample_random(space, s)) <= best


def test_noiseless_true_performance_is_one_minus_asymptote():
    bench = quadratic_bowl(square(), floor=0.1, curvature=2.0)
    cfg = {"a": 0.2, "b": 0.9}
    rec = simulate_training(bench, ARCH, cfg, FidelityLevel(5, full=True), seed=0)
    assert rec.final_performance == pytest.approx(1 - (0.1 + 2.0 * (0.3**2 + 0.4**2)), abs=1e-15)


def test_seeded_noise_keeps_means():
    bench = quadratic_bowl(square(), noise=0.05)
    cfg = {"a": 0.2, "b": 0.9}
    a = simulate_training(bench, ARCH, cfg, FidelityLevel(30), seed=1)
    b = simulate_training(bench, ARCH, cfg, FidelityLevel(30), seed=2)
    assert not np.array_equal(a.log.losses, b.log.losses)
    mean = bench.mean_curve(ARCH, cfg, 30)
    assert abs(np.mean(a.log.losses - mean)) < 0.05


def test_class_with_lower_floor_is_optimal():
    space = SearchSpace((ArchitectureClass("A"), ArchitectureClass("B")), (Continuous("a", 0.0, 1.0),))
    bench = SyntheticBenchmark(space, {"A": CurveParams({"a": 0.5}, floor=0.2), "B": CurveParams({"a": 0.3}, floor=0.1)})
    cfg, val = benchmark_optimum(bench)
    assert bench.optimal_class().name == "B" and cfg.to_dict() == {"a": 0.3} and val == pytest.approx(0.9)


def test_curriculum_penalty_shape():
    bench = quadratic_bowl(square())
    bench = SyntheticBenchmark(bench.space, bench.curves, curriculum_weight=2.0, curriculum_target=0.5,
                               coverage_weight=1.0)
    half = CurriculumSchedule.from_pairs([(1, ALL_CONDITIONS[:8]), (9, ALL_CONDITIONS)])
    # coverage: 8 epochs at 0.5, 2 at 1.0 -> mean 0.6, final 1
    assert bench.curriculum_penalty(half, 10) == pytest.approx(2.0 * 0.1**2)
    partial_end = CurriculumSchedule.from_pairs([(1, ALL_CONDITIONS[:8])])
    assert bench.curriculum_penalty(partial_end, 10) == pytest.approx(1.0 * (1 - 0.5))
    assert bench.curriculum_penalty(None, 10) == pytest.approx(2.0 * 0.25)


def test_save_load_round_trip(tmp_path):
    space = SearchSpace(
        (ArchitectureClass(ARCH),),
        (Continuous("lr", 1e-4, 1e-1, log=True), Categorical("opt", ("Adam", "SGD"))),
    )
    bench = quadratic_bowl(space, {"lr": 1e-3, "opt": "SGD"}, noise=0.02, rate_spread=1.5)
    again = SyntheticBenchmark.load(bench.save(tmp_path / "b.json"))
    assert again.to_dict() == bench.to_dict()
    cfg = {"lr": 0.01, "opt": "Adam"}
    fid = FidelityLevel(7, full=True)
    assert simulate_training(again, ARCH, cfg, fid, 3).to_json() == simulate_training(bench, ARCH, cfg, fid, 3).to_json()
