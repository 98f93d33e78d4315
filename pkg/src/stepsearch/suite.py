"""Built-in synthetic benchmarks with planted optima.

Each builder returns a benchmark whose best configuration (and, for the
curriculum benchmark, best schedule) is known in closed form, so search
results can be scored against the analytic optimum.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from stepsearch.ecco import curriculum_optimum
from stepsearch.gp import ProxyDataset
from stepsearch.space import (
    ActionSet,
    ArchitectureClass,
    Categorical,
    Configuration,
    Continuous,
    SearchSpace,
    decode_unit_cube,
    discretize,
    encode_unit_cube,
)
from stepsearch.synthetic import CurveParams, SyntheticBenchmark, benchmark_optimum, quadratic_bowl
from stepsearch.timfbo import proxy_from_function

ARCH = "R(2+1)D"


@dataclass(frozen=True)
class GridProblem:
    bench: SyntheticBenchmark
    actions: ActionSet
    optimum: int  # index of the planted best action


def grm_problem(optimum: int = 3, noise: float = 0.01) -> GridProblem:
    """One class, 4 learning rates x 2 optimisers, bowl centred on one action."""
    space = SearchSpace(
        (ArchitectureClass(ARCH),),
        (Continuous("lr", 1e-4, 1e-1, log=True), Categorical("optimizer", ("Adam", "SGD"))),
    )
    actions = discretize(space, 4, seed=0)
    curve = CurveParams(actions[optimum], floor=0.05, curvature=0.5, gap=0.8, rate=0.3, noise=noise)
    return GridProblem(SyntheticBenchmark(space, {ARCH: curve}), actions, optimum)


def bowl_space() -> SearchSpace:
    return SearchSpace(
        (ArchitectureClass(ARCH),),
        (
            Continuous("lr", 1e-4, 1e-1, log=True),
            Continuous("weight_decay", 0.0, 0.1),
            Continuous("dropout", 0.0, 0.5),
            Continuous("clip", 1.0, 20.0),
        ),
    )


def bowl_problem(noise: float = 0.01) -> tuple[SyntheticBenchmark, float]:
    """Four continuous hyperparameters, optimum at the cube midpoint."""
    bench = quadratic_bowl(bowl_space(), noise=noise, gap=0.8, rate=0.3)
    return bench, benchmark_optimum(bench)[1]


def bowl_proxy(bench: SyntheticBenchmark, n: int = 64, seed: int = 123, shift: float = 0.1) -> ProxyDataset:
    """Observations of a related task whose optimum is offset by ``shift`` per encoded coordinate."""
    space = bench.space
    center = encode_unit_cube(space, bench.curves[ARCH].center)
    proxy_center = decode_unit_cube(space, np.clip(center + shift, 0.0, 1.0))
    related = replace(bench, curves={ARCH: replace(bench.curves[ARCH], center=Configuration(proxy_center))})
    return proxy_from_function(space, lambda c: related.true_performance(ARCH, c), n, seed=seed)


def curriculum_problem(lam: float = 0.1, total_epochs: int = 30) -> tuple[SyntheticBenchmark, float]:
    """Bowl plus a curriculum penalty; returns the benchmark and the best achievable fitness."""
    space = SearchSpace(
        (ArchitectureClass(ARCH),),
        (
            Continuous("lr", 1e-4, 1e-1, log=True),
            Categorical("optimizer", ("Adam", "AdamW", "SGD")),
            Continuous("dropout", 0.0, 0.5),
        ),
    )
    bench = quadratic_bowl(space, {"lr": 1e-3, "optimizer": "AdamW", "dropout": 0.2},
                           floor=0.05, curvature=0.5, noise=0.01)
    bench = replace(bench, curriculum_weight=1.0, curriculum_target=0.6, coverage_weight=1.0)
    _, value = curriculum_optimum(bench, lam, total_epochs)
    return bench, 1.0 - bench.curves[ARCH].floor + value
