"""Desk-scale stand-in for GPU training.

Each architecture class owns a quadratic bowl over the unit-cube encoding::

    L_inf(x) = floor + curvature * sum_i w_i (x_i - x*_i)^2
    L(t)     = L_inf + (L0 - L_inf) * exp(-r t) + N(0, sigma_t^2),  clipped at 0
    P_true   = clip(1 - L_inf - curriculum_penalty, 0, 1)

with ``L0 = L_inf + gap`` and ``r(x) = rate * exp(-rate_spread * d(x))`` where
``d`` is the same weighted squared distance (good configurations converge at
least as fast). The per-epoch noise is ``sigma_n / sqrt(data_fraction *
coverage_t)``. The optimum sits at the class's ``center`` configuration.

A curriculum changes only the penalty term and the noise/cost profile. With
``rho`` the mean fraction of condition combinations in use over the run and
``final`` the fraction in use at the last epoch::

    curriculum_penalty = curriculum_weight * (rho - curriculum_target)^2
                         + coverage_weight * (1 - final)

Trial cost is ``sum_t data_fraction * coverage_t`` in epoch-equivalents.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from stepsearch.config import space_from_dict, space_to_dict
from stepsearch.curriculum import ALL_CONDITIONS, CurriculumSchedule
from stepsearch.seeding import as_rng
from stepsearch.space import (
    ArchitectureClass,
    Configuration,
    SearchSpace,
    check_config,
    encode_unit_cube,
)
from stepsearch.trainer import EpochRecord, FidelityLevel, TrainingLog, TrialRecord


@dataclass(frozen=True)
class CurveParams:
    center: Configuration
    floor: float = 0.0
    curvature: float = 1.0
    weights: tuple[float, ...] | None = None
    gap: float = 0.8
    rate: float = 0.3
    rate_spread: float = 0.0
    noise: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "center", Configuration(self.center))
        if self.weights is not None:
            object.__setattr__(self, "weights", tuple(float(w) for w in self.weights))
        if self.rate <= 0:
            raise ValueError("rate must be > 0")
        if self.floor < 0 or self.curvature < 0 or self.gap < 0 or self.noise < 0:
            raise ValueError("floor, curvature, gap and noise must be >= 0")


@dataclass(frozen=True)
class SyntheticBenchmark:
    space: SearchSpace
    curves: Mapping[str, CurveParams]
    batch_var_scale: float = 0.05
    batch_var_jitter: float = 0.1
    curriculum_weight: float = 0.0
    curriculum_target: float = 1.0
    coverage_weight: float = 0.0
    _centers: dict = field(default_factory=dict, init=False, repr=False, compare=False)

    def __post_init__(self):
        for c in self.space.classes:
            if c.name not in self.curves:
                raise ValueError(f"no curve parameters for class {c.name!r}")
        for name, cp in self.curves.items():
            sub = self.space.for_class(name)
            self._centers[name] = encode_unit_cube(sub, cp.center)
            if cp.weights is not None and len(cp.weights) != sub.dim:
                raise ValueError(f"{name}: weights must have length {sub.dim}")

    # -- closed-form pieces -------------------------------------------------

    def distance(self, arch, x: np.ndarray) -> float:
        cp = self.curves[str(arch)]
        d2 = (np.asarray(x, dtype=float) - self._centers[str(arch)]) ** 2
        w = np.ones_like(d2) if cp.weights is None else np.asarray(cp.weights)
        return float(np.dot(w, d2))

    def asymptote(self, arch, x: np.ndarray) -> float:
        cp = self.curves[str(arch)]
        return cp.floor + cp.curvature * self.distance(arch, x)

    def rate(self, arch, x: np.ndarray) -> float:
        cp = self.curves[str(arch)]
        return cp.rate * math.exp(-cp.rate_spread * self.distance(arch, x))

    def curriculum_penalty(self, curriculum: CurriculumSchedule | None, epochs: int) -> float:
        if curriculum is None:
            rho, final = 1.0, 1.0
        else:
            cov = curriculum.coverage(epochs)
            rho, final = float(cov.mean()), float(cov[-1])
        return self.curriculum_weight * (rho - self.curriculum_target) ** 2 + self.coverage_weight * (
            1.0 - final
        )

    def true_performance(self, arch, config, curriculum=None, epochs: int | None = None) -> float:
        x = encode_unit_cube(self.space.for_class(arch), config)
        pen = 0.0
        if curriculum is not None:
            pen = self.curriculum_penalty(curriculum, epochs or curriculum.stages[-1].start_epoch + 1)
        elif self.curriculum_weight or self.coverage_weight:
            pen = self.curriculum_penalty(None, 1)
        return float(min(max(1.0 - self.asymptote(arch, x) - pen, 0.0), 1.0))

    def mean_curve(self, arch, config, epochs: int, curriculum=None) -> np.ndarray:
        """Noise-free per-epoch loss at t = 1..epochs."""
        x = encode_unit_cube(self.space.for_class(arch), config)
        cp = self.curves[str(arch)]
        linf = self.asymptote(arch, x) + self.curriculum_penalty(curriculum, epochs)
        t = np.arange(1, epochs + 1, dtype=float)
        return linf + cp.gap * np.exp(-self.rate(arch, x) * t)

    def optimal_class(self) -> ArchitectureClass:
        best = max(self.space.classes, key=lambda c: (1.0 - self.curves[c.name].floor, -self.space.classes.index(c)))
        return best

    # -- serialisation ---------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "space": space_to_dict(self.space),
            "curves": {
                k: {
                    "center": cp.center.to_dict(),
                    "floor": cp.floor,
                    "curvature": cp.curvature,
                    "weights": list(cp.weights) if cp.weights is not None else None,
                    "gap": cp.gap,
                    "rate": cp.rate,
                    "rate_spread": cp.rate_spread,
                    "noise": cp.noise,
                }
                for k, cp in self.curves.items()
            },
            "batch_var_scale": self.batch_var_scale,
            "batch_var_jitter": self.batch_var_jitter,
            "curriculum_weight": self.curriculum_weight,
            "curriculum_target": self.curriculum_target,
            "coverage_weight": self.coverage_weight,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "SyntheticBenchmark":
        space = space_from_dict(d["space"])
        curves = {}
        for k, cd in d["curves"].items():
            cd = dict(cd)
            cd["center"] = check_config(space.for_class(k), Configuration(cd["center"]))
            curves[k] = CurveParams(**cd)
        extra = {k: d[k] for k in (
            "batch_var_scale", "batch_var_jitter", "curriculum_weight",
            "curriculum_target", "coverage_weight",
        ) if k in d}
        return cls(space, curves, **extra)

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), sort_keys=True, indent=1))
        return path

    @classmethod
    def load(cls, path: str | Path) -> "SyntheticBenchmark":
        return cls.from_dict(json.loads(Path(path).read_text()))


def simulate_training(
    bench: SyntheticBenchmark,
    arch,
    config,
    fidelity: FidelityLevel,
    seed=None,
    curriculum: CurriculumSchedule | None = None,
) -> TrialRecord:
    arch = bench.space.arch(arch)
    config = check_config(bench.space.for_class(arch), config)
    if curriculum is not None and curriculum.violations(fidelity.epoch_budget):
        raise ValueError("invalid curriculum: " + "; ".join(curriculum.violations(fidelity.epoch_budget)))
    rng = as_rng(seed)
    cp = bench.curves[arch.name]
    E = fidelity.epoch_budget

    mean = bench.mean_curve(arch, config, E, curriculum)
    cov = curriculum.coverage(E) if curriculum is not None else np.ones(E)
    eff = fidelity.data_fraction * cov

    # draw all noise up front so the stream layout is fixed per (E, seed)
    z_loss = rng.standard_normal(E)
    z_var = rng.standard_normal(E)
    if cp.noise > 0:
        loss = np.maximum(mean + cp.noise / np.sqrt(eff) * z_loss, 0.0)
        jitter = np.exp(bench.batch_var_jitter * z_var - 0.5 * bench.batch_var_jitter**2)
    else:
        loss = np.maximum(mean, 0.0)
        jitter = np.ones(E)
    bvar = bench.batch_var_scale * loss * jitter
    val = np.clip(1.0 - loss, 0.0, 1.0)

    epochs = tuple(
        EpochRecord(t + 1, float(loss[t]), float(bvar[t]), float(val[t])) for t in range(E)
    )
    perf = None
    if fidelity.full:
        perf = bench.true_performance(arch, config, curriculum, E)
    return TrialRecord(arch, config, fidelity, TrainingLog(epochs, E), perf, float(eff.sum()))


def benchmark_optimum(bench: SyntheticBenchmark, arch=None) -> tuple[Configuration, float]:
    """Analytic argmax of P_true (over all classes unless ``arch`` is given)."""
    arch = bench.optimal_class() if arch is None else bench.space.arch(arch)
    center = bench.curves[arch.name].center
    return center, bench.true_performance(arch, center)


@dataclass
class SyntheticTrainer:
    """In-process trainer handle backed by :func:`simulate_training`."""

    bench: SyntheticBenchmark

    @property
    def space(self) -> SearchSpace:
        return self.bench.space

    def run(self, arch, config, fidelity, seed, curriculum=None) -> TrialRecord:
        return simulate_training(self.bench, arch, config, fidelity, seed, curriculum)


def quadratic_bowl(space: SearchSpace, center: Mapping | None = None, **curve) -> SyntheticBenchmark:
    """Same bowl for every class; default center is the space's midpoint (continuous params only)."""
    if center is None:
        from stepsearch.space import decode_unit_cube

        center = decode_unit_cube(space, np.full(space.dim, 0.5))
    cp = CurveParams(Configuration(center), **curve)
    return SyntheticBenchmark(space, {c.name: cp for c in space.classes})
