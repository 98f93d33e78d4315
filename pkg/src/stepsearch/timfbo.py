"""Transfer-initialised multi-fidelity Bayesian optimisation.

One GP models performance over the unit-cube encoding plus a fidelity
coordinate (rung ``k`` of ``K`` sits at ``(k + 1) / K``, proxy data at its
own coordinate, 0 by default). Proxy observations enter with inflated noise.
The search runs successive-halving brackets: the bracket's starting rung and
its first candidate come from maximising EI / rung cost, the rest of the
bracket is filled greedily with fantasised observations, and survivors are
promoted rung by rung.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from stepsearch.gp import (
    GPSurrogate,
    Kernel,
    ProxyDataset,
    add_observations,
    cost_aware_acquisition,
    expected_improvement,
    gp_fit,
    transfer_init,
)
from stepsearch.seeding import as_rng, derive_seed
from stepsearch.space import (
    Configuration,
    SearchSpace,
    decode_unit_cube,
    encode_unit_cube,
    sample_random,
)
from stepsearch.trainer import FidelityLevel, TrialError, parallel_map


class TimfboError(RuntimeError):
    pass


@dataclass(frozen=True)
class FidelitySchedule:
    rungs: tuple[FidelityLevel, ...]
    eta: int = 3
    costs: tuple[float, ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "rungs", tuple(self.rungs))
        if not self.rungs:
            raise ValueError("schedule needs at least one rung")
        if self.eta < 2:
            raise ValueError("eta must be >= 2")
        costs = self.costs
        if costs is None:
            top = self.rungs[-1]
            ref = top.epoch_budget * top.data_fraction
            costs = tuple(r.epoch_budget * r.data_fraction / ref for r in self.rungs)
        costs = tuple(float(c) for c in costs)
        if len(costs) != len(self.rungs) or any(c <= 0 for c in costs):
            raise ValueError("one positive cost per rung required")
        if any(b <= a for a, b in zip(costs, costs[1:])):
            raise ValueError("rung costs must increase strictly")
        object.__setattr__(self, "costs", costs)
        if not self.rungs[-1].full:
            raise ValueError("the top rung must be full fidelity")

    @classmethod
    def geometric(cls, full_epochs: int, n_rungs: int = 3, eta: int = 3) -> "FidelitySchedule":
        """Epoch budgets ``full_epochs / eta^j`` (rounded up), last rung full."""
        rungs = []
        for k in range(n_rungs):
            e = max(1, math.ceil(full_epochs / eta ** (n_rungs - 1 - k)))
            rungs.append(FidelityLevel(e, 1.0, rung=k, full=k == n_rungs - 1))
        return cls(tuple(rungs), eta)

    @property
    def top(self) -> int:
        return len(self.rungs) - 1

    def coordinate(self, k: int) -> float:
        return (k + 1) / len(self.rungs)

    def bracket_sizes(self, start: int) -> list[int]:
        """Configurations evaluated at each rung of a bracket starting at ``start``."""
        n = self.eta ** (self.top - start)
        sizes = []
        for _ in range(start, self.top + 1):
            sizes.append(n)
            n = math.ceil(n / self.eta)
        return sizes

    def bracket_cost(self, start: int) -> float:
        return sum(n * self.costs[k] for k, n in zip(range(start, self.top + 1), self.bracket_sizes(start)))


def promote(rung_results: Sequence[tuple], schedule: FidelitySchedule, rung: int = 0) -> list:
    """Top ``ceil(n / eta)`` configurations by score; earlier entries win ties."""
    if not rung_results:
        raise ValueError("empty rung")
    if rung >= schedule.top:
        raise ValueError("cannot promote from the top rung")
    m = math.ceil(len(rung_results) / schedule.eta)
    order = sorted(range(len(rung_results)), key=lambda i: (-rung_results[i][1], i))
    return [rung_results[i][0] for i in order[:m]]


@dataclass(frozen=True)
class TimfboConfig:
    lengthscale: float = 0.3
    fidelity_lengthscale: float = 1.0
    signal_var: float = 1.0
    noise_var: float = 1e-4
    optimize_hyperparams: bool = False
    discount: float = 0.1
    pool_size: int = 2048
    refine_top: int = 8
    refine_steps: int = 16
    refine_sigma: float = 0.05
    failure_cap: int = 3


@dataclass
class TimfboResult:
    best_config: Configuration | None
    best_y: float
    history: list[dict]
    spent: float
    from_model: bool = False  # no full-fidelity trial finished; incumbent is a model prediction

    @property
    def full_trials(self) -> int:
        return sum(1 for h in self.history if h["full"] and h["error"] is None)


@dataclass
class _Observations:
    X: list = field(default_factory=list)
    y: list = field(default_factory=list)
    rung: list = field(default_factory=list)


def timfbo_search(
    space: SearchSpace,
    trainer,
    schedule: FidelitySchedule,
    proxy: ProxyDataset | None = None,
    budget: float = 30.0,
    seed: int = 0,
    cfg: TimfboConfig = TimfboConfig(),
    *,
    arch=None,
    workers: int = 1,
    history_path: str | Path | None = None,
    resume: bool = False,
) -> TimfboResult:
    """Search one architecture class until the accounted cost reaches ``budget``.

    ``budget`` is in units of the schedule's costs (full-trial equivalents
    with the default schedule). Brackets are chosen to fit the remaining
    budget; when none fits, one last full-fidelity trial is run, so the
    total never exceeds ``budget`` by more than one top-rung cost.
    """
    arch = space.classes[0] if arch is None else space.arch(arch)
    sub = space.for_class(arch)
    if proxy is not None and proxy.X.shape[1] != sub.dim:
        raise ValueError(f"proxy encoding has {proxy.X.shape[1]} columns, space has {sub.dim}")
    kernel = Kernel(
        tuple([cfg.lengthscale] * sub.dim + [cfg.fidelity_lengthscale]), cfg.signal_var, cfg.noise_var
    )
    path = Path(history_path) if history_path is not None else None
    history: list[dict] = []
    if resume and path is not None and path.exists():
        history = [json.loads(l) for l in path.read_text().splitlines() if l.strip()]
    elif path is not None and path.exists():
        path.unlink()

    obs = _Observations()
    spent = 0.0
    failures = 0
    for h in history:
        spent += h["cost"]
        if h["error"] is None:
            _observe(obs, sub, schedule, h)
        else:
            failures += 1
    bracket = 1 + max((h["bracket"] for h in history), default=-1)
    index = len(history)

    def record(h: dict) -> None:
        history.append(h)
        if path is not None:
            with path.open("a") as fh:
                fh.write(json.dumps(h, sort_keys=True) + "\n")

    while spent < budget - 1e-12:
        remaining = budget - spent
        starts = [s for s in range(schedule.top + 1) if schedule.bracket_cost(s) <= remaining + 1e-9]
        rng = as_rng(derive_seed(seed, "bracket", bracket))
        gp = _fit(obs, kernel, proxy, cfg)
        pool = _pool(sub, cfg.pool_size, rng)
        if starts:
            start, first = _choose_start(gp, obs, pool, starts, schedule, sub, cfg, rng)
            sizes = schedule.bracket_sizes(start)
        else:
            start, sizes = schedule.top, [1]
            first = None
        configs = _fill_bracket(gp, obs, pool, first, sizes[0], start, schedule, sub, cfg, rng)

        for k, size in zip(range(start, schedule.top + 1), sizes):
            fid = schedule.rungs[k]
            jobs = [(i, c, derive_seed(seed, "trial", bracket, k, i)) for i, c in enumerate(configs)]

            def run(job, fid=fid):
                i, c, s = job
                try:
                    return trainer.run(arch, c, fid, s), None
                except TrialError as exc:
                    return None, exc

            results = []
            for (i, c, s), (rec, err) in zip(jobs, parallel_map(run, jobs, workers)):
                h = {
                    "index": index, "bracket": bracket, "rung": k, "full": fid.full,
                    "config": c.to_dict(), "seed": s, "cost": schedule.costs[k],
                    "y": None if rec is None else rec.observed_performance,
                    "error": None if err is None else str(err),
                }
                index += 1
                spent += schedule.costs[k]
                record(h)
                if err is not None:
                    failures += 1
                    if failures > cfg.failure_cap:
                        raise TimfboError(f"trial {h['index']} failed and failure cap reached: {err}") from err
                    continue
                _observe(obs, sub, schedule, h)
                results.append((c, h["y"]))
            if k == schedule.top or not results:
                break
            configs = promote(results, schedule, k)
        bracket += 1

    return _incumbent(obs, sub, schedule, history, kernel, proxy, cfg, spent)


# ---------------------------------------------------------------------------


def _observe(obs: _Observations, space: SearchSpace, schedule: FidelitySchedule, h: dict) -> None:
    x = encode_unit_cube(space, Configuration(h["config"]))
    obs.X.append(np.append(x, schedule.coordinate(h["rung"])))
    obs.y.append(float(h["y"]))
    obs.rung.append(h["rung"])


def _fit(obs: _Observations, kernel: Kernel, proxy, cfg: TimfboConfig) -> GPSurrogate:
    ys = list(obs.y) + (list(proxy.y) if proxy is not None else [])
    prior = float(np.mean(ys)) if ys else 0.0
    X = np.array(obs.X).reshape(len(obs.y), kernel_dim(kernel))
    gp = gp_fit(X, obs.y, kernel, prior_mean=prior, optimize_hyperparams=cfg.optimize_hyperparams)
    if proxy is not None:
        gp = transfer_init(gp, proxy, cfg.discount)
    return gp


def kernel_dim(kernel: Kernel) -> int:
    return len(kernel.lengthscales)


def _pool(space: SearchSpace, size: int, rng) -> np.ndarray:
    return np.stack([encode_unit_cube(space, sample_random(space, rng)) for _ in range(size)])


def _aug(X: np.ndarray, coord: float) -> np.ndarray:
    return np.hstack([X, np.full((X.shape[0], 1), coord)])


def _incumbent_value(gp: GPSurrogate, obs: _Observations, k: int, schedule: FidelitySchedule) -> float:
    ys = [y for y, r in zip(obs.y, obs.rung) if r == k]
    if ys:
        return max(ys)
    if obs.y:
        X = _aug(np.array(obs.X)[:, :-1], schedule.coordinate(k))
        return float(gp.predict(X)[0].max())
    return gp.prior_mean


def _acquisition(gp, X, k, best, schedule) -> np.ndarray:
    m, v = gp.predict(_aug(X, schedule.coordinate(k)))
    return cost_aware_acquisition(expected_improvement(m, np.sqrt(v), best), schedule.costs[k])


def _refine(gp, X, scores, k, best, schedule, space, cfg, rng) -> tuple[np.ndarray, np.ndarray]:
    """Local random search around the best pool points; snapped to valid configurations."""
    top = np.argsort(-scores, kind="stable")[: cfg.refine_top]
    cand = [X]
    for i in top:
        steps = X[i] + cfg.refine_sigma * rng.standard_normal((cfg.refine_steps, X.shape[1]))
        steps = np.clip(steps, 0.0, 1.0)
        cand.append(np.stack([encode_unit_cube(space, decode_unit_cube(space, s)) for s in steps]))
    Xc = np.vstack(cand)
    return Xc, _acquisition(gp, Xc, k, best, schedule)


def _choose_start(gp, obs, pool, starts, schedule, space, cfg, rng):
    best_score, best_start, best_x = -math.inf, starts[0], None
    for s in starts:
        f_star = _incumbent_value(gp, obs, s, schedule)
        scores = _acquisition(gp, pool, s, f_star, schedule)
        Xc, scores = _refine(gp, pool, scores, s, f_star, schedule, space, cfg, rng)
        i = int(np.argmax(scores))
        if scores[i] > best_score:
            best_score, best_start, best_x = scores[i], s, Xc[i]
    return best_start, best_x


def _fill_bracket(gp, obs, pool, first, n, k, schedule, space, cfg, rng) -> list[Configuration]:
    """Greedy batch: pick, fantasise the posterior mean as an observation, repeat."""
    coord = schedule.coordinate(k)
    f_star = _incumbent_value(gp, obs, k, schedule)
    chosen: list[np.ndarray] = []
    while len(chosen) < n:
        if first is not None and not chosen:
            x = first
        else:
            scores = _acquisition(gp, pool, k, f_star, schedule)
            if chosen:
                Xc, scores = pool, scores
            else:
                Xc, scores = _refine(gp, pool, scores, k, f_star, schedule, space, cfg, rng)
            x = Xc[int(np.argmax(scores))]
        chosen.append(x)
        m, _ = gp.predict(np.append(x, coord)[None, :])
        gp = add_observations(gp, np.append(x, coord)[None, :], m)
        f_star = max(f_star, float(m[0]))
    return [decode_unit_cube(space, x) for x in chosen]


def _incumbent(obs, space, schedule, history, kernel, proxy, cfg, spent) -> TimfboResult:
    full = [(h["y"], h["index"], h["config"]) for h in history if h["full"] and h["error"] is None]
    if full:
        y, _, c = max(full, key=lambda t: (t[0], -t[1]))
        return TimfboResult(Configuration(c), y, history, spent)
    ok = [h for h in history if h["error"] is None]
    if not ok:
        return TimfboResult(None, math.nan, history, spent, from_model=True)
    gp = _fit(obs, kernel, proxy, cfg)
    X = np.stack([encode_unit_cube(space, Configuration(h["config"])) for h in ok])
    m, _ = gp.predict(_aug(X, schedule.coordinate(schedule.top)))
    i = int(np.argmax(m))
    return TimfboResult(Configuration(ok[i]["config"]), float(m[i]), history, spent, from_model=True)


def proxy_from_function(space: SearchSpace, fn, n: int, seed=0, fidelity: float = 0.0) -> ProxyDataset:
    """Proxy dataset from ``n`` random configurations scored by ``fn(config)``."""
    rng = as_rng(seed)
    configs = [sample_random(space, rng) for _ in range(n)]
    X = np.stack([encode_unit_cube(space, c) for c in configs])
    return ProxyDataset(X, np.array([fn(c) for c in configs], dtype=float), fidelity)
