"""Reward-model search: learn dynamics -> performance maps, then Q-learn over actions.

Phase 1 trains ``num_samples_phase1`` random configurations per architecture
class to completion and fits a linear map ``P_true ~ W_c . v`` from dynamics
features to final performance. Phase 2 runs single-step episodes: pick a
class, choose an action epsilon-greedily, train briefly, and feed
``W_s . v_episode`` to the Q-update. Episodes have no successor state, so the
update is the bandit form ``Q <- Q + alpha (r - Q)``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from stepsearch.seeding import as_rng, derive_seed
from stepsearch.space import (
    ActionSet,
    ArchitectureClass,
    SearchSpace,
    sample_random,
    snap_to_action,
)
from stepsearch.trainer import (
    N_FEATURES,
    FidelityLevel,
    TrialError,
    TrialRecord,
    extract_dynamics_features,
    parallel_map,
)


class GrmError(RuntimeError):
    pass


@dataclass(frozen=True)
class RewardModel:
    arch: ArchitectureClass
    weights: np.ndarray
    fit_residual: float

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if w.shape != (N_FEATURES,) or not np.all(np.isfinite(w)):
            raise ValueError(f"reward weights must be {N_FEATURES} finite reals")
        object.__setattr__(self, "weights", w)

    def to_dict(self) -> dict:
        return {"arch": self.arch.name, "weights": self.weights.tolist(), "fit_residual": self.fit_residual}


def fit_reward_weights(features: np.ndarray, targets: np.ndarray, ridge: float = 1e-6) -> tuple[np.ndarray, float]:
    """Ridge least squares ``min |V w - y|^2 + ridge |w|^2``; returns (w, RMS residual)."""
    V = np.asarray(features, dtype=float)
    y = np.asarray(targets, dtype=float)
    if V.ndim != 2 or V.shape[0] != y.shape[0]:
        raise ValueError("features must be (n, d) with one target per row")
    if V.shape[0] < V.shape[1]:
        raise GrmError(f"insufficient trials: {V.shape[0]} for {V.shape[1]} features")
    # augmented lstsq avoids squaring the condition number
    if ridge > 0:
        A = np.vstack([V, math.sqrt(ridge) * np.eye(V.shape[1])])
        b = np.concatenate([y, np.zeros(V.shape[1])])
    else:
        A, b = V, y
    w, *_ = np.linalg.lstsq(A, b, rcond=None)
    resid = float(np.sqrt(np.mean((V @ w - y) ** 2)))
    return w, resid


def estimate_reward_model(
    trials: Sequence[TrialRecord], ridge: float = 1e-6, feature_epochs: int | None = None
) -> RewardModel:
    """Fit ``W_c`` on full-fidelity trials of one class.

    ``feature_epochs`` truncates every log to its first epochs before
    feature extraction, so the model sees the same window Phase 2 will.
    """
    if not trials:
        raise GrmError("insufficient trials: none given")
    arch = trials[0].arch
    if any(t.arch != arch for t in trials):
        raise GrmError("all trials must belong to one architecture class")
    if any(t.final_performance is None for t in trials):
        raise GrmError("reward-model trials must be run to full fidelity")
    if len(trials) < N_FEATURES:
        raise GrmError(f"insufficient trials: {len(trials)} for {N_FEATURES} features")
    V = np.stack([_features(t, feature_epochs) for t in trials])
    y = np.array([t.final_performance for t in trials])
    w, resid = fit_reward_weights(V, y, ridge)
    return RewardModel(arch, w, resid)


def _features(trial: TrialRecord, window: int | None) -> np.ndarray:
    log = trial.log if window is None else trial.log.truncated(window)
    return extract_dynamics_features(log)


def predict_performance(model: RewardModel, v) -> float:
    v = np.asarray(v, dtype=float)
    if v.shape != model.weights.shape:
        raise ValueError(f"feature dimension {v.shape} does not match model {model.weights.shape}")
    return float(np.dot(model.weights, v))


@dataclass(frozen=True)
class QTable:
    classes: tuple[str, ...]
    values: np.ndarray
    visits: np.ndarray

    @classmethod
    def zeros(cls, classes: Sequence, n_actions: int) -> "QTable":
        names = tuple(str(c) for c in classes)
        return cls(names, np.zeros((len(names), n_actions)), np.zeros((len(names), n_actions), dtype=int))

    @property
    def n_actions(self) -> int:
        return self.values.shape[1]

    def row(self, s) -> int:
        try:
            return self.classes.index(str(s))
        except ValueError:
            raise KeyError(f"unknown state {s!r}") from None

    def q(self, s, a: int) -> float:
        return float(self.values[self.row(s), a])

    def greedy(self, s) -> int:
        return int(np.argmax(self.values[self.row(s)]))

    def policy(self) -> dict[str, int]:
        return {c: self.greedy(c) for c in self.classes}

    def to_dict(self) -> dict:
        return {"classes": list(self.classes), "values": self.values.tolist(), "visits": self.visits.tolist()}


def select_action(q: QTable, s, actions, epsilon: float, seed=None) -> int:
    """Uniform action with probability ``epsilon``, else greedy with lowest-index ties."""
    if not 0 <= epsilon <= 1:
        raise ValueError("epsilon must lie in [0, 1]")
    n = len(actions) if not isinstance(actions, int) else actions
    if n == 0:
        raise ValueError("empty action set")
    rng = as_rng(seed)
    if rng.random() < epsilon:
        return int(rng.integers(n))
    return q.greedy(s)


def q_update(q: QTable, s, a: int, reward: float, alpha: float) -> QTable:
    if not 0 < alpha <= 1:
        raise ValueError("alpha must lie in (0, 1]")
    if not 0 <= a < q.n_actions:
        raise KeyError(f"action {a} outside [0, {q.n_actions})")
    values, visits = q.values.copy(), q.visits.copy()
    i = q.row(s)
    values[i, a] += alpha * (reward - values[i, a])
    visits[i, a] += 1
    return QTable(q.classes, values, visits)


@dataclass(frozen=True)
class GrmConfig:
    num_samples_phase1: int = 12
    max_episodes: int = 200
    epsilon_initial: float = 1.0
    epsilon_floor: float = 0.05
    epsilon_decay: float | None = None  # None: reach the floor on the last episode
    alpha: float = 0.5
    full_epochs: int = 20
    partial_epochs: int | None = None  # None: ceil(partial_fraction * full_epochs)
    partial_fraction: float = 0.2
    ridge: float = 1e-6
    clip_reward: bool = False
    phase1_window: str = "partial"  # "partial" or "full"
    reuse_partial_trials: bool = True

    def __post_init__(self):
        if self.num_samples_phase1 < 1 or self.max_episodes < 0 or self.full_epochs < 1:
            raise ValueError("counts must be >= 1 (max_episodes >= 0)")
        if not 0 <= self.epsilon_initial <= 1 or not 0 <= self.epsilon_floor <= 1:
            raise ValueError("epsilon values must lie in [0, 1]")
        if not 0 < self.alpha <= 1:
            raise ValueError("alpha must lie in (0, 1]")
        if self.phase1_window not in ("partial", "full"):
            raise ValueError("phase1_window must be 'partial' or 'full'")

    @property
    def phase2_epochs(self) -> int:
        if self.partial_epochs is not None:
            return self.partial_epochs
        return max(1, math.ceil(self.partial_fraction * self.full_epochs))

    def epsilon(self, episode: int) -> float:
        decay = self.epsilon_decay
        if decay is None:
            if self.max_episodes <= 1 or self.epsilon_initial == 0:
                decay = 1.0
            else:
                decay = (max(self.epsilon_floor, 1e-12) / self.epsilon_initial) ** (1 / (self.max_episodes - 1))
        return max(self.epsilon_floor, self.epsilon_initial * decay**episode)


@dataclass
class GrmResult:
    policy: dict[str, int]
    q: QTable
    audit: list[dict]
    reward_models: dict[str, RewardModel]
    phase2_epochs_used: int = 0
    phase1_epochs_used: int = 0

    def best(self, actions) -> dict:
        """Per class: the chosen configuration (as a dict)."""
        return {c: _actions_for(actions, c)[a].to_dict() for c, a in self.policy.items()}


def _actions_for(actions, cls: str) -> ActionSet:
    return actions[cls] if isinstance(actions, Mapping) else actions


class AuditLog:
    """Append-only JSON-lines record file."""

    def __init__(self, path: str | Path | None):
        self.path = Path(path) if path is not None else None
        self.records: list[dict] = []

    def load(self) -> list[dict]:
        if self.path is not None and self.path.exists():
            self.records = [json.loads(l) for l in self.path.read_text().splitlines() if l.strip()]
        return self.records

    def append(self, rec: dict) -> None:
        self.records.append(rec)
        if self.path is not None:
            with self.path.open("a") as fh:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")


def grm_search(
    space: SearchSpace,
    actions: ActionSet | Mapping[str, ActionSet],
    trainer,
    cfg: GrmConfig = GrmConfig(),
    seed: int = 0,
    *,
    workers: int = 1,
    audit_path: str | Path | None = None,
    resume: bool = False,
) -> GrmResult:
    """Both phases; returns the greedy policy, the Q-table and the episode audit trail.

    With ``resume`` the audit file is replayed: finished Phase-1 trials and
    episodes are restored and the run continues where it stopped. Every
    random draw is keyed on (seed, phase, index), so a resumed run matches an
    uninterrupted one.
    """
    classes = [c.name for c in space.classes]
    audit = AuditLog(audit_path)
    if resume:
        audit.load()
    elif audit.path is not None and audit.path.exists():
        audit.path.unlink()
    done1 = {(r["class"], r["sample"]): r for r in audit.records if r["phase"] == 1}
    done2 = [r for r in audit.records if r["phase"] == 2]
    window = cfg.phase2_epochs if cfg.phase1_window == "partial" else None
    full = FidelityLevel(cfg.full_epochs, 1.0, rung=1, full=True)
    partial = FidelityLevel(min(cfg.phase2_epochs, cfg.full_epochs), 1.0, rung=0, full=False)

    # ---- Phase 1 -------------------------------------------------------------
    jobs = [(c, k) for c in classes for k in range(cfg.num_samples_phase1) if (c, k) not in done1]

    def phase1_job(job):
        c, k = job
        sub = space.for_class(c)
        acts = _actions_for(actions, c)
        drawn = sample_random(sub, derive_seed(seed, "phase1-config", c, k))
        a = snap_to_action(sub, drawn, acts)
        try:
            rec = trainer.run(space.arch(c), acts[a], full, derive_seed(seed, "phase1-trial", c, k))
        except TrialError as exc:
            raise GrmError(f"phase 1 trial ({c}, sample {k}) failed: {exc}") from exc
        return c, k, a, rec

    phase1_epochs = 0
    for c, k, a, rec in parallel_map(phase1_job, jobs, workers):
        phase1_epochs += rec.log.completed
        v = _features(rec, window)
        audit.append({
            "phase": 1, "class": c, "sample": k, "action": a,
            "config": rec.config.to_dict(), "features": v.tolist(),
            "p_true": rec.final_performance,
        })
    phase1 = [r for r in audit.records if r["phase"] == 1]
    phase1.sort(key=lambda r: (classes.index(r["class"]), r["sample"]))

    models: dict[str, RewardModel] = {}
    for c in classes:
        rows = [r for r in phase1 if r["class"] == c]
        V = np.array([r["features"] for r in rows], dtype=float).reshape(len(rows), N_FEATURES)
        y = np.array([r["p_true"] for r in rows], dtype=float)
        try:
            w, resid = fit_reward_weights(V, y, cfg.ridge)
        except (GrmError, np.linalg.LinAlgError) as exc:
            raise GrmError(f"reward model for class {c!r} could not be fitted: {exc}") from exc
        models[c] = RewardModel(space.arch(c), w, resid)

    # ---- Phase 2 -------------------------------------------------------------
    n_actions = {c: len(_actions_for(actions, c)) for c in classes}
    width = max(n_actions.values())
    q = QTable.zeros(classes, width)
    # pad unequal per-class action sets so padding is never greedy
    for c in classes:
        if n_actions[c] < width:
            q.values[q.row(c), n_actions[c]:] = -np.inf
    cache: dict[tuple[str, int], list[float]] = {}
    phase2_epochs = 0
    for r in done2:
        q.values[q.row(r["class"]), r["action"]] = r["q"]
        q.visits[q.row(r["class"]), r["action"]] += 1
        cache.setdefault((r["class"], r["action"]), r["features"])
        phase2_epochs += r["epochs"]

    for episode in range(len(done2), cfg.max_episodes):
        s = classes[episode % len(classes)]
        rng = as_rng(derive_seed(seed, "episode", episode))
        eps = cfg.epsilon(episode)
        a = select_action(q, s, n_actions[s], eps, rng)
        key = (s, a)
        epochs = 0
        if cfg.reuse_partial_trials and key in cache:
            v = np.asarray(cache[key])
        else:
            trial_seed = (
                derive_seed(seed, "phase2-trial", s, a) if cfg.reuse_partial_trials
                else derive_seed(seed, "phase2-trial", episode)
            )
            try:
                rec = trainer.run(space.arch(s), _actions_for(actions, s)[a], partial, trial_seed)
            except TrialError as exc:
                raise GrmError(f"episode {episode}: trial failed: {exc}") from exc
            v = extract_dynamics_features(rec.log)
            cache[key] = v.tolist()
            epochs = rec.log.completed
        phase2_epochs += epochs
        reward = predict_performance(models[s], v)
        if cfg.clip_reward:
            reward = min(max(reward, 0.0), 1.0)
        q = q_update(q, s, a, reward, cfg.alpha)
        audit.append({
            "phase": 2, "episode": episode, "class": s, "action": a, "epsilon": eps,
            "config": _actions_for(actions, s)[a].to_dict(), "features": list(map(float, v)),
            "reward": reward, "q": q.q(s, a), "epochs": epochs,
        })

    return GrmResult(q.policy(), q, audit.records, models, phase2_epochs, phase1_epochs)
