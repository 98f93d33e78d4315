"""Trial execution: training-log types, dynamics features and the trainer protocol.

A trainer is anything with a ``run(arch, config, fidelity, seed, curriculum)``
method returning a :class:`TrialRecord`. Two are provided:
:class:`stepsearch.synthetic.SyntheticTrainer` (in-process simulator) and
:class:`SubprocessTrainer`, which talks line-delimited JSON to a child process:

* engine -> trainer, one line::

    {"architecture": "R(2+1)D", "assignments": {...}, "epoch_budget": 20,
     "data_fraction": 1.0, "seed": 7, "report_final": true, "curriculum": null}

* trainer -> engine, one line per epoch then one terminal line::

    {"epoch": 1, "train_loss": 0.93, "batch_loss_variance": 0.04, "val_metric": 0.1}
    {"final_performance": 0.87, "cost": 20.0}

``final_performance`` must be non-null exactly when ``report_final`` was set.
``cost`` is optional and defaults to ``epoch_budget * data_fraction``.
"""

from __future__ import annotations

import json
import math
import subprocess
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Callable, Mapping, Protocol, Sequence

import numpy as np

from stepsearch.curriculum import CurriculumSchedule
from stepsearch.space import ArchitectureClass, Configuration

FEATURE_NAMES = (
    "bias",
    "first_loss",
    "last_loss",
    "mean_loss_delta",
    "log_loss_slope",
    "terminal_batch_var_variance",
)
N_FEATURES = len(FEATURE_NAMES)


class TrialError(RuntimeError):
    """Base class for trial failures; ``partial_log`` holds whatever was received."""

    def __init__(self, message: str, partial_log: "TrainingLog | None" = None):
        super().__init__(message)
        self.partial_log = partial_log


class TrainerLaunchError(TrialError):
    pass


class ProtocolViolation(TrialError):
    pass


class TrialTimeout(TrialError):
    pass


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float
    batch_loss_variance: float
    val_metric: float | None = None

    def to_dict(self) -> dict:
        return {
            "epoch": self.epoch,
            "train_loss": self.train_loss,
            "batch_loss_variance": self.batch_loss_variance,
            "val_metric": self.val_metric,
        }


@dataclass(frozen=True)
class TrainingLog:
    epochs: tuple[EpochRecord, ...]
    budget: int

    def __post_init__(self):
        object.__setattr__(self, "epochs", tuple(self.epochs))
        prev = 0
        for rec in self.epochs:
            if rec.epoch != prev + 1:
                raise ValueError(f"epoch indices must run 1, 2, ... (got {rec.epoch} after {prev})")
            if not (math.isfinite(rec.train_loss) and rec.train_loss >= 0):
                raise ValueError(f"epoch {rec.epoch}: loss must be finite and >= 0")
            prev = rec.epoch
        if len(self.epochs) > self.budget:
            raise ValueError("log has more epochs than its budget")

    @property
    def completed(self) -> int:
        return len(self.epochs)

    @property
    def losses(self) -> np.ndarray:
        return np.array([r.train_loss for r in self.epochs], dtype=float)

    def truncated(self, n: int) -> "TrainingLog":
        """The first ``n`` epochs, as if the run had been budgeted for ``n``."""
        n = min(n, self.completed)
        return TrainingLog(self.epochs[:n], n)

    def to_dict(self) -> dict:
        return {"budget": self.budget, "epochs": [r.to_dict() for r in self.epochs]}

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainingLog":
        return cls(tuple(EpochRecord(**r) for r in d["epochs"]), int(d["budget"]))


@dataclass(frozen=True)
class FidelityLevel:
    epoch_budget: int
    data_fraction: float = 1.0
    rung: int = 0
    full: bool = False

    def __post_init__(self):
        if self.epoch_budget < 1:
            raise ValueError("epoch_budget must be >= 1")
        if not 0 < self.data_fraction <= 1:
            raise ValueError("data_fraction must be in (0, 1]")

    def to_dict(self) -> dict:
        return {
            "epoch_budget": self.epoch_budget,
            "data_fraction": self.data_fraction,
            "rung": self.rung,
            "full": self.full,
        }


@dataclass(frozen=True)
class TrialRecord:
    arch: ArchitectureClass
    config: Configuration
    fidelity: FidelityLevel
    log: TrainingLog
    final_performance: float | None = None
    cost: float = 0.0

    def __post_init__(self):
        if (self.final_performance is not None) != self.fidelity.full:
            raise ValueError("final_performance must be present exactly for full-fidelity trials")
        if self.final_performance is not None and not 0 <= self.final_performance <= 1:
            raise ValueError("final_performance must lie in [0, 1]")

    @property
    def observed_performance(self) -> float:
        """Final performance if known, else the last validation metric, else 1 - last loss."""
        if self.final_performance is not None:
            return self.final_performance
        last = self.log.epochs[-1]
        if last.val_metric is not None:
            return float(last.val_metric)
        return float(min(max(1.0 - last.train_loss, 0.0), 1.0))

    def to_dict(self) -> dict:
        return {
            "arch": self.arch.name,
            "config": self.config.to_dict(),
            "fidelity": self.fidelity.to_dict(),
            "log": self.log.to_dict(),
            "final_performance": self.final_performance,
            "cost": self.cost,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrialRecord":
        return cls(
            ArchitectureClass(d["arch"]),
            Configuration(d["config"]),
            FidelityLevel(**d["fidelity"]),
            TrainingLog.from_dict(d["log"]),
            d["final_performance"],
            float(d.get("cost", 0.0)),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def extract_dynamics_features(log: TrainingLog) -> np.ndarray:
    """Six-entry dynamics vector, see ``FEATURE_NAMES``.

    Delta and slope are 0 with fewer than two epochs. The log-slope is a
    least-squares fit of log(loss) against epoch position using only
    strictly positive losses (0 if fewer than two remain). The last entry is
    the population variance of the final min(3, n) batch-loss variances.
    """
    n = log.completed
    if n == 0:
        raise ValueError("cannot extract features from an empty log")
    losses = log.losses
    delta = float(np.mean(np.diff(losses))) if n >= 2 else 0.0

    pos = np.arange(1, n + 1, dtype=float)
    keep = losses > 0
    slope = 0.0
    if keep.sum() >= 2:
        t = pos[keep]
        y = np.log(losses[keep])
        tc = t - t.mean()
        slope = float(np.dot(tc, y - y.mean()) / np.dot(tc, tc))

    bv = np.array([r.batch_loss_variance for r in log.epochs[-min(3, n):]], dtype=float)
    return np.array([1.0, losses[0], losses[-1], delta, slope, float(np.var(bv))])


class Trainer(Protocol):
    def run(
        self,
        arch: ArchitectureClass,
        config: Configuration,
        fidelity: FidelityLevel,
        seed: int,
        curriculum: CurriculumSchedule | None = None,
    ) -> TrialRecord: ...


def run_trial(
    trainer: Trainer,
    arch: ArchitectureClass,
    config: Configuration,
    fidelity: FidelityLevel,
    seed: int,
    curriculum: CurriculumSchedule | None = None,
) -> TrialRecord:
    return trainer.run(arch, config, fidelity, seed, curriculum)


def build_request(arch, config, fidelity: FidelityLevel, seed: int, curriculum=None) -> dict:
    return {
        "architecture": str(arch),
        "assignments": Configuration(config).to_dict(),
        "epoch_budget": fidelity.epoch_budget,
        "data_fraction": fidelity.data_fraction,
        "seed": int(seed),
        "report_final": fidelity.full,
        "curriculum": curriculum.to_pairs() if curriculum is not None else None,
    }


@dataclass
class SubprocessTrainer:
    """Runs each trial in a fresh child process speaking the line protocol."""

    command: Sequence[str]
    timeout: float = 3600.0
    env: Mapping[str, str] | None = None

    def run(self, arch, config, fidelity, seed, curriculum=None) -> TrialRecord:
        request = build_request(arch, config, fidelity, seed, curriculum)
        try:
            proc = subprocess.Popen(
                list(self.command),
                stdin=subprocess.PIPE,
                stdout=subprocess.PIPE,
                stderr=subprocess.PIPE,
                text=True,
                env=dict(self.env) if self.env is not None else None,
            )
        except OSError as exc:
            raise TrainerLaunchError(f"could not start trainer {list(self.command)!r}: {exc}") from exc

        timed_out = False
        try:
            out, err = proc.communicate(json.dumps(request) + "\n", timeout=self.timeout)
        except subprocess.TimeoutExpired:
            proc.kill()
            out, err = proc.communicate()
            timed_out = True
        except BrokenPipeError:
            out, err = proc.communicate()

        epochs, terminal, problem = _parse_stream(out or "")
        partial = TrainingLog(tuple(epochs), max(fidelity.epoch_budget, len(epochs)))
        if timed_out:
            raise TrialTimeout(
                f"trainer exceeded {self.timeout:g}s after {len(epochs)} epochs", partial
            )
        if not epochs and terminal is None and proc.returncode != 0:
            tail = (err or "").strip().splitlines()[-3:]
            raise TrainerLaunchError(
                f"trainer exited with status {proc.returncode} before emitting any record: "
                + " | ".join(tail)
            )
        if problem is None:
            problem = _check_complete(epochs, terminal, fidelity, proc.returncode)
        if problem is not None:
            raise ProtocolViolation(f"protocol violation: {problem}", partial)

        return TrialRecord(
            ArchitectureClass(str(arch)),
            Configuration(config),
            fidelity,
            TrainingLog(tuple(epochs), fidelity.epoch_budget),
            terminal.get("final_performance"),
            float(terminal.get("cost", fidelity.epoch_budget * fidelity.data_fraction)),
        )


def _parse_stream(text: str) -> tuple[list[EpochRecord], dict | None, str | None]:
    epochs: list[EpochRecord] = []
    terminal = None
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        if terminal is not None:
            return epochs, terminal, f"line {lineno}: output after terminal record"
        try:
            msg = json.loads(line)
        except json.JSONDecodeError:
            return epochs, terminal, f"line {lineno}: not a JSON object"
        if not isinstance(msg, dict):
            return epochs, terminal, f"line {lineno}: not a JSON object"
        if "epoch" in msg:
            try:
                rec = EpochRecord(
                    int(msg["epoch"]),
                    float(msg["train_loss"]),
                    float(msg["batch_loss_variance"]),
                    None if msg.get("val_metric") is None else float(msg["val_metric"]),
                )
            except (KeyError, TypeError, ValueError) as exc:
                return epochs, terminal, f"line {lineno}: malformed epoch record ({exc})"
            expected = epochs[-1].epoch + 1 if epochs else 1
            if rec.epoch != expected:
                return epochs, terminal, f"line {lineno}: epoch {rec.epoch}, expected {expected}"
            if not (math.isfinite(rec.train_loss) and rec.train_loss >= 0):
                return epochs, terminal, f"line {lineno}: loss must be finite and >= 0"
            epochs.append(rec)
        elif "final_performance" in msg:
            terminal = msg
        else:
            return epochs, terminal, f"line {lineno}: unrecognised record"
    return epochs, terminal, None


def _check_complete(epochs, terminal, fidelity: FidelityLevel, returncode: int) -> str | None:
    if len(epochs) != fidelity.epoch_budget:
        return f"received {len(epochs)} of {fidelity.epoch_budget} epochs"
    if terminal is None:
        return "missing terminal record"
    perf = terminal.get("final_performance")
    if fidelity.full:
        if not isinstance(perf, (int, float)) or not 0 <= perf <= 1:
            return f"full-fidelity trial needs final_performance in [0, 1], got {perf!r}"
    elif perf is not None:
        return "final_performance reported for a partial-fidelity trial"
    if returncode != 0:
        return f"trainer exited with status {returncode}"
    return None


def worker_command(bench_path: str) -> list[str]:
    """Command line for the bundled synthetic trainer process."""
    return [sys.executable, "-m", "stepsearch.worker", str(bench_path)]


def parallel_map(fn: Callable[[Any], Any], items: Sequence, workers: int = 1) -> list:
    """``[fn(x) for x in items]`` with up to ``workers`` threads; order preserved."""
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


@dataclass
class TrialOutcome:
    """A trial result or the error it raised (used where failures are tolerated)."""

    record: TrialRecord | None = None
    error: TrialError | None = None
    meta: dict = field(default_factory=dict)


def capture(fn: Callable[[], TrialRecord]) -> TrialOutcome:
    try:
        return TrialOutcome(record=fn())
    except TrialError as exc:
        return TrialOutcome(error=exc)
