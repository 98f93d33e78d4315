"""Command-line entry point: ``stepsearch {search,bench,eval,overlap}``.

Exit codes: 0 success, 1 data error, 2 usage error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import shlex
import sys
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from stepsearch import biometric as bio
from stepsearch.config import load_document, space_from_dict, space_to_dict
from stepsearch.ecco import EccoConfig, EccoError, MutationRates, ecco_search
from stepsearch.gp import ProxyDataset
from stepsearch.grm import GrmConfig, GrmError, grm_search
from stepsearch.space import Configuration, SpaceError, discretize, encode_unit_cube
from stepsearch.synthetic import CurveParams, SyntheticBenchmark, SyntheticTrainer, quadratic_bowl
from stepsearch.timfbo import FidelitySchedule, TimfboConfig, TimfboError, proxy_from_function, timfbo_search
from stepsearch.trainer import SubprocessTrainer, TrialError

OUTPUT_ENV = "STEPSEARCH_OUTPUT"
STRATEGIES = ("grm", "timfbo", "ecco")


class DataError(Exception):
    """Bad input data or a failed run; maps to exit status 1."""


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _section(cls, d: dict | None, name: str, **extra):
    d = dict(d or {})
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(d) - names)
    if unknown:
        raise DataError(f"unknown keys in '{name}' section: {', '.join(unknown)}")
    d.update(extra)
    try:
        return cls(**d)
    except (TypeError, ValueError) as e:
        raise DataError(f"invalid '{name}' section: {e}") from None


def _dumps(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, indent=2, allow_nan=True) + "\n"


def _jsonable(x):
    if isinstance(x, Configuration):
        return x.to_dict()
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.generic):
        return x.item()
    return x


def _build_benchmark(doc: dict, space, spec: str) -> SyntheticBenchmark:
    if spec != "synthetic":
        path = Path(spec)
        if not path.exists():
            raise DataError(f"benchmark file not found: {spec}")
        return SyntheticBenchmark.load(path)
    b = dict(doc.get("benchmark") or {})
    center = b.pop("center", None)
    extra = {k: b.pop(k) for k in ("curriculum_weight", "curriculum_target", "coverage_weight",
                                   "batch_var_scale", "batch_var_jitter") if k in b}
    curve_fields = {f.name for f in dataclasses.fields(CurveParams)} - {"center"}
    unknown = sorted(set(b) - curve_fields)
    if unknown:
        raise DataError(f"unknown keys in 'benchmark' section: {', '.join(unknown)}")
    try:
        bench = quadratic_bowl(space, center, **b)
        return dataclasses.replace(bench, **extra)
    except (TypeError, ValueError) as e:
        raise DataError(f"invalid 'benchmark' section: {e}") from None


def _trainer(args, doc, space):
    if args.trainer_cmd:
        return SubprocessTrainer(shlex.split(args.trainer_cmd)), None
    bench = _build_benchmark(doc, space, args.benchmark)
    return SyntheticTrainer(bench), bench


def _output_dir(args) -> Path:
    root = Path(args.output or os.environ.get(OUTPUT_ENV) or "runs")
    run_id = args.run_id or f"{args.strategy}-seed{args.seed}"
    return root / run_id


# ---------------------------------------------------------------------------
# search
# ---------------------------------------------------------------------------


def _run_grm(args, doc, space, trainer, out: Path) -> dict:
    sec = dict(doc.get("grm") or {})
    bins = int(sec.pop("bins", 4))
    cap = int(sec.pop("cap", 512))
    if args.budget is not None:
        sec["max_episodes"] = int(args.budget)
    cfg = _section(GrmConfig, sec, "grm")
    actions = {c.name: discretize(space.for_class(c), bins, seed=args.seed, cap=cap) for c in space.classes}
    res = grm_search(space, actions, trainer, cfg, args.seed, workers=args.workers,
                     audit_path=out / "history.jsonl", resume=args.resume)
    chosen = res.best(actions)
    values = {c: res.q.q(c, a) for c, a in res.policy.items()}
    arch = max(values, key=lambda c: (values[c], -list(values).index(c)))
    best = {"strategy": "grm", "architecture": arch, "config": chosen[arch], "value": values[arch],
            "per_class": {c: {"action": res.policy[c], "config": chosen[c], "q": values[c]} for c in res.policy}}
    summary = {"episodes": cfg.max_episodes, "phase1_epochs": res.phase1_epochs_used,
               "phase2_epochs": res.phase2_epochs_used, "records": len(res.audit)}
    return best, summary


def _proxy(sec: dict | None, space, bench, arch) -> ProxyDataset | None:
    if not sec:
        return None
    if "file" in sec:
        path = Path(sec["file"])
        if not path.exists():
            raise DataError(f"proxy file not found: {path}")
        rows = [json.loads(l) for l in path.read_text().splitlines() if l.strip()]
        X = np.stack([encode_unit_cube(space, Configuration(r["config"])) for r in rows])
        return ProxyDataset(X, np.array([float(r["y"]) for r in rows]))
    if bench is None:
        raise DataError("a sampled proxy needs the synthetic benchmark; give 'proxy: {file: ...}' instead")
    return proxy_from_function(space, lambda c: bench.true_performance(arch, c),
                               int(sec.get("samples", 64)), seed=int(sec.get("seed", 0)))


def _run_timfbo(args, doc, space, trainer, bench, out: Path):
    sec = dict(doc.get("timfbo") or {})
    full_epochs = int(sec.pop("full_epochs", 27))
    n_rungs = int(sec.pop("n_rungs", 3))
    eta = int(sec.pop("eta", 3))
    budget = float(sec.pop("budget", 30.0))
    if args.budget is not None:
        budget = float(args.budget)
    proxy_sec = sec.pop("proxy", None)
    arch = sec.pop("architecture", space.classes[0].name)
    cfg = _section(TimfboConfig, sec, "timfbo")
    try:
        schedule = FidelitySchedule.geometric(full_epochs, n_rungs, eta)
    except ValueError as e:
        raise DataError(f"invalid fidelity schedule: {e}") from None
    sub = space.for_class(arch)
    proxy = _proxy(proxy_sec, sub, bench, arch)
    res = timfbo_search(space, trainer, schedule, proxy, budget, args.seed, cfg, arch=arch,
                        workers=args.workers, history_path=out / "history.jsonl", resume=args.resume)
    best = {"strategy": "timfbo", "architecture": arch,
            "config": res.best_config.to_dict() if res.best_config is not None else None,
            "value": res.best_y, "from_model": res.from_model}
    summary = {"budget": budget, "spent": res.spent, "trials": len(res.history), "full_trials": res.full_trials}
    return best, summary


def _run_ecco(args, doc, space, trainer, out: Path):
    sec = dict(doc.get("ecco") or {})
    rates = _section(MutationRates, sec.pop("rates", None), "ecco.rates")
    arch = sec.pop("architecture", space.classes[0].name)
    if args.budget is not None:
        sec["generations"] = int(args.budget)
    cfg = _section(EccoConfig, sec, "ecco", rates=rates)
    res = ecco_search(space, trainer, cfg, args.seed, arch=arch, workers=args.workers,
                      history_path=out / "history.jsonl")
    best = {"strategy": "ecco", "architecture": arch, "config": res.best.hyperparams.to_dict(),
            "curriculum": res.best.to_dict()["curriculum"], "value": res.fitness.scalar,
            "fitness": res.fitness.to_dict()}
    summary = {"generations": cfg.generations, "pop_size": cfg.pop_size, "lam": cfg.lam}
    return best, summary


def cmd_search(args) -> int:
    try:
        doc = load_document(args.config)
        space = space_from_dict(doc.get("space") or doc)
    except FileNotFoundError:
        raise DataError(f"config file not found: {args.config}") from None
    except (SpaceError, ValueError, KeyError, TypeError) as e:
        raise DataError(f"invalid config {args.config}: {e}") from None
    out = _output_dir(args)
    manifest = {
        "run_id": out.name,
        "strategy": args.strategy,
        "space": space_to_dict(space),
        "trainer": args.trainer_cmd or args.benchmark,
        "seed": args.seed,
        "budget": args.budget,
    }
    manifest_path = out / "manifest.json"
    if out.exists() and manifest_path.exists():
        if not args.resume:
            raise DataError(f"run '{out.name}' already exists in {out.parent}; use --resume or another --run-id")
        if json.loads(manifest_path.read_text()) != manifest:
            raise DataError(f"run '{out.name}' was started with different settings; refusing to resume")
        if args.strategy == "ecco" and (out / "summary.json").exists():
            # a finished ecco run is complete; re-running would reproduce it exactly
            print((out / "best_config.json").read_text(), end="")
            return 0
    out.mkdir(parents=True, exist_ok=True)
    manifest_path.write_text(_dumps(manifest))

    trainer, bench = _trainer(args, doc, space)
    try:
        if args.strategy == "grm":
            best, summary = _run_grm(args, doc, space, trainer, out)
        elif args.strategy == "timfbo":
            best, summary = _run_timfbo(args, doc, space, trainer, bench, out)
        else:
            best, summary = _run_ecco(args, doc, space, trainer, out)
    except (GrmError, TimfboError, EccoError, TrialError) as e:
        raise DataError(f"{args.strategy} search failed: {e}") from None
    except (SpaceError, ValueError) as e:
        raise DataError(f"{args.strategy} search rejected its inputs: {e}") from None

    best = _jsonable(best)
    (out / "best_config.json").write_text(_dumps(best))
    summary = _jsonable({"run_id": out.name, "strategy": args.strategy, "seed": args.seed,
                         "best_value": best["value"], **summary})
    (out / "summary.json").write_text(_dumps(summary))
    print(_dumps(best), end="")
    return 0


# ---------------------------------------------------------------------------
# bench
# ---------------------------------------------------------------------------


def cmd_bench(args) -> int:
    from stepsearch import suite

    rows = []
    seeds = range(args.seeds)
    grid = suite.grm_problem()
    hits = sum(
        grm_search(grid.bench.space, grid.actions, SyntheticTrainer(grid.bench), GrmConfig(), s).policy[suite.ARCH]
        == grid.optimum
        for s in seeds
    )
    rows.append(("grm", "planted action chosen", f"{hits}/{args.seeds}"))

    bench, opt = suite.bowl_problem()
    sched = FidelitySchedule.geometric(27)
    gaps = [opt - timfbo_search(bench.space, SyntheticTrainer(bench), sched, None, 30.0, s).best_y for s in seeds]
    rows.append(("timfbo", "within 0.05 of optimum", f"{sum(g <= 0.05 for g in gaps)}/{args.seeds}"))

    cbench, copt = suite.curriculum_problem()
    gaps = [copt - ecco_search(cbench.space, SyntheticTrainer(cbench), EccoConfig(), s).fitness.scalar for s in seeds]
    rows.append(("ecco", "within 0.05 of optimum", f"{sum(g <= 0.05 for g in gaps)}/{args.seeds}"))

    width = max(len(r[1]) for r in rows)
    for name, what, result in rows:
        print(f"{name:<7} {what:<{width}}  {result}")
    return 0


# ---------------------------------------------------------------------------
# eval / overlap
# ---------------------------------------------------------------------------

COLUMNS = ("eer", "fmr100", "acc", "bacc", "fnmr", "fmr")


def format_report(report: bio.MetricsReport) -> str:
    header = " ".join(f"{c.upper():>7}" for c in COLUMNS)
    values = " ".join(f"{getattr(report, c):7.2f}" for c in COLUMNS)
    return f"{header}\n{values}\n"


def cmd_eval(args) -> int:
    try:
        manifest = bio.read_manifest(args.manifest)
    except FileNotFoundError:
        raise DataError(f"manifest not found: {args.manifest}") from None
    except (ValueError, KeyError) as e:
        raise DataError(f"bad manifest: {e}") from None
    expected = args.expected_count if args.expected_count is not None else len(manifest)
    try:
        sub = bio.parse_submission(Path(args.scores).read_bytes(), Path(args.threshold).read_bytes(), expected)
        scores = bio.scoreset_from(sub.scores, manifest)
        report = bio.evaluate(scores, sub.threshold)
    except FileNotFoundError as e:
        raise DataError(f"file not found: {e.filename}") from None
    except (bio.SubmissionError, bio.MetricError, ValueError) as e:
        raise DataError(str(e)) from None
    strat = bio.stratified_eer(scores)
    print(format_report(report), end="")
    if args.output:
        out = Path(args.output)
        out.mkdir(parents=True, exist_ok=True)
        record = {**report.summary(), "stratified_eer": strat.eer, "stratified_omitted": strat.omitted}
        (out / "report.json").write_text(_dumps(record))
        bio.write_det_csv(bio.det_curve(scores), out / "det.csv")
        (out / "misclassified.txt").write_text(
            "".join(f"{p}\n" for p in sorted(bio.misclassified(scores, sub.threshold), key=str))
        )
    return 0


def _read_ids(path: str) -> set[str]:
    try:
        return {l.strip() for l in Path(path).read_text().splitlines() if l.strip()}
    except OSError as e:
        raise DataError(f"cannot read {path}: {e.strerror}") from None


def cmd_overlap(args) -> int:
    if len(args.files) < 2:
        print("overlap needs at least two decision files", file=sys.stderr)
        return 2
    names = [Path(f).stem for f in args.files]
    if len(set(names)) != len(names):
        names = [str(f) for f in args.files]
    decisions = {n: _read_ids(f) for n, f in zip(names, args.files)}
    genuine = None
    if args.manifest:
        try:
            genuine = {r.probe_id: r.genuine for r in bio.read_manifest(args.manifest)}
        except (OSError, ValueError) as e:
            raise DataError(f"bad manifest: {e}") from None
        unknown = sorted(set().union(*decisions.values()) - set(genuine))
        if unknown:
            raise DataError(f"probe ids missing from manifest: {', '.join(unknown[:5])}")
    ov = bio.misclassification_overlap(decisions, genuine)
    record = {"counts": ov.counts(), "all": len(ov.full),
              "false_matches": ov.false_matches, "false_non_matches": ov.false_non_matches}
    if args.json:
        print(_dumps(record), end="")
    else:
        for k, v in ov.counts().items():
            print(f"{k}: {v}")
        line = f"all models: {len(ov.full)}"
        if genuine is not None:
            line += f" (false matches {ov.false_matches}, false non-matches {ov.false_non_matches})"
        print(line)
    return 0


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="stepsearch", description="Hyperparameter search and verification scoring.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("search", help="run a search strategy")
    s.add_argument("strategy", choices=STRATEGIES)
    s.add_argument("--config", required=True, help="YAML or JSON file with a 'space' section")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--benchmark", default="synthetic", help="'synthetic' or a saved benchmark JSON")
    s.add_argument("--trainer-cmd", help="external trainer command speaking the line protocol")
    s.add_argument("--output", help=f"output root (default ${OUTPUT_ENV} or ./runs)")
    s.add_argument("--run-id")
    s.add_argument("--resume", action="store_true")
    s.add_argument("--budget", type=float,
                   help="grm: episodes; timfbo: full-trial equivalents; ecco: generations")
    s.add_argument("--workers", type=int, default=1)
    s.set_defaults(func=cmd_search)

    b = sub.add_parser("bench", help="run the built-in synthetic suite")
    b.add_argument("--seeds", type=int, default=3)
    b.set_defaults(func=cmd_bench)

    e = sub.add_parser("eval", help="score a submission against a ground-truth manifest")
    e.add_argument("--scores", required=True)
    e.add_argument("--threshold", required=True)
    e.add_argument("--manifest", required=True)
    e.add_argument("--expected-count", type=int, help="default: number of manifest records")
    e.add_argument("--output", help="directory for report.json, det.csv and misclassified.txt")
    e.set_defaults(func=cmd_eval)

    o = sub.add_parser("overlap", help="intersect misclassified-probe lists across models")
    o.add_argument("files", nargs="+")
    o.add_argument("--manifest", help="split the common core into false matches and non-matches")
    o.add_argument("--json", action="store_true")
    o.set_defaults(func=cmd_overlap)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "workers", 1) < 1:
        print("--workers must be >= 1", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except DataError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
