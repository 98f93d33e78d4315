"""Bundled synthetic trainer process: ``python -m stepsearch.worker BENCH.json``.

Reads one request line from stdin and answers with the epoch and terminal
records of :mod:`stepsearch.trainer`'s line protocol.
"""

from __future__ import annotations

import json
import sys

from stepsearch.curriculum import CurriculumSchedule
from stepsearch.space import Configuration
from stepsearch.synthetic import SyntheticBenchmark, simulate_training
from stepsearch.trainer import FidelityLevel


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    if len(argv) != 1:
        print("usage: python -m stepsearch.worker BENCH.json", file=sys.stderr)
        return 2
    bench = SyntheticBenchmark.load(argv[0])
    req = json.loads(sys.stdin.readline())
    fidelity = FidelityLevel(
        int(req["epoch_budget"]), float(req["data_fraction"]), full=bool(req.get("report_final")),
    )
    curriculum = None
    if req.get("curriculum") is not None:
        curriculum = CurriculumSchedule.from_pairs(req["curriculum"])
    rec = simulate_training(
        bench, req["architecture"], Configuration(req["assignments"]), fidelity, int(req["seed"]), curriculum
    )
    out = sys.stdout
    for e in rec.log.epochs:
        out.write(json.dumps(e.to_dict()) + "\n")
    out.write(json.dumps({"final_performance": rec.final_performance, "cost": rec.cost}) + "\n")
    out.flush()
    return 0


if __name__ == "__main__":
    sys.exit(main())
