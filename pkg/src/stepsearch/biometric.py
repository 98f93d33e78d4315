"""Verification scoring and evaluation.

All rates are percentages. A claim is accepted when ``score >= threshold``.
Threshold sweeps use every distinct score plus one sentinel just above the
maximum (where nothing is accepted), so the sweep always runs from
``FMR = 100, FNMR = 0`` to ``FMR = 0, FNMR = 100``.
"""

from __future__ import annotations

import csv
import io
import itertools
import math
import re
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, NamedTuple, Sequence

import numpy as np

from stepsearch.curriculum import ConditionTag


class MetricError(ValueError):
    pass


class SubmissionError(ValueError):
    def __init__(self, message: str, file: str = "scores", line: int | None = None):
        where = f"{file} file" + (f", line {line}" if line is not None else "")
        super().__init__(f"{where}: {message}")
        self.file = file
        self.line = line


class LowResolutionWarning(UserWarning):
    pass


SIDES = ("left", "right")
REFS_PER_SIDE = 5


# ---------------------------------------------------------------------------
# Embeddings and score production
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Embedding:
    id: str
    side: str
    condition: ConditionTag | None
    vector: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.vector, dtype=float).reshape(-1)
        if self.side not in SIDES:
            raise ValueError(f"side must be one of {SIDES}, got {self.side!r}")
        if not np.all(np.isfinite(v)):
            raise ValueError(f"embedding {self.id!r} has non-finite entries")
        if not np.any(v):
            raise ValueError(f"embedding {self.id!r} has zero norm")
        object.__setattr__(self, "vector", v)


def cosine_similarity(a, b) -> float:
    a = np.asarray(a, dtype=float).reshape(-1)
    b = np.asarray(b, dtype=float).reshape(-1)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape[0]} vs {b.shape[0]}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("cosine similarity of a zero-norm vector")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


@dataclass(frozen=True)
class ReferenceGallery:
    """Per identity, a ``(5, D)`` array of references for each foot."""

    refs: Mapping[str, Mapping[str, np.ndarray]]

    def __post_init__(self):
        dims = set()
        for ident, sides in self.refs.items():
            if set(sides) != set(SIDES):
                raise ValueError(f"identity {ident!r} needs both left and right references")
            for side, arr in sides.items():
                arr = np.asarray(arr, dtype=float)
                if arr.ndim != 2 or arr.shape[0] != REFS_PER_SIDE:
                    raise ValueError(
                        f"identity {ident!r} has {arr.shape[0] if arr.ndim == 2 else 0} {side} references, "
                        f"expected {REFS_PER_SIDE}"
                    )
                if np.any(np.linalg.norm(arr, axis=1) == 0) or not np.all(np.isfinite(arr)):
                    raise ValueError(f"identity {ident!r} has a degenerate {side} reference")
                dims.add(arr.shape[1])
        if len(dims) > 1:
            raise ValueError(f"mixed embedding dimensions in gallery: {sorted(dims)}")

    @classmethod
    def from_embeddings(cls, embeddings: Iterable[Embedding]) -> "ReferenceGallery":
        grouped: dict[str, dict[str, list]] = {}
        for e in embeddings:
            grouped.setdefault(e.id, {s: [] for s in SIDES})[e.side].append(e.vector)
        return cls({i: {s: np.array(v) for s, v in sides.items()} for i, sides in grouped.items()})

    @property
    def identities(self) -> list[str]:
        return sorted(self.refs)


def match_score(probe: Embedding, gallery: ReferenceGallery, claimed_id: str) -> float:
    """Mean cosine similarity to the claimed identity's same-side references."""
    if claimed_id not in gallery.refs:
        raise KeyError(f"claimed identity {claimed_id!r} is not enrolled")
    refs = np.asarray(gallery.refs[claimed_id][probe.side], dtype=float)
    if refs.shape[1] != probe.vector.shape[0]:
        raise ValueError(f"probe dimension {probe.vector.shape[0]} does not match gallery {refs.shape[1]}")
    sims = refs @ probe.vector / (np.linalg.norm(refs, axis=1) * np.linalg.norm(probe.vector))
    return float(np.clip(sims, -1.0, 1.0).mean())


def znorm(raw: float, cohort_raws: Sequence[float]) -> float:
    cohort = np.asarray(cohort_raws, dtype=float)
    if cohort.size < 2:
        raise ValueError("cohort needs at least two scores")
    # compare values, not std: the std of a constant float array can be ~1e-17
    sd = cohort.std()
    if sd == 0 or np.all(cohort == cohort[0]):
        return 0.0
    return float((raw - cohort.mean()) / sd)


def logistic(z: float) -> float:
    if z >= 0:
        return 1.0 / (1.0 + math.exp(-z))
    e = math.exp(z)
    return e / (1.0 + e)


def cohort_normalize(raw: float, cohort_raws: Sequence[float], norm=znorm) -> float:
    """Normalise against a cohort (z-norm by default) and squash into [0, 1]."""
    return logistic(norm(raw, cohort_raws))


def score_claim(probe: Embedding, gallery: ReferenceGallery, claimed_id: str, norm=znorm) -> float:
    """Raw match score normalised by the other enrolled identities' same-side scores."""
    raw = match_score(probe, gallery, claimed_id)
    cohort = [match_score(probe, gallery, i) for i in gallery.identities if i != claimed_id]
    return cohort_normalize(raw, cohort, norm)


# ---------------------------------------------------------------------------
# Score sets and threshold metrics
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ScoreSet:
    scores: np.ndarray
    genuine: np.ndarray  # bool per record
    probe_ids: tuple = ()
    claimed_ids: tuple = ()
    conditions: tuple = ()  # ConditionTag per record, or empty
    true_ids: tuple = ()

    def __post_init__(self):
        s = np.asarray(self.scores, dtype=float).reshape(-1)
        g = np.asarray(self.genuine, dtype=bool).reshape(-1)
        if s.shape != g.shape:
            raise ValueError("scores and labels differ in length")
        if not np.all(np.isfinite(s)) or np.any((s < 0) | (s > 1)):
            raise ValueError("scores must lie in [0, 1]")
        n = s.shape[0]
        probe_ids = tuple(self.probe_ids) or tuple(range(n))
        for name, col in (("probe_ids", probe_ids), ("claimed_ids", self.claimed_ids),
                          ("conditions", self.conditions), ("true_ids", self.true_ids)):
            if col and len(col) != n:
                raise ValueError(f"{name} has {len(col)} entries for {n} scores")
        object.__setattr__(self, "scores", s)
        object.__setattr__(self, "genuine", g)
        object.__setattr__(self, "probe_ids", probe_ids)
        object.__setattr__(self, "claimed_ids", tuple(self.claimed_ids))
        object.__setattr__(
            self, "conditions",
            tuple(c if isinstance(c, ConditionTag) else ConditionTag.parse(c) for c in self.conditions),
        )
        object.__setattr__(self, "true_ids", tuple(self.true_ids))

    def __len__(self) -> int:
        return self.scores.shape[0]

    @property
    def n_genuine(self) -> int:
        return int(self.genuine.sum())

    @property
    def n_impostor(self) -> int:
        return len(self) - self.n_genuine

    def subset(self, mask) -> "ScoreSet":
        mask = np.asarray(mask, dtype=bool)
        idx = np.flatnonzero(mask)

        def take(col):
            return tuple(col[i] for i in idx) if col else ()

        return ScoreSet(self.scores[mask], self.genuine[mask], take(self.probe_ids), take(self.claimed_ids),
                        take(self.conditions), take(self.true_ids))

    def with_scores(self, scores) -> "ScoreSet":
        return ScoreSet(scores, self.genuine, self.probe_ids, self.claimed_ids, self.conditions, self.true_ids)

    def _require_both(self):
        if self.n_genuine == 0 or self.n_impostor == 0:
            raise MetricError(
                f"need genuine and impostor records (have {self.n_genuine} genuine, {self.n_impostor} impostor)"
            )


class Rates(NamedTuple):
    fmr: float
    fnmr: float
    acc: float
    bacc: float


def acc_bacc(fnmr: float, fmr: float, n_genuine: int, n_impostor: int) -> tuple[float, float]:
    """Accuracy and balanced accuracy implied by rates and class counts."""
    acc = 100.0 - (n_genuine * fnmr + n_impostor * fmr) / (n_genuine + n_impostor)
    return acc, 100.0 - (fmr + fnmr) / 2.0


def rates_at_threshold(s: ScoreSet, t: float) -> Rates:
    s._require_both()
    accept = s.scores >= t
    fa = int((accept & ~s.genuine).sum())
    fr = int((~accept & s.genuine).sum())
    fmr = 100.0 * fa / s.n_impostor
    fnmr = 100.0 * fr / s.n_genuine
    acc = 100.0 * (len(s) - fa - fr) / len(s)
    return Rates(fmr, fnmr, acc, 100.0 - (fmr + fnmr) / 2.0)


@dataclass(frozen=True)
class Sweep:
    thresholds: np.ndarray
    fmr: np.ndarray
    fnmr: np.ndarray
    false_accepts: np.ndarray  # impostor counts accepted at each threshold


def threshold_sweep(s: ScoreSet) -> Sweep:
    s._require_both()
    thr = np.unique(s.scores)
    thr = np.append(thr, np.nextafter(thr[-1], np.inf))
    imp = np.sort(s.scores[~s.genuine])
    gen = np.sort(s.scores[s.genuine])
    fa = imp.size - np.searchsorted(imp, thr, side="left")
    fr = np.searchsorted(gen, thr, side="left")
    return Sweep(thr, 100.0 * fa / imp.size, 100.0 * fr / gen.size, fa)


def compute_eer(s: ScoreSet) -> tuple[float, float]:
    """Equal error rate and its threshold.

    Takes the first sweep point where ``FMR <= FNMR``; if the rates are not
    equal there, both curves are interpolated linearly from the previous
    point to where they meet.
    """
    sw = threshold_sweep(s)
    d = sw.fmr - sw.fnmr
    j = int(np.argmax(d <= 0))
    if d[j] == 0 or j == 0:
        return float((sw.fmr[j] + sw.fnmr[j]) / 2), float(sw.thresholds[j])
    w = d[j - 1] / (d[j - 1] - d[j])
    fmr = sw.fmr[j - 1] + w * (sw.fmr[j] - sw.fmr[j - 1])
    fnmr = sw.fnmr[j - 1] + w * (sw.fnmr[j] - sw.fnmr[j - 1])
    thr = sw.thresholds[j - 1] + w * (sw.thresholds[j] - sw.thresholds[j - 1])
    return float((fmr + fnmr) / 2), float(thr)


def fmr100_point(s: ScoreSet, target: float = 1.0) -> tuple[float, float]:
    """``(FNMR, threshold)`` at the smallest threshold with ``FMR <= target`` percent."""
    sw = threshold_sweep(s)
    n_imp = s.n_impostor
    if n_imp < 100 / target:
        warnings.warn(
            f"only {n_imp} impostor scores; FMR resolution is {100 / n_imp:.3g}%", LowResolutionWarning, stacklevel=2
        )
    # integer test avoids rounding at exactly the target rate
    ok = sw.false_accepts * 100.0 <= target * n_imp
    k = int(np.argmax(ok))
    return float(sw.fnmr[k]), float(sw.thresholds[k])


def fmr100(s: ScoreSet) -> float:
    return fmr100_point(s)[0]


@dataclass(frozen=True)
class DetCurve:
    thresholds: np.ndarray
    fmr: np.ndarray
    fnmr: np.ndarray

    def points(self) -> list[tuple[float, float]]:
        return list(zip(self.fmr.tolist(), self.fnmr.tolist()))

    def __len__(self) -> int:
        return self.fmr.shape[0]


def det_curve(s: ScoreSet) -> DetCurve:
    """One point per distinct FMR, at the lowest threshold reaching it."""
    sw = threshold_sweep(s)
    keep = np.concatenate([[True], sw.false_accepts[1:] != sw.false_accepts[:-1]])
    return DetCurve(sw.thresholds[keep], sw.fmr[keep], sw.fnmr[keep])


@dataclass(frozen=True)
class MetricsReport:
    eer: float
    eer_threshold: float
    fmr100: float
    acc: float
    bacc: float
    fnmr: float
    fmr: float
    threshold: float
    det_points: list = field(default_factory=list, repr=False)

    def summary(self) -> dict:
        return {k: getattr(self, k) for k in ("eer", "eer_threshold", "fmr100", "acc", "bacc", "fnmr", "fmr", "threshold")}


def evaluate(s: ScoreSet, threshold: float) -> MetricsReport:
    eer, eer_t = compute_eer(s)
    f100 = fmr100(s)
    r = rates_at_threshold(s, threshold)
    return MetricsReport(eer, eer_t, f100, r.acc, r.bacc, r.fnmr, r.fmr, threshold, det_curve(s).points())


# ---------------------------------------------------------------------------
# Stratified and cross-model analyses
# ---------------------------------------------------------------------------

GROUPINGS = ("condition", "footwear", "speed")


def _stratum_key(tag: ConditionTag, by: str) -> str:
    if by == "condition":
        return str(tag)
    if by == "footwear":
        return tag.footwear
    if by == "speed":
        return tag.speed
    raise ValueError(f"group-by must be one of {GROUPINGS}")


@dataclass(frozen=True)
class StratifiedEER:
    eer: dict[str, float]
    genuine_counts: dict[str, int]
    omitted: dict[str, str]


def stratified_eer(s: ScoreSet, by: str = "condition", impostors: str = "global") -> StratifiedEER:
    """EER per condition stratum.

    Genuine claims are split by their probe's condition. With
    ``impostors="global"`` each stratum is scored against every impostor
    claim; ``"matched"`` keeps only impostor probes from the same stratum.
    """
    if not s.conditions:
        raise MetricError("score set carries no condition labels")
    if impostors not in ("global", "matched"):
        raise ValueError("impostors must be 'global' or 'matched'")
    keys = np.array([_stratum_key(c, by) for c in s.conditions], dtype=object)
    eers, counts, omitted = {}, {}, {}
    for key in sorted(set(keys)):
        in_stratum = keys == key
        mask = (in_stratum & s.genuine) | (~s.genuine & (in_stratum if impostors == "matched" else True))
        sub = s.subset(mask)
        counts[key] = sub.n_genuine
        if sub.n_genuine == 0 or sub.n_impostor == 0:
            omitted[key] = f"{sub.n_genuine} genuine, {sub.n_impostor} impostor"
            continue
        eers[key] = compute_eer(sub)[0]
    return StratifiedEER(eers, counts, omitted)


def misclassified(s: ScoreSet, threshold: float) -> set:
    accept = s.scores >= threshold
    wrong = accept != s.genuine
    return {s.probe_ids[i] for i in np.flatnonzero(wrong)}


@dataclass(frozen=True)
class Overlap:
    intersections: dict[tuple[str, ...], set]
    full: set
    false_matches: int | None = None
    false_non_matches: int | None = None

    def counts(self) -> dict[str, int]:
        return {"&".join(k): len(v) for k, v in self.intersections.items()}


def misclassification_overlap(
    decisions: Mapping[str, set], genuine: Mapping | None = None
) -> Overlap:
    """Intersections of misclassified-probe sets for every group of two or more models.

    ``genuine`` maps probe id to whether the claim was genuine; when given,
    the all-model intersection is split into false matches (impostor
    accepted) and false non-matches (genuine rejected).
    """
    names = list(decisions)
    if len(names) < 2:
        raise ValueError("need at least two models")
    sets = {n: set(decisions[n]) for n in names}
    inter = {}
    for r in range(2, len(names) + 1):
        for combo in itertools.combinations(names, r):
            inter[combo] = set.intersection(*(sets[n] for n in combo))
    full = inter[tuple(names)]
    fm = fnm = None
    if genuine is not None:
        fnm = sum(1 for p in full if genuine[p])
        fm = len(full) - fnm
    return Overlap(inter, full, fm, fnm)


# ---------------------------------------------------------------------------
# Submission files
# ---------------------------------------------------------------------------

_DECIMAL = re.compile(r"[+-]?(\d+(\.\d*)?|\.\d+)([eE][+-]?\d+)?")


@dataclass(frozen=True)
class Submission:
    scores: np.ndarray
    threshold: float


def _lines(data: bytes, file: str) -> list[str]:
    try:
        text = data.decode("utf-8")
    except UnicodeDecodeError as e:
        raise SubmissionError(f"not valid UTF-8 text (byte {e.start})", file) from None
    if text == "":
        raise SubmissionError("file is empty", file, 1)
    if text.endswith("\n"):
        text = text[:-1]
    return text.split("\n")


def _number(token: str, file: str, line: int) -> float:
    if token == "":
        raise SubmissionError("empty line", file, line)
    if not _DECIMAL.fullmatch(token):
        raise SubmissionError(f"not a decimal number: {token!r}", file, line)
    return float(token)


def parse_submission(scores_bytes: bytes, threshold_bytes: bytes, expected_count: int = 10000) -> Submission:
    lines = _lines(scores_bytes, "scores")
    values = np.empty(len(lines))
    for i, tok in enumerate(lines, start=1):
        v = _number(tok, "scores", i)
        if not 0.0 <= v <= 1.0:
            raise SubmissionError(f"value {tok} outside the range [0, 1]", "scores", i)
        values[i - 1] = v
    if len(lines) != expected_count:
        raise SubmissionError(f"expected {expected_count}, found {len(lines)}", "scores")
    tlines = _lines(threshold_bytes, "threshold")
    if len(tlines) != 1:
        raise SubmissionError(f"expected a single value, found {len(tlines)} lines", "threshold")
    t = _number(tlines[0], "threshold", 1)
    if not math.isfinite(t):
        raise SubmissionError("threshold must be finite", "threshold", 1)
    return Submission(values, t)


# ---------------------------------------------------------------------------
# Delimited-text IO
# ---------------------------------------------------------------------------

MANIFEST_FIELDS = ("probe_id", "claimed_id", "true_id", "label", "footwear", "speed")


@dataclass(frozen=True)
class ManifestRecord:
    probe_id: str
    claimed_id: str
    true_id: str
    genuine: bool
    condition: ConditionTag


def _read_rows(path: str | Path, required: Sequence[str]) -> tuple[list[str], list[dict]]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = [c for c in required if c not in header]
        if missing:
            raise ValueError(f"{path}: missing columns {missing}")
        return header, list(reader)


def read_manifest(path: str | Path) -> list[ManifestRecord]:
    _, rows = _read_rows(path, MANIFEST_FIELDS)
    out = []
    for n, row in enumerate(rows, start=2):
        label = row["label"].strip().lower()
        if label not in ("genuine", "impostor"):
            raise ValueError(f"{path}, line {n}: label must be 'genuine' or 'impostor', got {row['label']!r}")
        out.append(ManifestRecord(row["probe_id"], row["claimed_id"], row["true_id"], label == "genuine",
                                  ConditionTag(row["footwear"], row["speed"])))
    return out


def write_manifest(records: Sequence[ManifestRecord], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_FIELDS)
        for r in records:
            w.writerow([r.probe_id, r.claimed_id, r.true_id, "genuine" if r.genuine else "impostor",
                        r.condition.footwear, r.condition.speed])


def scoreset_from(scores, manifest: Sequence[ManifestRecord]) -> ScoreSet:
    scores = np.asarray(scores, dtype=float)
    if scores.shape[0] != len(manifest):
        raise ValueError(f"{scores.shape[0]} scores for {len(manifest)} manifest records")
    return ScoreSet(
        scores,
        [r.genuine for r in manifest],
        tuple(r.probe_id for r in manifest),
        tuple(r.claimed_id for r in manifest),
        tuple(r.condition for r in manifest),
        tuple(r.true_id for r in manifest),
    )


def read_embeddings(path: str | Path) -> list[Embedding]:
    header, rows = _read_rows(path, ("id", "side", "footwear", "speed"))
    value_cols = [c for c in header if c not in ("id", "side", "footwear", "speed")]
    if not value_cols:
        raise ValueError(f"{path}: no embedding value columns")
    out = []
    for row in rows:
        cond = ConditionTag(row["footwear"], row["speed"]) if row["footwear"] else None
        out.append(Embedding(row["id"], row["side"], cond, np.array([float(row[c]) for c in value_cols])))
    return out


def write_det_csv(curve: DetCurve, path: str | Path | None = None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["threshold", "fmr", "fnmr"])
    for t, a, b in zip(curve.thresholds, curve.fmr, curve.fnmr):
        w.writerow([repr(float(t)), repr(float(a)), repr(float(b))])
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text)
    return text
