import math
import warnings
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, strategies as st

from stepsearch.biometric import (
    Embedding,
    LowResolutionWarning,
    ManifestRecord,
    MetricError,
    ReferenceGallery,
    ScoreSet,
    SubmissionError,
    acc_bacc,
    cohort_normalize,
    compute_eer,
    cosine_similarity,
    det_curve,
    evaluate,
    fmr100,
    fmr100_point,
    logistic,
    match_score,
    misclassification_overlap,
    misclassified,
    parse_submission,
    rates_at_threshold,
    read_embeddings,
    read_manifest,
    score_claim,
    scoreset_from,
    stratified_eer,
    threshold_sweep,
    write_det_csv,
    write_manifest,
    znorm,
)
from stepsearch.curriculum import ALL_CONDITIONS, ConditionTag

LEADERBOARD = [  # team, EER, FMR100, ACC, BACC, FNMR, FMR
    ("Saeid_UCC", 10.77, 59.63, 88.51, 88.94, 10.00, 12.13),
    ("Peneter ML", 11.33, 67.34, 87.61, 88.37, 9.73, 13.53),
    ("CyberTI", 11.50, 67.12, 86.99, 88.17, 8.87, 14.79),
    ("Anonymous", 11.67, 80.14, 87.94, 88.24, 11.00, 12.51),
    ("Technologist", 12.23, 77.46, 87.36, 87.75, 11.27, 13.23),
]


def scoreset(gen, imp):
    return ScoreSet(np.r_[gen, imp], np.r_[np.ones(len(gen), bool), np.zeros(len(imp), bool)])


def random_set(rng, n=200, sep=1.0, ties=False):
    g = rng.random(n) < 0.3
    g[:2], g[2:4] = True, False
    raw = rng.normal(0, 1, n) + sep * g
    s = 1 / (1 + np.exp(-raw))
    if ties:
        s = np.round(s, 1)
    return ScoreSet(s, g)


# -- oracles ----------------------------------------------------------------


def oracle_rates(scores, genuine, t):
    """Direct counting with the accept-if-score>=t rule."""
    fa = sum(1 for s, g in zip(scores, genuine) if not g and s >= t)
    fr = sum(1 for s, g in zip(scores, genuine) if g and s < t)
    ni = sum(1 for g in genuine if not g)
    ng = len(genuine) - ni
    return 100 * fa / ni, 100 * fr / ng


def oracle_eer(scores, genuine):
    """Walk every candidate threshold in ascending order; interpolate at the first crossing."""
    cands = sorted(set(scores)) + [math.nextafter(max(scores), math.inf)]
    prev = None
    for t in cands:
        fmr, fnmr = oracle_rates(scores, genuine, t)
        if fmr <= fnmr:
            if prev is None or fmr == fnmr:
                return (fmr + fnmr) / 2
            pf, pn = prev
            w = (pf - pn) / ((pf - pn) - (fmr - fnmr))
            return ((pf + w * (fmr - pf)) + (pn + w * (fnmr - pn))) / 2
        prev = (fmr, fnmr)
    raise AssertionError("no crossing")


# -- embeddings and scoring --------------------------------------------------


def test_cosine_examples_and_oracle():
    assert cosine_similarity([1, 2, 3], [1, 2, 3]) == pytest.approx(1.0, abs=1e-15)
    assert cosine_similarity([1, 0], [0, 1]) == 0.0
    rng = np.random.default_rng(0)
    for _ in range(100):
        a, b = rng.normal(size=16), rng.normal(size=16)
        fa = [Fraction(x) for x in a]
        fb = [Fraction(x) for x in b]
        dot = sum(x * y for x, y in zip(fa, fb))
        exact = float(dot) / math.sqrt(float(sum(x * x for x in fa))) / math.sqrt(float(sum(y * y for y in fb)))
        assert abs(cosine_similarity(a, b) - exact) < 1e-12
    with pytest.raises(ValueError):
        cosine_similarity([0, 0], [1, 0])
    with pytest.raises(ValueError):
        cosine_similarity([1, 0, 0], [1, 0])


def _gallery(rng, ids=("u1", "u2", "u3"), d=8):
    return ReferenceGallery({i: {"left": rng.normal(size=(5, d)), "right": rng.normal(size=(5, d))} for i in ids})


def test_match_score_examples():
    eye = np.eye(6)
    gal = ReferenceGallery({"a": {"left": eye[:5], "right": eye[1:]}})
    assert match_score(Embedding("p", "left", None, eye[0]), gal, "a") == pytest.approx(0.2)
    assert match_score(Embedding("p", "left", None, eye[5]), gal, "a") == 0.0
    with pytest.raises(KeyError):
        match_score(Embedding("p", "left", None, eye[0]), gal, "zz")


def test_match_score_enumeration_oracle():
    rng = np.random.default_rng(1)
    gal = _gallery(rng)
    for _ in range(20):
        p = Embedding("p", rng.choice(["left", "right"]), None, rng.normal(size=8))
        for ident in gal.identities:
            refs = gal.refs[ident][p.side]
            brute = sum(cosine_similarity(p.vector, r) for r in refs) / 5
            assert match_score(p, gal, ident) == pytest.approx(brute, abs=1e-12)


def test_gallery_validation():
    rng = np.random.default_rng(2)
    with pytest.raises(ValueError):
        ReferenceGallery({"a": {"left": rng.normal(size=(4, 3)), "right": rng.normal(size=(5, 3))}})
    with pytest.raises(ValueError):
        ReferenceGallery({"a": {"left": rng.normal(size=(5, 3))}})
    with pytest.raises(ValueError):
        Embedding("x", "up", None, [1.0])


def test_cohort_normalization():
    assert cohort_normalize(0.4, [0.3, 0.5]) == 0.5
    assert znorm(0.9, [0.2, 0.2, 0.2]) == 0.0
    rng = np.random.default_rng(3)
    for _ in range(50):
        cohort, raw = rng.random(10), rng.random()
        mean = sum(cohort) / 10
        sd = math.sqrt(sum((c - mean) ** 2 for c in cohort) / 10)
        assert znorm(raw, cohort) == pytest.approx((raw - mean) / sd, abs=1e-12)
    with pytest.raises(ValueError):
        znorm(0.1, [0.2])


@given(st.floats(-1, 1), st.floats(-1, 1), st.integers(2, 20))
def test_constant_cohort_gives_zero(raw, c, n):
    assert znorm(raw, [c] * n) == 0.0


@given(st.lists(st.floats(-1, 1), min_size=2, max_size=10), st.floats(-1, 1), st.floats(-1, 1))
def test_cohort_normalization_preserves_ranking(cohort, a, b):
    na, nb = cohort_normalize(a, cohort), cohort_normalize(b, cohort)
    assert 0.0 <= na <= 1.0
    if a < b:
        assert na <= nb


def test_score_claim_ranks_genuine_above_cohort():
    rng = np.random.default_rng(4)
    gal = _gallery(rng, ids=tuple(f"u{i}" for i in range(6)))
    probe = Embedding("p", "left", None, gal.refs["u2"]["left"].mean(axis=0))
    scores = {i: score_claim(probe, gal, i) for i in gal.identities}
    assert max(scores, key=scores.get) == "u2" and all(0 <= v <= 1 for v in scores.values())
    assert logistic(-800) == 0.0 and logistic(800) == 1.0


# -- threshold metrics -------------------------------------------------------


@pytest.mark.parametrize("row", LEADERBOARD, ids=[r[0] for r in LEADERBOARD])
def test_leaderboard_identities(row):
    _, _, _, acc, bacc, fnmr, fmr = row
    a, b = acc_bacc(fnmr, fmr, 3000, 7000)
    assert a == pytest.approx(acc, abs=0.006) and b == pytest.approx(bacc, abs=0.006)


def test_leaderboard_first_and_third_rows_exact():
    assert acc_bacc(10.0, 12.13, 3000, 7000) == pytest.approx((88.509, 88.935), abs=1e-9)
    assert acc_bacc(8.87, 14.79, 3000, 7000) == pytest.approx((86.986, 88.17), abs=1e-9)


def test_rates_at_threshold_counts():
    gen = np.r_[np.full(300, 0.2), np.full(2700, 0.8)]
    imp = np.r_[np.full(849, 0.7), np.full(6151, 0.1)]
    r = rates_at_threshold(scoreset(gen, imp), 0.5)
    assert r.fnmr == 10.0 and r.fmr == pytest.approx(100 * 849 / 7000)
    assert (r.acc, r.bacc) == pytest.approx(acc_bacc(r.fnmr, r.fmr, 3000, 7000))


def test_separable_case():
    s = scoreset([0.9, 0.8], [0.1, 0.2])
    r = rates_at_threshold(s, 0.5)
    assert (r.fmr, r.fnmr, r.acc, r.bacc) == (0.0, 0.0, 100.0, 100.0)
    assert compute_eer(s)[0] == 0.0
    with pytest.warns(LowResolutionWarning):
        assert fmr100(s) == 0.0
    pts = det_curve(s).points()
    assert (0.0, 0.0) in pts
    assert all(f == 0 or n == 0 for f, n in pts)


def test_eer_crossing_example():
    s = scoreset([0.9, 0.8, 0.3], [0.4, 0.2, 0.1])
    eer, thr = compute_eer(s)
    assert eer == pytest.approx(100 / 3)
    assert oracle_rates(s.scores, s.genuine, thr) == pytest.approx((100 / 3, 100 / 3))


def test_single_class_raises():
    s = scoreset([0.9, 0.8], [])
    for fn in (compute_eer, fmr100, det_curve, lambda x: rates_at_threshold(x, 0.5)):
        with pytest.raises(MetricError):
            fn(s)


@pytest.mark.parametrize("seed", range(20))
def test_eer_matches_exhaustive_oracle(seed):
    rng = np.random.default_rng(seed)
    s = random_set(rng, ties=seed % 2 == 1)
    assert compute_eer(s)[0] == pytest.approx(oracle_eer(list(s.scores), list(s.genuine)), abs=1e-9)


def test_fmr100_constructed_distribution():
    rng = np.random.default_rng(5)
    s = scoreset(np.ones(100), rng.random(10_000))
    fnmr, thr = fmr100_point(s)
    assert fnmr == 0.0 and thr == pytest.approx(0.99, abs=0.005)
    # smallest threshold with at most 100 impostors accepted
    imp = np.sort(s.scores[~s.genuine])
    assert thr == imp[-100]


@pytest.mark.parametrize("seed", range(10))
def test_fmr100_is_smallest_qualifying_threshold(seed):
    rng = np.random.default_rng(seed)
    s = random_set(rng, n=600)
    fnmr, thr = fmr100_point(s) if s.n_impostor >= 100 else (None, None)
    cands = sorted(set(s.scores)) + [math.nextafter(s.scores.max(), math.inf)]
    ok = [t for t in cands if oracle_rates(s.scores, s.genuine, t)[0] <= 1.0]
    assert thr == ok[0] and fnmr == pytest.approx(oracle_rates(s.scores, s.genuine, ok[0])[1])
    eer = compute_eer(s)[0]
    if eer > 1.0:
        assert fnmr >= eer


@pytest.mark.parametrize("seed", range(100))
def test_det_properties(seed):
    rng = np.random.default_rng(seed)
    s = random_set(rng, n=int(rng.integers(10, 120)), sep=rng.uniform(0, 3), ties=seed % 3 == 0)
    d = det_curve(s)
    assert np.all(np.diff(d.thresholds) > 0)
    assert np.all(np.diff(d.fmr) < 0) and np.all(np.diff(d.fnmr) >= 0)
    for t, f, n in zip(d.thresholds[:5], d.fmr[:5], d.fnmr[:5]):
        r = rates_at_threshold(s, t)
        assert (r.fmr, r.fnmr) == (f, n)
    sw = threshold_sweep(s)
    assert np.all(np.diff(sw.fmr) <= 0) and np.all(np.diff(sw.fnmr) >= 0)
    assert sw.fmr[-1] == 0.0 and sw.fnmr[-1] == 100.0
    for t in sw.thresholds[::7]:
        r = rates_at_threshold(s, t)
        assert r.bacc == 100 - (r.fmr + r.fnmr) / 2


@pytest.mark.parametrize("transform", [np.sqrt, lambda x: x ** 3, lambda x: (np.exp(x) - 1) / (np.e - 1)])
def test_monotone_transform_invariance(transform):
    rng = np.random.default_rng(6)
    s = random_set(rng, n=2000)
    t = s.with_scores(transform(s.scores))
    assert compute_eer(t)[0] == pytest.approx(compute_eer(s)[0], abs=1e-9)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", LowResolutionWarning)
        assert fmr100(t) == fmr100(s)
    assert set(det_curve(t).points()) == set(det_curve(s).points())


def test_evaluate_report():
    rng = np.random.default_rng(7)
    s = random_set(rng, n=1000)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", LowResolutionWarning)
        rep = evaluate(s, 0.6)
    r = rates_at_threshold(s, 0.6)
    assert (rep.fmr, rep.fnmr, rep.acc, rep.bacc) == tuple(r[:4])
    assert set(rep.summary()) == {"eer", "eer_threshold", "fmr100", "acc", "bacc", "fnmr", "fmr", "threshold"}


# -- stratification and overlap ----------------------------------------------------


def _conditioned(rng):
    bf, st_ = ConditionTag("BF", "W1"), ConditionTag("ST", "W2")
    n = 400
    genuine = np.r_[np.ones(200, bool), np.zeros(200, bool)]
    cond = [bf] * 100 + [st_] * 100 + [bf, st_] * 100
    imp = rng.uniform(0, 0.5, 200)
    sep = rng.uniform(0.6, 1.0, 100)  # BF genuine: above every impostor
    rnd = rng.uniform(0, 0.5, 100)  # ST genuine: same distribution as impostors
    return ScoreSet(np.r_[sep, rnd, imp], genuine, tuple(f"p{i}" for i in range(n)), conditions=tuple(cond))


def test_stratified_eer_constructed():
    s = _conditioned(np.random.default_rng(8))
    out = stratified_eer(s)
    assert out.eer["BF/W1"] == 0.0 and abs(out.eer["ST/W2"] - 50) < 10
    assert sum(out.genuine_counts.values()) == s.n_genuine
    matched = stratified_eer(s, impostors="matched")
    assert matched.eer["BF/W1"] == 0.0
    foot = stratified_eer(s, by="footwear")
    assert set(foot.eer) == {"BF", "ST"}


def test_single_stratum_equals_global_and_omission():
    rng = np.random.default_rng(9)
    base = random_set(rng)
    tag = ALL_CONDITIONS[0]
    s = ScoreSet(base.scores, base.genuine, conditions=(tag,) * len(base))
    assert stratified_eer(s).eer[str(tag)] == compute_eer(s)[0]
    cond = [tag if g else ALL_CONDITIONS[5] for g in base.genuine]
    m = stratified_eer(ScoreSet(base.scores, base.genuine, conditions=tuple(cond)), impostors="matched")
    assert str(tag) in m.omitted and str(ALL_CONDITIONS[5]) in m.omitted
    with pytest.raises(MetricError):
        stratified_eer(base)


def test_overlap_examples():
    a = {"p1", "p2"}
    assert misclassification_overlap({"m1": a, "m2": set(a)}).full == a
    assert misclassification_overlap({"m1": a, "m2": {"p3"}}).full == set()
    with pytest.raises(ValueError):
        misclassification_overlap({"m1": a})


@given(st.lists(st.sets(st.integers(0, 30)), min_size=2, max_size=4))
def test_overlap_matches_membership_oracle(sets):
    decisions = {f"m{i}": {f"p{x}" for x in s} for i, s in enumerate(sets)}
    out = misclassification_overlap(decisions)
    names = list(decisions)
    universe = set().union(*decisions.values())
    for combo, inter in out.intersections.items():
        assert inter == {p for p in universe if all(p in decisions[n] for n in combo)}
    assert len(out.intersections) == 2 ** len(names) - len(names) - 1
    assert out.full == out.intersections[tuple(names)]


def test_overlap_split_and_misclassified():
    s = ScoreSet([0.9, 0.4, 0.7, 0.1], [True, True, False, False], ("a", "b", "c", "d"))
    wrong = misclassified(s, 0.5)
    assert wrong == {"b", "c"}
    ov = misclassification_overlap({"x": wrong, "y": {"b", "c", "d"}}, dict(zip(s.probe_ids, s.genuine.tolist())))
    assert ov.full == {"b", "c"} and ov.false_non_matches == 1 and ov.false_matches == 1


# -- submissions --------------------------------------------------------------


def test_submission_valid():
    sub = parse_submission(b"0.5\n" * 10_000, b"0.5\n")
    assert sub.scores.shape == (10_000,) and sub.threshold == 0.5
    assert parse_submission(b"0\n1\n.25", b"1e-1", expected_count=3).threshold == pytest.approx(0.1)


def test_submission_count_error():
    with pytest.raises(SubmissionError, match="expected 10000, found 9999"):
        parse_submission(b"0.5\n" * 9_999, b"0.5")


def test_submission_range_error_names_line():
    lines = [b"0.5"] * 10_000
    lines[41] = b"1.5"
    with pytest.raises(SubmissionError) as exc:
        parse_submission(b"\n".join(lines), b"0.5")
    assert exc.value.line == 42 and "line 42" in str(exc.value) and "[0, 1]" in str(exc.value)


@pytest.mark.parametrize("data,line", [(b"0.5\nabc\n0.1", 2), (b"0.5\n\n0.1", 2), (b"", 1),
                                        (b"0.5\nnan\n0.1", 2), (b"0.5\n0.1\n-0.2", 3), (b"0.5\n0x1\n0.1", 2)])
def test_submission_token_errors(data, line):
    with pytest.raises(SubmissionError) as exc:
        parse_submission(data, b"0.5", expected_count=3)
    assert exc.value.line == line


@pytest.mark.parametrize("thr", [b"", b"0.5\n0.6", b"inf", b"x"])
def test_submission_threshold_errors(thr):
    with pytest.raises(SubmissionError) as exc:
        parse_submission(b"0.5", thr, expected_count=1)
    assert exc.value.file == "threshold"


# -- files -------------------------------------------------------------------


def test_manifest_round_trip(tmp_path):
    recs = [ManifestRecord(f"p{i}", "u1", "u1" if i % 2 else "u2", bool(i % 2), ALL_CONDITIONS[i])
            for i in range(6)]
    path = tmp_path / "m.csv"
    write_manifest(recs, path)
    assert read_manifest(path) == recs
    s = scoreset_from(np.linspace(0, 1, 6), recs)
    assert s.n_genuine == 3 and s.probe_ids[0] == "p0" and s.conditions[3] == ALL_CONDITIONS[3]
    with pytest.raises(ValueError):
        scoreset_from([0.1], recs)
    bad = tmp_path / "bad.csv"
    bad.write_text(path.read_text().replace("genuine", "maybe", 1))
    with pytest.raises(ValueError, match="line 3"):
        read_manifest(bad)


def test_embeddings_and_det_csv(tmp_path):
    p = tmp_path / "e.csv"
    p.write_text("id,side,footwear,speed,v0,v1\nu1,left,BF,W1,1.0,0.0\nu1,right,,,0.0,2.0\n")
    embs = read_embeddings(p)
    assert embs[0].condition == ALL_CONDITIONS[0] and embs[1].condition is None
    assert embs[1].vector.tolist() == [0.0, 2.0]
    curve = det_curve(scoreset([0.9, 0.3], [0.4, 0.1]))
    text = write_det_csv(curve, tmp_path / "det.csv")
    rows = text.strip().split("\n")
    assert rows[0] == "threshold,fmr,fnmr" and len(rows) == len(curve) + 1
    assert (tmp_path / "det.csv").read_text() == text
