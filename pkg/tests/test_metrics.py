import math
import random

import pytest
from hypothesis import assume, given, settings, strategies as st
from nltk.translate.bleu_score import SmoothingFunction, sentence_bleu
from rapidfuzz.distance import Levenshtein
from scipy.stats import ttest_rel

from radabench.backends import Clumsy, Oracle, Scripted
from radabench.corpus import ground_truth_spec
from radabench.engine import Limits, run_session
from radabench.metrics import (
    METRIC_NAMES,
    Aggregate,
    EmptyText,
    MetricRow,
    aggregate,
    compute_row,
    ecr_pfsp,
    edit_distance,
    fdr,
    levenshtein_chain,
    ots_score,
    paired_compare,
    selection_rank,
    task_completion,
    text_metrics,
    thr_mhr,
    tma,
    tokenize,
    unsolvability_assess,
)
from radabench.tools import make_card
from radabench.toolset_sim import Condition, GapKind, GroundTruthGap, build_toolset
from radabench.vocab import ToolCategory

AC, MC, OS, AD, ID, GD, BQ, IE, RG, TP = tuple(ToolCategory)
CATS = list(ToolCategory)

T1, T4 = ground_truth_spec(1), ground_truth_spec(4)


# ---------------------------------------------------------------- chains


def test_levenshtein_identity():
    assert levenshtein_chain([AC, MC, OS], T1) == 0


def test_levenshtein_parallel_group():
    assert levenshtein_chain([AC, MC, AD, OS], T4) == 0
    assert levenshtein_chain([AC, MC, OS, AD], T4) == 0


def test_levenshtein_substitution():
    assert levenshtein_chain([AC, MC, ID], T1) == 1


def test_fdr_examples():
    assert fdr([AC, MC, OS, RG], T1).value == 0.25
    assert fdr([AC, MC, OS], T1).value == 0.0
    assert fdr([AC, AC, MC, OS], T1).value == 0.25


def test_fdr_empty_is_degenerate():
    r = fdr([], T1)
    assert (r.value, r.degenerate) == (1.0, True)
    r = tma([], T1)
    assert (r.value, r.degenerate) == (0.0, True)


def test_tma_examples():
    assert tma([AC, MC, AD], T1).value == pytest.approx(2 / 3)
    assert tma([AC, MC, OS], T1).value == 1.0
    assert tma([MC, AC, OS], T1).value == pytest.approx(1 / 3)


def _brute_lev(a, b):
    # plain recursion, independent of the table implementation
    from functools import lru_cache

    @lru_cache(maxsize=None)
    def d(i, j):
        if i == 0:
            return j
        if j == 0:
            return i
        return min(d(i - 1, j) + 1, d(i, j - 1) + 1, d(i - 1, j - 1) + (a[i - 1] != b[j - 1]))

    return d(len(a), len(b))


@settings(max_examples=300)
@given(st.lists(st.sampled_from(CATS), max_size=10), st.lists(st.sampled_from(CATS), max_size=10))
def test_edit_distance_matches_oracles(a, b):
    ours = edit_distance(a, b)
    assert ours == _brute_lev(tuple(a), tuple(b))
    assert ours == Levenshtein.distance([c.value for c in a], [c.value for c in b])


@given(st.lists(st.sampled_from(CATS), max_size=8), st.lists(st.sampled_from(CATS), max_size=8),
       st.lists(st.sampled_from(CATS), max_size=8))
def test_edit_distance_metric_axioms(a, b, c):
    assert edit_distance(a, b) == edit_distance(b, a)
    assert edit_distance(a, c) <= edit_distance(a, b) + edit_distance(b, c)
    assert (edit_distance(a, b) == 0) == (a == b)


@given(st.lists(st.sampled_from(CATS), max_size=12), st.integers(1, 11))
def test_chain_ratios_in_range(pred, task):
    spec = ground_truth_spec(task)
    assert 0.0 <= fdr(pred, spec).value <= 1.0
    assert 0.0 <= tma(pred, spec).value <= 1.0
    assert levenshtein_chain(pred, spec) >= 0


@given(st.integers(1, 11), st.lists(st.sampled_from(CATS), max_size=4))
def test_full_tma_means_only_insertions(task, tail):
    spec = ground_truth_spec(task)
    lin = list(spec.category_linearizations()[0])
    pred = lin + tail
    assert tma(pred, spec).value == 1.0
    assert levenshtein_chain(pred, spec) == len(tail)


def test_levenshtein_min_over_linearizations():
    spec = ground_truth_spec(10)
    pred = [AC, MC, AD, OS, ID, BQ, BQ, IE, RG]
    lins = spec.category_linearizations()
    assert levenshtein_chain(pred, spec) == min(_brute_lev(tuple(pred), tuple(lin)) for lin in lins) == 0


# ---------------------------------------------------------------- OTS


def test_ots_worked_example():
    assert ots_score(4, 2) == 0.75


def test_ots_forced_choice():
    assert ots_score(1, 1) == 1.0


def test_ots_ladder(sinusitis):
    r = sinusitis.record
    ladder = [
        make_card("TOOL1", ID, lower=0.5),
        make_card("TOOL2", ID, modality=r.modality, lower=0.6),
        make_card("TOOL3", ID, anatomy=r.anatomy, modality=r.modality, lower=0.7),
        make_card("TOOL4", ID, anatomy=r.anatomy, modality=r.modality, lower=0.8),
    ]
    n, rank = selection_rank(ladder[3], ladder, r)
    assert (n, rank) == (4, 1)
    assert ots_score(n, rank) == 1.0
    assert ots_score(*selection_rank(ladder[0], ladder, r)) == 0.25


@given(st.integers(1, 50).flatmap(lambda n: st.tuples(st.just(n), st.integers(1, n))))
def test_ots_range(nr):
    assert 0 < ots_score(*nr) <= 1


def test_ots_bad_rank():
    with pytest.raises(ValueError):
        ots_score(3, 4)


# ---------------------------------------------------------------- execution flags


def _session(entry, task, backend, cond=Condition.BASELINE, limits=None, seed=0):
    ts, gap = build_toolset(cond, seed, entry.record, task)
    return run_session(backend, entry.qa[task - 1], entry.record, ts, gap=gap, condition=cond, limits=limits)


def test_oracle_flags(sinusitis):
    t = _session(sinusitis, 3, Oracle())
    assert ecr_pfsp(t, ground_truth_spec(3)) == (True, None)
    assert thr_mhr(t, ground_truth_spec(3)) == (True, True)


def test_clumsy3_on_length5(sinusitis):
    spec = ground_truth_spec(5)
    assert spec.length == 5
    t = _session(sinusitis, 5, Clumsy(3))
    assert ecr_pfsp(t, spec) == (False, pytest.approx(2 / 5))


def test_pfsp_clamped(sinusitis):
    ts, _ = build_toolset(Condition.BASELINE, 0, sinusitis.record, 5)
    ac = next(c.name for c in ts.cards if c.category is AC)
    call = f"<Call><Purpose>p</Purpose><Tool>{ac}</Tool><Input>['$Image$']</Input></Call>"
    t = run_session(Scripted(["Tool Chain: [*AC*]"] + [call] * 7), sinusitis.qa[4], sinusitis.record, ts,
                    limits=Limits(max_steps=7))
    assert t.terminal["kind"] == "IterationCap"
    assert len(t.executed_chain) == 7
    assert ecr_pfsp(t, ground_truth_spec(5)) == (False, 1.0)


def test_task8_aborted_before_report(sinusitis):
    t = _session(sinusitis, 8, Oracle(), limits=Limits(max_steps=4))
    assert t.terminal["kind"] == "IterationCap"
    assert thr_mhr(t, ground_truth_spec(8)) == (False, True)


def test_nocall_thr(sinusitis):
    t = _session(sinusitis, 2, Oracle(), cond=Condition.INSUFFICIENT_CONFIG1)
    target, _ = thr_mhr(t, ground_truth_spec(2))
    assert not target


# ---------------------------------------------------------------- refusal


def _refusal_transcript(sinusitis, ability, category, anatomy="Head and Neck", modality="X-ray"):
    from radabench.backends import Refuser

    ts, _ = build_toolset(Condition.BASELINE, 0, sinusitis.record, 7)
    return run_session(Refuser(category, anatomy, modality, ability), sinusitis.qa[6], sinusitis.record, ts)


CS1_GAP = GroundTruthGap(AD, "Head and Neck", "X-ray", GapKind.SPECIFIC_TOOL_MISSING)


def test_case_study1_refusal_grounded(sinusitis):
    t = _refusal_transcript(sinusitis, "SpecificToolMissing", "Anomaly Detector")
    f = unsolvability_assess(t, CS1_GAP)
    assert (f.uar, f.ugr, f.false_refusal) == (True, True, False)


def test_wrong_kind_not_grounded(sinusitis):
    t = _refusal_transcript(sinusitis, "CategoryMissing", "Anomaly Detector", "Universal", "Universal")
    f = unsolvability_assess(t, CS1_GAP)
    assert (f.uar, f.ugr) == (True, False)


def test_wrong_scope_not_grounded(sinusitis):
    t = _refusal_transcript(sinusitis, "SpecificToolMissing", "Anomaly Detector", "Chest", "X-ray")
    assert not unsolvability_assess(t, CS1_GAP).ugr


def test_answer_under_config1(sinusitis):
    gap = GroundTruthGap(OS, "Universal", "Universal", GapKind.CATEGORY_MISSING)
    t = _session(sinusitis, 1, Oracle())
    f = unsolvability_assess(t, gap)
    assert (f.uar, f.ugr) == (False, False)


def test_false_refusal(sinusitis):
    t = _refusal_transcript(sinusitis, "CategoryMissing", "Anatomy Classifier")
    assert unsolvability_assess(t, None).false_refusal


def test_completion_rules():
    assert task_completion(True, True, False, False, gap_present=False)
    assert not task_completion(False, True, False, False, gap_present=False)
    assert task_completion(False, False, True, True, gap_present=True)
    assert not task_completion(False, False, True, False, gap_present=True)
    assert task_completion(True, True, False, False, gap_present=True, rescued=True)


@given(st.lists(st.booleans(), min_size=6, max_size=6), st.integers(0, 3))
def test_completion_monotone(flags, i):
    ecr, thr, uar, ugr, gap, rescued = flags
    before = task_completion(ecr, thr, uar, ugr, gap, rescued)
    sub = [ecr, thr, uar, ugr]
    sub[i] = True
    assert task_completion(*sub, gap, rescued) >= before


# ---------------------------------------------------------------- text


def test_text_identity():
    s = text_metrics("Moderate sinusitis of the maxillary sinuses.", "moderate sinusitis of the maxillary sinuses")
    assert (s.bleu, s.rouge, s.f1) == (1.0, 1.0, 1.0)


def test_text_disjoint():
    s = text_metrics("alpha beta gamma", "delta epsilon")
    assert (s.bleu, s.rouge, s.f1) == (0.0, 0.0, 0.0)


def test_text_f1_example():
    s = text_metrics("sinusitis confirmed", "bilateral maxillary sinusitis")
    assert s.f1 == pytest.approx(0.4)
    assert s.rouge == pytest.approx(1 / 3)


def test_empty_text():
    with pytest.raises(EmptyText):
        text_metrics("...", "reference")


def test_tokenize():
    assert tokenize("Lund-Mackay Score: 8!") == ["lund", "mackay", "score", "8"]


_words = st.lists(st.sampled_from(["a", "b", "c", "d", "e", "lung", "mass"]), min_size=4, max_size=15)


@settings(max_examples=200)
@given(_words, _words)
def test_bleu_matches_nltk(cand, ref):
    ours = text_metrics(" ".join(cand), " ".join(ref)).bleu
    theirs = sentence_bleu([ref], cand, smoothing_function=SmoothingFunction().method2)
    assert ours == pytest.approx(theirs, abs=1e-12)


@given(st.text(max_size=60), st.text(max_size=60))
def test_text_scores_in_range(a, b):
    assume(tokenize(a) and tokenize(b))
    s = text_metrics(a, b)
    assert all(0.0 <= v <= 1.0 + 1e-12 for v in (s.bleu, s.rouge, s.f1))


# ---------------------------------------------------------------- paired comparison


def test_paired_identical():
    r = paired_compare([1.0, 2.0, 3.0], [1.0, 2.0, 3.0])
    assert (r.wins, r.ties, r.losses, r.p, r.degenerate) == (0, 3, 0, 1.0, True)


def test_paired_17_2_1():
    rng = random.Random(7)
    b = [rng.uniform(1, 4) for _ in range(20)]
    a = [x - rng.uniform(0.2, 1.0) for x in b[:17]] + b[17:19] + [b[19] + 0.5]
    r = paired_compare(a, b)
    assert (r.wins, r.ties, r.losses) == (17, 2, 1)
    ref = ttest_rel(a, b)
    assert r.t == pytest.approx(ref.statistic, rel=1e-10)
    assert r.p == pytest.approx(ref.pvalue, rel=1e-8)


def test_paired_constant_differences():
    r = paired_compare([2.0, 3.0, 4.0, 5.0], [1.0, 2.0, 3.0, 4.0])
    assert (r.wins, r.ties, r.losses) == (0, 0, 4)
    assert r.t == math.inf and r.p == 0.0


def test_paired_score_direction():
    r = paired_compare([0.9, 0.8, 0.5], [0.5, 0.8, 0.9], lower_is_better=False)
    assert (r.wins, r.ties, r.losses) == (1, 1, 1)


@settings(max_examples=100)
@given(st.lists(st.tuples(st.floats(-5, 5), st.floats(-5, 5)), min_size=3, max_size=20))
def test_paired_matches_scipy(pairs):
    a = [round(x, 3) for x, _ in pairs]
    b = [round(y, 3) for _, y in pairs]
    diffs = [x - y for x, y in zip(a, b)]
    assume(len(set(diffs)) > 1)
    r = paired_compare(a, b)
    ref = ttest_rel(a, b)
    assert r.t == pytest.approx(ref.statistic, rel=1e-6, abs=1e-9)
    assert r.p == pytest.approx(ref.pvalue, rel=1e-6, abs=1e-9)


def test_paired_needs_two():
    with pytest.raises(ValueError):
        paired_compare([1.0], [2.0])


# ---------------------------------------------------------------- rows and aggregation


def test_compute_row_oracle(sinusitis):
    t = _session(sinusitis, 6, Oracle())
    row = compute_row(t, sinusitis.record)
    v = row.values
    assert v["completion"] and v["ecr"] and v["thr"] and v["mhr"]
    assert (v["levenshtein"], v["fdr"], v["tma"], v["ots"]) == (0, 0.0, 1.0, 1.0)
    assert v["bleu"] == v["rouge"] == v["f1"] == 1.0
    assert MetricRow.from_dict(row.to_dict()) == row


def _row(values):
    return MetricRow("q", "r", 1, "Simple", "Baseline", "b", "s", values, [])


_values = st.fixed_dictionaries({name: st.one_of(st.none(), st.floats(0, 1)) for name in ("ecr", "fdr", "tma")})


@given(_values, _values, _values)
def test_aggregate_merge_associative(x, y, z):
    a, b, c = (Aggregate.of(_row(v)) for v in (x, y, z))
    left = a.merge(b).merge(c)
    right = a.merge(b.merge(c))
    assert left.rows == right.rows == 3
    assert left.counts == right.counts
    for p, q in zip(left.sums, right.sums):
        assert p == pytest.approx(q)


def test_aggregate_means():
    agg = aggregate([_row({"ecr": 1.0, "fdr": 0.5}), _row({"ecr": 0.0, "fdr": None})])
    m = agg.means()
    assert m["ecr"] == 0.5 and m["fdr"] == 0.5 and m["ots"] is None
    assert set(m) == set(METRIC_NAMES)
