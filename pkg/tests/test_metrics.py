import math

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st
from oracles import (cavg_oracle, cllr_oracle, eer_oracle, llr_oracle, min_cavg_oracle, pooled_eer_oracle,
                     random_metric_instance)

from lidkit.data import LanguageList, LidError, ScoreMatrix, TrialLabels
from lidkit.metrics import (DetectionTrialSet, MetricReport, accuracy, c_avg, cllr, detection_llrs, eer,
                            eer_from_scores, evaluate, expand_trials, fixed, format_table, min_c_avg)


def make(scores, labels):
    scores = np.asarray(scores, dtype=np.float64)
    k = scores.shape[1]
    ids = [f"u{i}" for i in range(scores.shape[0])]
    sm = ScoreMatrix(ids=ids, scores=scores, languages=LanguageList(f"l{j}" for j in range(k)))
    return sm, TrialLabels(ids=ids, true_lang=labels)


def trials_of(llr, labels):
    llr = np.asarray(llr, dtype=np.float64)
    return DetectionTrialSet(llr=llr, labels=np.asarray(labels), languages=tuple(f"l{j}" for j in range(llr.shape[1])))


@st.composite
def instances(draw, max_n=30, max_k=6):
    k = draw(st.integers(2, max_k))
    n = draw(st.integers(k, max_n))
    seed = draw(st.integers(0, 2**32 - 1))
    rng = np.random.default_rng(seed)
    labels = np.concatenate([np.arange(k), rng.integers(0, k, n - k)])
    scale = draw(st.sampled_from([0.1, 1.0, 5.0]))
    scores = rng.normal(0, scale, (n, k))
    scores[np.arange(n), labels] += draw(st.floats(0, 3))
    return scores, labels


class TestExpandTrials:
    def test_symmetric_zero_scores(self):
        sm, lab = make([[0, 0], [0, 0]], [0, 1])
        tr = expand_trials(sm, lab)
        llr, tar = tr.pooled
        assert llr.size == 4 and tar.sum() == 2
        assert (llr == 0).all()

    def test_hand_value(self):
        sm, lab = make([[math.log(2), 0, 0]], [0])
        tr = expand_trials(sm, lab)
        assert tr.llr[0, 0] == pytest.approx(math.log(2), abs=1e-15)
        assert list(tr.is_target[0]) == [True, False, False]

    def test_missing_id_and_k1(self):
        sm, _ = make([[0, 1]], [0])
        with pytest.raises(LidError, match="'v'"):
            expand_trials(sm, TrialLabels(ids=["v"], true_lang=[0]))
        single = ScoreMatrix(ids=["a"], scores=[[1.0]], languages=LanguageList(["x"]))
        with pytest.raises(LidError, match="at least 2 languages"):
            expand_trials(single, TrialLabels(ids=["a"], true_lang=[0]))

    def test_bad_p_target(self):
        sm, lab = make([[0, 1]], [0])
        for p in (0.0, 1.0, -0.1):
            with pytest.raises(LidError):
                expand_trials(sm, lab, p)

    def test_trial_counts(self):
        rng = np.random.default_rng(0)
        sm, lab = make(rng.normal(size=(7, 4)), [0, 1, 2, 3, 0, 1, 2])
        tr = expand_trials(sm, lab)
        assert tr.llr.size == 28
        assert tr.is_target.sum() == 7
        tar, non = tr.per_language(0)
        assert tar.size == 2 and non.size == 5

    def test_llrs_match_scalar_oracle(self):
        rng = np.random.default_rng(3)
        s = rng.normal(0, 20, (40, 9))
        np.testing.assert_allclose(detection_llrs(s), llr_oracle(s), atol=1e-12, rtol=0)

    def test_tied_rows_give_identical_llrs(self):
        s = np.array([[0.5, 1.0, 1.5, 0.5], [1.5, 0.5, 1.0, 0.5]])
        llr = detection_llrs(s)
        assert llr[0, 3] == llr[1, 1] and llr[0, 0] == llr[1, 3]
        assert (detection_llrs(np.full((2, 5), 0.7)) == 0.0).all()


class TestCavg:
    def test_perfect_is_zero(self):
        llr = np.full((4, 2), -10.0)
        llr[[0, 1, 2, 3], [0, 1, 0, 1]] = 10.0
        assert c_avg(trials_of(llr, [0, 1, 0, 1])) == 0.0

    def test_all_wrong_is_one(self):
        llr = np.full((4, 3), 10.0)
        llr[[0, 1, 2, 3], [0, 1, 2, 0]] = -10.0
        assert c_avg(trials_of(llr, [0, 1, 2, 0])) == 1.0

    def test_random_6_languages_matches_counter(self):
        rng = np.random.default_rng(6)
        labels = np.concatenate([np.arange(6), rng.integers(0, 6, 44)])
        scores = rng.normal(size=(50, 6))
        scores[np.arange(50), labels] += 1.0
        sm, lab = make(scores, labels)
        tr = expand_trials(sm, lab)
        for thr in (-1.0, 0.0, 0.5):
            assert abs(c_avg(tr, 0.5, thr) - cavg_oracle(llr_oracle(scores), labels, 0.5, thr)) < 1e-12

    def test_all_zero_k13_tie_rule(self):
        # every llr is exactly 0 and fires under the >= rule: Pmiss = 0, Pfa = 1
        sm, lab = make(np.zeros((26, 13)), np.arange(26) % 13)
        tr = expand_trials(sm, lab)
        assert c_avg(tr) == 0.5
        assert cavg_oracle(tr.llr, lab.true_lang) == 0.5
        rep = evaluate(sm, lab)
        assert fixed(rep.c_avg, 4) == "0.5000"

    def test_tie_at_threshold_counts_as_detection(self):
        llr = np.array([[0.0, -1.0], [0.0, 1.0]])
        # target of lang 0 sits exactly on the threshold: no miss
        # non-target (row 1, detector 0) also on the threshold: false alarm
        assert c_avg(trials_of(llr, [0, 1])) == pytest.approx(0.5 * 0.5 * 1.0)

    def test_missing_language_named(self):
        sm, lab = make(np.zeros((2, 3)), [0, 1])
        with pytest.raises(LidError, match="'l2'"):
            c_avg(expand_trials(sm, lab))

    def test_min_cavg_matches_sweep(self):
        rng = np.random.default_rng(11)
        for _ in range(20):
            s, y = random_metric_instance(rng)
            tr = expand_trials(*make(s, y))
            assert abs(min_c_avg(tr) - min_cavg_oracle(tr.llr, y)) < 1e-12

    @settings(max_examples=60, deadline=None)
    @given(instances(), st.floats(0.05, 0.95), st.floats(-3, 3))
    def test_min_le_actual_and_bounded(self, inst, p, thr):
        tr = expand_trials(*make(*inst), p)
        actual = c_avg(tr, p, thr)
        assert 0.0 <= actual <= 1.0
        assert min_c_avg(tr, p) <= actual + 1e-12

    @settings(max_examples=40, deadline=None)
    @given(instances(), st.integers(0, 2**32 - 1))
    def test_row_shift_invariance(self, inst, seed):
        scores, y = inst
        shifts = np.random.default_rng(seed).integers(-64, 65, (scores.shape[0], 1)).astype(np.float64)
        a = evaluate(*make(scores, y))
        b = evaluate(*make(scores + shifts, y))
        assert a.accuracy == b.accuracy
        for f in ("c_avg", "min_c_avg", "eer_percent", "cllr_bits"):
            assert abs(getattr(a, f) - getattr(b, f)) < 1e-9, f


class TestEer:
    def test_perfect(self):
        assert eer_from_scores([2.0, 3.0], [-2.0, -3.0]) == 0.0

    def test_crossing_at_half(self):
        assert eer_from_scores([0.9, 0.2], [0.8, 0.1]) == 50.0

    def test_all_reversed(self):
        assert eer_from_scores([-1.0, -2.0], [1.0, 2.0]) == 100.0

    def test_random_500_matches_oracle(self):
        rng = np.random.default_rng(5)
        tar = rng.normal(1, 1, 250)
        non = rng.normal(0, 1, 250)
        assert abs(eer_from_scores(tar, non) - eer_oracle(tar, non)) < 1e-9

    def test_degenerate(self):
        with pytest.raises(LidError):
            eer_from_scores([], [1.0])
        with pytest.raises(LidError):
            eer_from_scores([1.0], [])

    @settings(max_examples=60, deadline=None)
    @given(st.lists(st.floats(-5, 5), min_size=1, max_size=40), st.lists(st.floats(-5, 5), min_size=1, max_size=40))
    def test_range_and_oracle(self, tar, non):
        e = eer_from_scores(tar, non)
        assert 0.0 <= e <= 100.0
        assert abs(e - eer_oracle(tar, non)) < 1e-9

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.floats(-3, 3), min_size=1, max_size=30), st.lists(st.floats(-3, 3), min_size=1, max_size=30))
    def test_monotone_transform_invariance(self, tar, non):
        tar, non = np.array(tar), np.array(non)
        f = lambda v: np.exp(v) * 2.0 + 1.0  # noqa: E731
        assume(np.unique(f(np.concatenate([tar, non]))).size == np.unique(np.concatenate([tar, non])).size)
        assert abs(eer_from_scores(tar, non) - eer_from_scores(f(tar), f(non))) < 1e-9

    def test_pooled_eer_matches_oracle(self):
        rng = np.random.default_rng(9)
        s, y = random_metric_instance(rng)
        tr = expand_trials(*make(s, y))
        assert abs(eer(tr) - pooled_eer_oracle(tr.llr, y)) < 1e-9


class TestCllr:
    def test_certain_correct(self):
        y = np.array([0, 1, 2, 0])
        s = np.zeros((4, 3))
        s[np.arange(4), y] = 50.0
        assert cllr(*make(s, y)) < 1e-10

    @pytest.mark.parametrize("k", [2, 3, 4, 13])
    def test_all_zero_is_log2k(self, k):
        y = np.arange(2 * k) % k
        assert cllr(*make(np.zeros((2 * k, k)), y)) == pytest.approx(math.log2(k), abs=1e-15)

    def test_clamped_not_infinite(self):
        s = np.array([[0.0, 1e6], [1e6, 0.0]])
        v = cllr(*make(s, [0, 1]))
        assert math.isfinite(v)
        assert v == pytest.approx(-math.log2(1e-300))

    def test_balanced_weighting(self):
        # language 0 has 3 perfect trials, language 1 one uniform trial
        s = np.array([[50.0, 0], [50, 0], [50, 0], [0, 0]])
        assert cllr(*make(s, [0, 0, 0, 1])) == pytest.approx(0.5, abs=1e-12)

    def test_missing_language(self):
        with pytest.raises(LidError, match="'l1'"):
            cllr(*make(np.zeros((2, 2)), [0, 0]))

    @settings(max_examples=50, deadline=None)
    @given(instances())
    def test_matches_oracle_and_nonnegative(self, inst):
        s, y = inst
        v = cllr(*make(s, y))
        assert v >= 0.0
        assert abs(v - cllr_oracle(s, y)) < 1e-9


class TestAccuracy:
    def test_identity(self):
        assert accuracy(*make(np.eye(3), [0, 1, 2])) == 1.0

    def test_permuted(self):
        assert accuracy(*make(np.eye(3), [1, 2, 0])) == 0.0

    def test_tie_goes_to_lowest_index(self):
        assert accuracy(*make(np.zeros((1, 3)), [0])) == 1.0
        assert accuracy(*make(np.zeros((1, 3)), [1])) == 0.0


class TestReport:
    def test_perfect_scores_render_zero(self):
        s = np.full((4, 2), -5.0)
        s[[0, 1, 2, 3], [0, 1, 0, 1]] = 5.0
        rep = evaluate(*make(s, [0, 1, 0, 1]))
        table = format_table([("sys", rep)])
        assert " 0.0000 " in table and " 0.00 " in table

    def test_paper_style_rounding(self):
        rep = MetricReport(c_avg=0.00785, min_c_avg=0.0070, eer_percent=0.855, cllr_bits=0.1, accuracy=0.99,
                           n_trials=10, n_languages=2, p_target=0.5)
        row = format_table([("fusion", rep)]).splitlines()[2].split()
        assert row[1] == "0.0079" and row[3] == "0.86"

    def test_json_round_trip(self):
        import json
        rep = evaluate(*make(np.random.default_rng(0).normal(size=(6, 3)), [0, 1, 2, 0, 1, 2]))
        assert MetricReport(**json.loads(rep.to_json())) == rep
        assert rep.min_c_avg <= rep.c_avg
