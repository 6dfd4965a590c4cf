import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from instances import miscalibrated_scores
from lidkit.data import LanguageList, LidError, ScoreMatrix, TrialLabels
from lidkit.fusion import FusionModel, calibrate_system, cllr_objective, fuse_scores, train_fusion
from lidkit.metrics import MetricReport, cllr, evaluate
from lidkit.optim import OptimizerConfig
from oracles import cllr_oracle

LANGS = LanguageList(["a", "b", "c"])


def system(scores, ids=None, langs=LANGS):
    scores = np.asarray(scores, dtype=np.float64)
    ids = ids or [f"t{i}" for i in range(len(scores))]
    return ScoreMatrix(ids=ids, scores=scores, languages=langs)


def central_diff(fun, x, h=1e-6):
    g = np.empty_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (fun(x + e)[0] - fun(x - e)[0]) / (2 * h)
    return g


_RNG = np.random.default_rng(0)


class TestFuseScores:
    s1, s2, s3, s4 = [system(_RNG.normal(size=(6, 3))) for _ in range(4)]

    def test_identity(self):
        out = fuse_scores(FusionModel([1.0], [0, 0, 0], LANGS), [self.s1])
        assert out.scores.tobytes() == self.s1.scores.tobytes()

    def test_selection(self):
        out = fuse_scores(FusionModel([1.0, 0, 0, 0], [0, 0, 0], LANGS), [self.s1, self.s2, self.s3, self.s4])
        np.testing.assert_array_equal(out.scores, self.s1.scores)

    def test_convex_combination_of_identical_systems(self):
        out = fuse_scores(FusionModel([0.5, 0.5], [0, 0, 0], LANGS), [self.s1, self.s1])
        np.testing.assert_array_equal(out.scores, self.s1.scores)

    def test_rows_follow_ids_of_first_system(self):
        shuffled = self.s2.reorder(list(reversed(self.s2.ids)))
        a = fuse_scores(FusionModel([1.0, 2.0], [0.1, 0, -0.1], LANGS), [self.s1, self.s2])
        b = fuse_scores(FusionModel([1.0, 2.0], [0.1, 0, -0.1], LANGS), [self.s1, shuffled])
        np.testing.assert_array_equal(a.scores, b.scores)

    @settings(max_examples=40, deadline=None)
    @given(st.floats(-5, 5), st.integers(0, 2**32 - 1))
    def test_linear_in_inputs(self, scale, seed):
        rng = np.random.default_rng(seed)
        alphas, betas = rng.normal(size=2), rng.normal(size=3)
        scaled = [system(self.s1.scores * scale), system(self.s2.scores * scale)]
        lhs = fuse_scores(FusionModel(alphas, betas, LANGS), scaled).scores
        rhs = fuse_scores(FusionModel(alphas * scale, betas, LANGS), [self.s1, self.s2]).scores
        np.testing.assert_allclose(lhs, rhs, rtol=1e-12, atol=1e-12)

    def test_mismatch_names_system(self):
        other_ids = system(self.s1.scores, ids=[f"x{i}" for i in range(6)])
        with pytest.raises(LidError, match="system 1 ids"):
            fuse_scores(FusionModel([1.0, 1.0], [0, 0, 0], LANGS), [self.s1, other_ids])
        swapped = system(self.s1.scores, langs=LanguageList(["b", "a", "c"]))
        with pytest.raises(LidError, match="system 2 language"):
            fuse_scores(FusionModel([1.0, 1.0, 1.0], [0, 0, 0], LANGS), [self.s1, self.s2, swapped])
        with pytest.raises(LidError, match="expects 2 systems"):
            fuse_scores(FusionModel([1.0, 1.0], [0, 0, 0], LANGS), [self.s1])


class TestObjective:
    def test_value_matches_oracle(self):
        systems, labels = miscalibrated_scores(3, n_systems=2)
        stack = np.stack([s.scores for s in systems])
        y = labels.true_lang
        params = np.array([0.3, -0.1, 0.2, 0.0, 0.5, -0.4, 0.1])
        value, _ = cllr_objective(params, stack, y)
        fused = 0.3 * stack[0] - 0.1 * stack[1] + params[2:]
        assert value == pytest.approx(cllr_oracle(fused, y), abs=1e-12)

    @pytest.mark.parametrize("seed", range(10))
    def test_gradient_matches_central_differences(self, seed):
        systems, labels = miscalibrated_scores(seed, n_systems=3, n=60)
        stack = np.stack([s.scores for s in systems]) * 0.1
        rng = np.random.default_rng(seed)
        params = np.concatenate([rng.uniform(0.2, 1.0, 3), rng.normal(size=5)])
        fun = lambda p: cllr_objective(p, stack, labels.true_lang)  # noqa: E731
        g = fun(params)[1]
        num = central_diff(fun, params)
        rel = np.abs(g - num).max() / max(np.abs(g).max(), np.abs(num).max())
        assert rel < 1e-6

    def test_all_zero_scores(self):
        stack = np.zeros((2, 10, 2))
        y = np.arange(10) % 2
        value, g = cllr_objective(np.array([0.7, -3.0, 0.0, 0.0]), stack, y)
        assert value == pytest.approx(1.0, abs=1e-15)
        np.testing.assert_array_equal(g[:2], [0.0, 0.0])

    def test_beta_gradient_zero_on_mirrored_instance(self):
        # every trial (a, 0) of class 0 has a mirror (0, a) of class 1
        a = np.array([2.0, -1.0, 0.5, 3.0])
        s = np.concatenate([np.column_stack([a, 0 * a]), np.column_stack([0 * a, a])])
        y = np.repeat([0, 1], 4)
        _, g = cllr_objective(np.array([1.3, 0.0, 0.0]), s[None], y)
        np.testing.assert_allclose(g[1:], 0.0, atol=1e-16)

    def test_missing_language(self):
        with pytest.raises(LidError, match="no dev trials"):
            cllr_objective(np.array([1.0, 0, 0, 0]), np.zeros((1, 4, 3)), np.array([0, 1, 0, 1]))


class TestTraining:
    def test_overconfident_system_is_shrunk(self):
        rng = np.random.default_rng(11)
        n, k = 400, 3
        y = np.arange(n) % k
        s = rng.normal(size=(n, k))
        s[np.arange(n), y] += 1.5
        noisy = np.where(rng.random(n) < 0.2, rng.integers(0, k, n), y)
        sm = system(s * 10)
        labels = TrialLabels(ids=sm.ids, true_lang=noisy)
        res = calibrate_system(sm, labels)
        assert res.model.alphas[0] < 1.0
        assert res.cllr_after < res.cllr_before
        assert res.cllr_after == pytest.approx(cllr(fuse_scores(res.model, [sm]), labels), abs=1e-12)

    def test_noise_system_gets_small_weight(self):
        rng = np.random.default_rng(12)
        n, k = 500, 3
        y = np.arange(n) % k
        good = rng.normal(size=(n, k))
        good[np.arange(n), y] += 2.0
        noise = rng.normal(size=(n, k)) * 2.0
        labels = TrialLabels(ids=[f"t{i}" for i in range(n)], true_lang=y)
        res = train_fusion([system(good), system(noise)], labels)
        a1, a2 = res.model.alphas
        assert abs(a2) <= a1
        assert res.optimizer.converged

    def test_calibrating_a_calibrated_system_does_not_hurt(self):
        systems, labels = miscalibrated_scores(5)
        first = calibrate_system(systems[0], labels).model
        calibrated = fuse_scores(first, systems)
        again = calibrate_system(calibrated, labels)
        assert again.cllr_after <= again.cllr_before + 1e-12

    @pytest.mark.parametrize("seed", range(5))
    def test_never_worse_than_initialization(self, seed):
        systems, labels = miscalibrated_scores(seed, n_systems=3)
        res = train_fusion(systems, labels)
        assert res.cllr_after <= res.cllr_before

    def test_four_system_fusion_report(self):
        systems, labels = miscalibrated_scores(21, n_systems=4, k=13, n=650)
        res = train_fusion(systems, labels, OptimizerConfig(max_iter=500))
        report = evaluate(fuse_scores(res.model, systems), labels)
        assert isinstance(report, MetricReport)
        assert 0.0 <= report.c_avg <= 1.0 and 0.0 <= report.eer_percent <= 100.0
        singles = [evaluate(fuse_scores(calibrate_system(s, labels).model, [s]), labels).cllr_bits for s in systems]
        assert report.cllr_bits <= min(singles) + 1e-9

    def test_uncovered_language(self):
        sm = system(np.zeros((4, 3)))
        with pytest.raises(LidError, match="'c'"):
            train_fusion([sm], TrialLabels(ids=sm.ids, true_lang=[0, 1, 0, 1]))
