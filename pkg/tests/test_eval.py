import itertools
import math

import numpy as np
import pytest

from semreg.core import DisplacementField, LabelMap, Rng
from semreg.evaluation import (cohens_d, dice, evaluate_pairs, evaluate_run,
                               mean_dice, render_grid, significance_stars,
                               smoothness_stats, wilcoxon_signed_rank)
from semreg.synth import SceneSpec, WarpSpec, make_pair


def exact_wilcoxon_p(x, y):
    """Brute-force one-sided p by enumerating all 2^n sign assignments."""
    d = np.asarray(x, dtype=float) - np.asarray(y, dtype=float)
    d = d[d != 0.0]
    n = len(d)
    a = np.abs(d)
    # average ranks
    order = np.argsort(a)
    ranks = np.empty(n)
    sa = a[order]
    i = 0
    while i < n:
        j = i
        while j + 1 < n and sa[j + 1] == sa[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    w_obs = ranks[d > 0].sum()
    count = 0
    for signs in itertools.product([0, 1], repeat=n):
        w = sum(r for s, r in zip(signs, ranks) if s)
        if w >= w_obs - 1e-12:
            count += 1
    return count / 2 ** n


class TestDice:
    def labels(self, arr, k=3):
        return LabelMap(np.asarray(arr), k)

    def test_identical(self):
        a = self.labels([[0, 1], [2, 1]])
        assert dice(a, a, 1) == 1.0

    def test_disjoint(self):
        a = self.labels([[1, 1], [0, 0]])
        b = self.labels([[0, 0], [1, 1]])
        assert dice(a, b, 1) == 0.0

    def test_hand_computed_overlap(self):
        a = self.labels([[1, 1, 1, 0]])
        b = self.labels([[0, 1, 1, 1]])
        # |A|=3, |B|=3, overlap 2 -> 2*2/6
        assert dice(a, b, 1) == pytest.approx(2 / 3)

    def test_both_empty_is_one(self):
        a = self.labels([[0, 0]])
        assert dice(a, a, 2) == 1.0

    def test_one_empty_is_zero(self):
        a = self.labels([[2, 0]])
        b = self.labels([[0, 0]])
        assert dice(a, b, 2) == 0.0

    def test_mean_dice_over_foreground(self):
        a = self.labels([[1, 2], [0, 0]])
        b = self.labels([[1, 0], [0, 2]])
        # class 1: dice 1, class 2: dice 0
        assert mean_dice(a, b) == pytest.approx(0.5)

    def test_mean_dice_grid_mismatch(self):
        with pytest.raises(ValueError):
            dice(self.labels([[0]]), self.labels([[0, 0]]), 1)


class TestWilcoxon:
    def test_all_positive_n5_exact(self):
        # all five differences positive: p = 1/32
        res = wilcoxon_signed_rank([2, 3, 4, 5, 6], [1, 1, 1, 1, 1])
        assert res.p_value == pytest.approx(1 / 32, abs=1e-12)
        assert res.n == 5 and not res.all_zero

    def test_matches_enumeration_oracle(self):
        rng = Rng(0)
        for trial in range(5):
            n = 6 + trial
            x = rng.normal(n)
            y = rng.normal(n)
            got = wilcoxon_signed_rank(x, y).p_value
            want = exact_wilcoxon_p(x, y)
            assert got == pytest.approx(want, abs=1e-12), trial

    def test_ties_match_enumeration(self):
        x = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]
        y = [0.0, 1.0, 1.0, 5.0, 4.0, 4.0]  # |d| has ties
        got = wilcoxon_signed_rank(x, y).p_value
        assert got == pytest.approx(exact_wilcoxon_p(x, y), abs=1e-12)

    def test_zero_differences_dropped(self):
        res = wilcoxon_signed_rank([1, 1, 5, 6], [1, 1, 2, 3])
        assert res.n == 2

    def test_all_zero_differences(self):
        res = wilcoxon_signed_rank([1, 2], [1, 2])
        assert res.all_zero and res.p_value == 1.0

    def test_direction_flip(self):
        x, y = [5, 6, 7, 8, 9], [1, 2, 3, 4, 5]
        g = wilcoxon_signed_rank(x, y, "greater").p_value
        l = wilcoxon_signed_rank(y, x, "less").p_value
        assert g == l

    def test_normal_approximation_close_to_exact_at_boundary(self):
        # n=21 uses the approximation; compare against enumeration-free
        # exact polynomial logic by dropping one sample to n=20
        rng = Rng(3)
        x = rng.normal(21) + 0.5
        y = rng.normal(21)
        approx = wilcoxon_signed_rank(x, y).p_value
        exact20 = wilcoxon_signed_rank(x[:20], y[:20]).p_value
        assert abs(approx - exact20) < 0.05

    def test_bad_inputs(self):
        with pytest.raises(ValueError):
            wilcoxon_signed_rank([1, 2], [1])
        with pytest.raises(ValueError):
            wilcoxon_signed_rank([1], [2], direction="sideways")


class TestCohensD:
    def test_hand_value(self):
        # means 3 and 2, both variances 2 -> d = 1/sqrt(2)
        assert cohens_d([2, 4], [1, 3]) == pytest.approx(1 / math.sqrt(2))

    def test_scale_invariance(self):
        x = Rng(1).normal(10)
        y = Rng(2).normal(10) + 0.3
        a = cohens_d(x, y)
        b = cohens_d(3.0 * x, 3.0 * y)
        assert a == pytest.approx(b, abs=1e-12)

    def test_antisymmetry(self):
        x = Rng(3).normal(8)
        y = Rng(4).normal(8)
        assert cohens_d(x, y) == pytest.approx(-cohens_d(y, x), abs=1e-12)

    def test_zero_variance_rejected(self):
        with pytest.raises(ValueError):
            cohens_d([1.0, 1.0], [1.0, 1.0])


class TestStars:
    def test_thresholds(self):
        assert significance_stars(0.0005) == "***"
        assert significance_stars(0.005) == "**"
        assert significance_stars(0.05) == "*"
        assert significance_stars(0.2) == ""


class TestSmoothnessStats:
    def test_zero_field(self):
        grad_sq, folding = smoothness_stats(DisplacementField.zeros(8, 8))
        assert grad_sq == 0.0 and folding == 0.0

    def test_folded_column_detected(self):
        u = np.zeros((4, 4, 2))
        u[:, 1, 1] = -2.0
        _, folding = smoothness_stats(DisplacementField(u))
        assert folding > 0.0


class TestRenderGrid:
    def test_identity_field_keeps_lines(self):
        img = render_grid(DisplacementField.zeros(16, 16), spacing=4)
        plane = img.plane(0)
        assert np.all(plane[::4, :] == 1.0)
        assert np.all(plane[1:4, 1:4] == 0.0)

    def test_small_spacing_rejected(self):
        with pytest.raises(ValueError):
            render_grid(DisplacementField.zeros(8, 8), spacing=1)

    def test_shift_moves_lines(self):
        u = np.zeros((16, 16, 2))
        u[:, :, 1] = 1.0
        img = render_grid(DisplacementField(u), spacing=4)
        # sampling one pixel to the right turns column 3 into a line
        assert np.all(img.plane(0)[1:4, 3] == 1.0)


class TestEvaluateRun:
    def pairs(self, n=4):
        spec = SceneSpec(height=32, width=32, num_blobs=3, radius_min=3,
                         radius_max=6, seed=0)
        return [make_pair(spec, WarpSpec(amplitude=2.0, smoothness_sigma=8.0,
                                         seed=0), i) for i in range(n)]

    def test_truth_field_scores_near_perfect_dice(self):
        pairs = self.pairs(2)
        results = evaluate_pairs(pairs, [p[4] for p in pairs])
        for r in results:
            assert r.dice_post > 0.95
            assert r.dice_post >= r.dice_pre
        assert any(r.dice_pre < 1.0 for r in results)

    def test_count_mismatch(self):
        pairs = self.pairs(2)
        with pytest.raises(ValueError):
            evaluate_pairs(pairs, [pairs[0][4]])

    def test_rows_are_baselines_only(self):
        pairs = self.pairs(3)
        zero = [DisplacementField.zeros(32, 32) for _ in pairs]
        truth = [p[4] for p in pairs]
        rows = evaluate_run(pairs, {"deepsim": truth, "mse": zero,
                                    "ncc": zero}, "deepsim")
        assert sorted(r["metric"] for r in rows) == ["mse", "ncc"]
        for row in rows:
            assert row["mean_dice_post"] <= 1.0
            assert 0.0 <= row["p_value"] <= 1.0

    def test_missing_reference_rejected(self):
        pairs = self.pairs(2)
        with pytest.raises(ValueError):
            evaluate_run(pairs, {"mse": [p[4] for p in pairs]}, "deepsim")

    def test_identical_runs_have_no_stars(self):
        pairs = self.pairs(2)
        truth = [p[4] for p in pairs]
        rows = evaluate_run(pairs, {"deepsim": truth, "mse": truth}, "deepsim")
        assert rows[0]["stars"] == ""
        assert rows[0]["p_value"] == 1.0
