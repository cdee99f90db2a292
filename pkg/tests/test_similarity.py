import itertools

import numpy as np
import pytest

from semreg.core import DisplacementField, Image, LabelMap, Rng
from semreg.models import UNet, extract_features
from semreg.similarity import (MetricKind, deepsim, dice_soft,
                               diffusion_regularizer, mse, parse_metric,
                               patch_ncc, registration_loss)


def rand_image(seed, h=8, w=8):
    return Image(Rng(seed).normal(h * w).reshape(h, w))


def naive_patch_ncc(a, b, window, eps=1e-8):
    """Per-window loop oracle with edge-clamped indices."""
    h, w = a.shape
    r = window // 2
    total = 0.0
    for y in range(h):
        for x in range(w):
            wa, wb = [], []
            for dy in range(-r, r + 1):
                for dx in range(-r, r + 1):
                    yy = min(max(y + dy, 0), h - 1)
                    xx = min(max(x + dx, 0), w - 1)
                    wa.append(a[yy, xx])
                    wb.append(b[yy, xx])
            wa = np.array(wa) - np.mean(wa)
            wb = np.array(wb) - np.mean(wb)
            num = float(np.sum(wa * wb))
            total += num * num / (np.sum(wa ** 2) * np.sum(wb ** 2) + eps)
    return total / (h * w)


class TestMse:
    def test_identical(self):
        a = rand_image(0)
        assert mse(a, a) == 0.0

    def test_arithmetic(self):
        a = Image(np.array([[0.0, 2.0]]))
        b = Image(np.array([[1.0, 0.0]]))
        assert mse(a, b) == pytest.approx(2.5)

    def test_symmetry(self):
        a, b = rand_image(1), rand_image(2)
        assert mse(a, b) == mse(b, a)

    def test_grid_mismatch(self):
        with pytest.raises(ValueError):
            mse(rand_image(0, 4, 4), rand_image(0, 5, 5))


class TestPatchNcc:
    def test_self_similarity(self):
        a = rand_image(3)
        assert patch_ncc(a, a, 5) == pytest.approx(1.0, abs=1e-6)

    def test_sign_blind(self):
        a = rand_image(4)
        b = Image(-a.data)
        assert patch_ncc(a, b, 5) == pytest.approx(1.0, abs=1e-6)

    def test_affine_invariance(self):
        a = rand_image(5)
        b = Image(2.0 * a.data + 3.0)
        assert patch_ncc(a, b, 5) == pytest.approx(1.0, abs=1e-6)

    def test_matches_naive_oracle(self):
        a = rand_image(6, 7, 7)
        b = rand_image(7, 7, 7)
        for window in (3, 5):
            got = patch_ncc(a, b, window)
            want = naive_patch_ncc(a.plane(0), b.plane(0), window)
            assert got == pytest.approx(want, abs=1e-10)

    def test_single_window_equals_squared_cosine(self):
        # the classic metric is the squared cosine of two zero-meaned
        # window vectors; check per-window on random windows
        rng = Rng(8)
        for _ in range(100):
            wa = rng.normal(25)
            wb = rng.normal(25)
            za, zb = wa - wa.mean(), wb - wb.mean()
            cos = np.dot(za, zb) / (np.linalg.norm(za) * np.linalg.norm(zb))
            num = float(np.sum(za * zb))
            s = num * num / (np.sum(za ** 2) * np.sum(zb ** 2) + 1e-8)
            assert s == pytest.approx(cos ** 2, abs=1e-10)


class TestDeepsim:
    def pyramids(self, seed):
        net = UNet(1, 2, Rng(seed))
        img_a = Image(np.abs(Rng(seed + 1).normal(256)).reshape(16, 16))
        img_b = Image(np.abs(Rng(seed + 2).normal(256)).reshape(16, 16))
        return extract_features(net, img_a), extract_features(net, img_b)

    def test_self_similarity_is_one(self):
        pyr, _ = self.pyramids(10)
        assert all(np.linalg.norm(lv, axis=0).min() > 1e-6 for lv in pyr.levels)
        assert deepsim(pyr, pyr) == pytest.approx(1.0, abs=1e-6)

    def test_orthogonal_support_is_zero(self):
        from semreg.models import FeaturePyramid

        shapes = [(16, 8, 8), (32, 4, 4), (64, 2, 2)]
        lv_a, lv_b = [], []
        for c, h, w in shapes:
            a = np.zeros((c, h, w))
            b = np.zeros((c, h, w))
            a[: c // 2] = 1.0  # disjoint nonzero channels
            b[c // 2:] = 1.0
            lv_a.append(a)
            lv_b.append(b)
        assert deepsim(FeaturePyramid(tuple(lv_a)),
                       FeaturePyramid(tuple(lv_b))) == pytest.approx(0.0, abs=1e-9)

    def test_matches_scalar_loop_oracle(self):
        pyr_a, pyr_b = self.pyramids(11)
        total = 0.0
        for fa, fb in zip(pyr_a.levels, pyr_b.levels):
            c, h, w = fa.shape
            acc = 0.0
            for y in range(h):
                for x in range(w):
                    va, vb = fa[:, y, x], fb[:, y, x]
                    acc += np.dot(va, vb) / (np.linalg.norm(va) * np.linalg.norm(vb) + 1e-8)
            total += acc / (h * w) / 3
        assert deepsim(pyr_a, pyr_b) == pytest.approx(total, abs=1e-10)

    def test_per_location_scale_invariance(self):
        from semreg.models import FeaturePyramid

        pyr_a, pyr_b = self.pyramids(12)
        scaled = []
        rng = Rng(13)
        for lv in pyr_b.levels:
            scale = 0.5 + rng.uniform(lv.shape[1] * lv.shape[2]).reshape(lv.shape[1:])
            scaled.append(lv * scale[None, :, :])
        a = deepsim(pyr_a, pyr_b)
        b = deepsim(pyr_a, FeaturePyramid(tuple(scaled)))
        assert a == pytest.approx(b, abs=1e-6)


class TestDiffusionRegularizer:
    def test_constant_field_zero(self):
        u = np.full((5, 5, 2), 3.7)
        assert diffusion_regularizer(DisplacementField(u)) == 0.0

    def test_linear_field_closed_form(self):
        n = 6
        yy, xx = np.meshgrid(np.arange(n, dtype=float), np.arange(n, dtype=float),
                             indexing="ij")
        u = np.stack([np.zeros_like(xx), xx], axis=2)  # u = (x-component ramp)
        # du_x/dx = 1 on the n x (n-1) forward-difference grid
        expected = n * (n - 1) / (n * n)
        assert diffusion_regularizer(DisplacementField(u)) == pytest.approx(expected)

    def test_matches_naive_loop(self):
        u = Rng(14).normal(72).reshape(6, 6, 2)
        total = 0.0
        for c in range(2):
            for y in range(6):
                for x in range(6):
                    if y < 5:
                        total += (u[y + 1, x, c] - u[y, x, c]) ** 2
                    if x < 5:
                        total += (u[y, x + 1, c] - u[y, x, c]) ** 2
        assert diffusion_regularizer(DisplacementField(u)) == pytest.approx(
            total / 36, abs=1e-12)


class TestDiceSoft:
    def test_identical_onehots(self):
        lab = LabelMap(np.arange(16).reshape(4, 4) % 3, 3)
        oh = lab.onehot()
        assert dice_soft(oh, oh) == pytest.approx(1.0, abs=1e-6)

    def test_disjoint_masks(self):
        a = LabelMap(np.array([[1, 1], [0, 0]]), 2).onehot()
        b = LabelMap(np.array([[0, 0], [1, 1]]), 2).onehot()
        # per-class dice is ~0 for both classes
        assert dice_soft(a, b) == pytest.approx(0.0, abs=1e-5)

    def test_half_overlap(self):
        a = np.zeros((2, 2, 2))
        b = np.zeros((2, 2, 2))
        a[..., 1] = [[1, 1], [0, 0]]
        b[..., 1] = [[0, 1], [1, 0]]
        a[..., 0] = 1 - a[..., 1]
        b[..., 0] = 1 - b[..., 1]
        got = dice_soft(Image(a), Image(b))
        # both classes overlap at half their area
        assert got == pytest.approx(0.5, abs=1e-5)


class TestMetricKind:
    def test_parse_grammar(self):
        assert parse_metric("mse").kind == "mse"
        m = parse_metric("ncc:7")
        assert (m.kind, m.window) == ("ncc", 7)
        m = parse_metric("nccsup:5:0.5")
        assert (m.kind, m.window, m.dice_weight) == ("nccsup", 5, 0.5)
        m = parse_metric("randsim:3")
        assert m.kind == "randsim" and m.extractor is not None

    def test_invalid_window(self):
        with pytest.raises(ValueError):
            MetricKind("ncc", window=4)

    def test_feature_metric_needs_extractor(self):
        with pytest.raises(ValueError):
            MetricKind("deepsim")


def all_metrics():
    ext = UNet(1, 2, Rng(21))
    ext.frozen = True
    rand_ext = UNet(1, 2, Rng(22))
    rand_ext.frozen = True
    return [
        MetricKind("mse"),
        MetricKind("ncc", window=5),
        MetricKind("nccsup", window=5, dice_weight=1.0),
        MetricKind("deepsim", extractor=ext),
        MetricKind("randsim", extractor=rand_ext),
    ]


class TestRegistrationLoss:
    def labels(self):
        data = (np.arange(64).reshape(8, 8) // 16) % 3
        return LabelMap(data, 3), LabelMap(np.roll(data, 1, axis=1), 3)

    def test_perfect_alignment_small_data_term(self):
        img = Image(np.abs(Rng(23).normal(64)).reshape(8, 8))
        lab, _ = self.labels()
        zero = DisplacementField.zeros(8, 8)
        for metric in all_metrics():
            terms = registration_loss(metric, img, img, zero, 0.5, lab, lab)
            assert -1e-6 <= terms.data <= 1e-6, metric.kind
            assert terms.reg == 0.0
            if metric.kind == "mse":
                assert terms.data == 0.0

    def test_lambda_zero_total_equals_data(self):
        a, b = rand_image(24), rand_image(25)
        u = 0.5 * Rng(26).normal(128).reshape(8, 8, 2)
        terms = registration_loss(MetricKind("mse"), a, b, DisplacementField(u), 0.0)
        assert terms.total == terms.data

    def test_total_is_exact_sum(self):
        a, b = rand_image(27), rand_image(28)
        u = 0.5 * Rng(29).normal(128).reshape(8, 8, 2)
        terms = registration_loss(MetricKind("mse"), a, b, DisplacementField(u), 0.37)
        assert terms.total == terms.data + 0.37 * terms.reg

    def test_missing_labels_rejected(self):
        a, b = rand_image(30), rand_image(31)
        with pytest.raises(ValueError):
            registration_loss(MetricKind("nccsup"), a, b,
                              DisplacementField.zeros(8, 8), 0.1)

    @pytest.mark.parametrize("metric", all_metrics(), ids=lambda m: m.kind)
    def test_field_gradient_matches_finite_differences(self, metric):
        rng = Rng(32)
        a = Image(np.abs(rng.normal(64)).reshape(8, 8))
        b = Image(np.abs(rng.normal(64)).reshape(8, 8))
        lab_m, lab_f = self.labels()
        u = 0.3 * rng.normal(128).reshape(8, 8, 2) + 0.41  # off integer kinks
        lam = 0.2
        _, grad = registration_loss(metric, a, b, DisplacementField(u), lam,
                                    lab_m, lab_f, want_grad=True)
        h = 1e-5
        worst = 0.0
        for i, j, c in itertools.product(range(0, 8, 2), range(0, 8, 2), range(2)):
            up, um = u.copy(), u.copy()
            up[i, j, c] += h
            um[i, j, c] -= h
            tp = registration_loss(metric, a, b, DisplacementField(up), lam,
                                   lab_m, lab_f).total
            tm = registration_loss(metric, a, b, DisplacementField(um), lam,
                                   lab_m, lab_f).total
            num = (tp - tm) / (2 * h)
            worst = max(worst, abs(num - grad[i, j, c]) / max(abs(num), 1e-6))
        assert worst < 1e-4, f"{metric.kind}: {worst}"
