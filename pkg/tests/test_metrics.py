import json
import math

import numpy as np
import pytest
from scipy import stats

from nvsqa import metrics
from nvsqa.metrics import EvalReport, evaluate, outlier_ratio, plcc, psnr, rmse, srcc


class TestRmse:
    def test_identical_vectors(self):
        assert rmse([1.0, 2.0, 3.0], [1.0, 2.0, 3.0]) == 0.0

    def test_direct_substitution(self):
        assert rmse([0.0, 0.0], [3.0, 4.0]) == pytest.approx(math.sqrt(12.5))

    def test_paired_permutation_invariance(self):
        rng = np.random.default_rng(0)
        p = rng.normal(size=20)
        t = rng.normal(size=20)
        base = rmse(p, t)
        perm = rng.permutation(20)
        assert rmse(p[perm], t[perm]) == pytest.approx(base, abs=1e-15)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            rmse([1.0], [1.0, 2.0])


class TestSrcc:
    def test_strictly_increasing_pair(self):
        assert srcc([1, 2, 3, 4], [10, 20, 30, 40]) == pytest.approx(1.0)

    def test_reversed(self):
        assert srcc([1, 2, 3, 4], [4, 3, 2, 1]) == pytest.approx(-1.0)

    def test_ties_with_brute_force_rank_oracle(self):
        pred = [1.0, 2.0, 2.0, 3.0]
        truth = [1.0, 3.0, 2.0, 4.0]
        # oracle: assign average ranks by hand, then Pearson on the ranks
        # pred ranks: [1, 2.5, 2.5, 4]; truth ranks: [1, 3, 2, 4]
        expected = 3.0 / math.sqrt(10.0)  # = 0.9486832980505138
        assert srcc(pred, truth) == pytest.approx(expected, abs=1e-12)

    def test_matches_scipy_on_random_data(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            p = rng.integers(0, 5, size=15).astype(float)  # plenty of ties
            t = rng.normal(size=15)
            if np.all(p == p[0]):
                continue
            np.testing.assert_allclose(srcc(p, t), stats.spearmanr(p, t).statistic, atol=1e-12)

    def test_monotone_transform_invariance(self):
        rng = np.random.default_rng(2)
        p = rng.normal(size=25)
        t = rng.normal(size=25)
        base = srcc(p, t)
        assert srcc(np.exp(p), t) == pytest.approx(base, abs=1e-12)
        assert srcc(p, 3 * t**3 + t) == pytest.approx(base, abs=1e-12)

    def test_constant_input_rejected(self):
        with pytest.raises(ValueError):
            srcc([1.0, 1.0, 1.0], [1.0, 2.0, 3.0])


class TestPlcc:
    def test_affine_relation(self):
        x = np.arange(10, dtype=float)
        assert plcc(x, 2 * x + 1) == pytest.approx(1.0)

    def test_negation(self):
        x = np.arange(10, dtype=float)
        assert plcc(x, -x) == pytest.approx(-1.0)

    def test_random_pair_vs_covariance_formula_oracle(self):
        rng = np.random.default_rng(3)
        p = rng.normal(size=10)
        t = rng.normal(size=10)
        cov = np.mean((p - p.mean()) * (t - t.mean()))
        expected = cov / (p.std() * t.std())
        assert plcc(p, t) == pytest.approx(expected, abs=1e-12)

    def test_affine_invariance_and_sign_flip(self):
        rng = np.random.default_rng(4)
        p = rng.normal(size=30)
        t = rng.normal(size=30)
        base = plcc(p, t)
        assert plcc(5.0 * p + 3.0, t) == pytest.approx(base, abs=1e-12)
        assert plcc(p, -2.0 * t + 1.0) == pytest.approx(-base, abs=1e-12)

    def test_constant_input_rejected(self):
        with pytest.raises(ValueError):
            plcc([2.0, 2.0], [1.0, 3.0])


class TestOutlierRatio:
    def test_all_residuals_equal(self):
        assert outlier_ratio([1.0, 2.0, 3.0, 4.0], [0.0, 1.0, 2.0, 3.0]) == 0.0

    def test_single_outlier_with_quartile_oracle(self):
        truth = np.zeros(8)
        pred = np.array([0.0] * 7 + [100.0])
        # type-7 quartiles of the residuals are both 0, fences are [0, 0],
        # and only the 100 exceeds them strictly
        assert outlier_ratio(pred, truth) == pytest.approx(1.0 / 8.0)

    def test_scale_invariance(self):
        rng = np.random.default_rng(5)
        residuals = rng.normal(size=40)
        base = outlier_ratio(residuals, np.zeros(40))
        for c in (0.1, 3.0, 250.0):
            assert outlier_ratio(c * residuals, np.zeros(40)) == base

    def test_shift_invariance(self):
        rng = np.random.default_rng(6)
        residuals = rng.normal(size=40)
        base = outlier_ratio(residuals, np.zeros(40))
        assert outlier_ratio(residuals + 7.5, np.zeros(40)) == base

    def test_too_few_samples(self):
        with pytest.raises(ValueError):
            outlier_ratio([1.0, 2.0, 3.0], [0.0, 0.0, 0.0])

    def test_quartiles_match_numpy_type7(self):
        rng = np.random.default_rng(7)
        x = rng.normal(size=31)
        lo, hi = metrics.tukey_fences(x)
        q1, q3 = np.percentile(x, [25, 75])  # numpy default is type-7
        assert lo == pytest.approx(q1 - 1.5 * (q3 - q1), abs=1e-12)
        assert hi == pytest.approx(q3 + 1.5 * (q3 - q1), abs=1e-12)


class TestPsnr:
    def test_identical_images_is_infinite(self):
        img = np.random.default_rng(8).random((8, 8, 3))
        assert psnr(img, img) == math.inf

    def test_direct_substitution(self):
        a = np.zeros(100)
        b = np.full(100, 0.1)  # MSE = 0.01
        assert psnr(a, b, peak=1.0) == pytest.approx(20.0)

    def test_random_pair_vs_formula_oracle(self):
        rng = np.random.default_rng(9)
        a = rng.random((16, 16))
        b = rng.random((16, 16))
        expected = 10 * math.log10(1.0 / np.mean((a - b) ** 2))
        assert psnr(a, b) == pytest.approx(expected, abs=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            psnr(np.zeros((2, 2)), np.zeros((3, 3)))


class TestEvalReport:
    def test_evaluate_bundles_all_measures(self):
        rng = np.random.default_rng(10)
        t = rng.normal(size=30)
        p = t + rng.normal(size=30) * 0.1
        report = evaluate(p, t)
        assert report.n == 30
        assert report.rmse == pytest.approx(rmse(p, t))
        assert report.srcc == pytest.approx(srcc(p, t))

    def test_json_round_trip(self):
        report = EvalReport(rmse=0.5, srcc=0.9, plcc=0.8, outlier_ratio=0.0, n=10)
        data = json.loads(report.to_json())
        assert data["rmse"] == 0.5 and data["n"] == 10

    def test_table_is_aligned(self):
        report = EvalReport(rmse=0.5, srcc=0.9, plcc=0.8, outlier_ratio=0.0, n=10)
        lines = report.to_table().splitlines()
        assert len(lines) == 5
        assert len({len(l) for l in lines}) == 1

    def test_invalid_ranges_rejected(self):
        with pytest.raises(ValueError):
            EvalReport(rmse=-1.0, srcc=0.0, plcc=0.0, outlier_ratio=0.0, n=10)
        with pytest.raises(ValueError):
            EvalReport(rmse=1.0, srcc=2.0, plcc=0.0, outlier_ratio=0.0, n=10)
