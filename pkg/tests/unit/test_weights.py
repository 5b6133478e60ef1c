"""
Unit tests for Density Ratio Weights module
"""

import numpy as np
import pytest
from scipy.integrate import trapezoid
from scipy.stats import multivariate_normal

from hitcert.core.core import RngStream
from hitcert.core.errors import InputError
from hitcert.weights.weights import (
    AnalyticGaussianShift,
    KdeRatio,
    TabulatedWeights,
    UniformWeights,
    build_ratio,
    effective_sample_size,
    fit_kde,
    ood_filter,
    parse_weight_source,
    power_transform,
)

# lowest accepted correlation between estimated and exact log weights
LOG_RATIO_CORRELATION_FLOOR = 0.9


class TestAnalyticGaussianShift:
    """Test suite for the closed-form Gaussian ratio"""

    def test_known_value(self):
        wfn = AnalyticGaussianShift([1.0, 0.0])
        assert wfn.evaluate([[1.0, 0.0]])[0] == pytest.approx(np.exp(0.5))
        assert wfn.evaluate([[0.0, 3.0]])[0] == pytest.approx(np.exp(-0.5))

    def test_matches_density_ratio(self):
        mu = np.array([0.5, -0.25])
        x = RngStream(3).generator().normal(size=(10, 2))
        wfn = AnalyticGaussianShift(mu)
        expected = multivariate_normal(mu, np.eye(2)).pdf(x) / multivariate_normal(np.zeros(2), np.eye(2)).pdf(x)
        assert np.allclose(wfn.evaluate(x), expected)

    def test_zero_shift_is_uniform(self):
        x = RngStream(1).generator().normal(size=(6, 2))
        assert np.allclose(AnalyticGaussianShift([0.0, 0.0]).evaluate(x), 1.0)

    def test_dimension_mismatch(self):
        with pytest.raises(InputError):
            AnalyticGaussianShift([1.0, 0.0]).evaluate([[1.0, 2.0, 3.0]])


class TestPowerTransform:
    @pytest.fixture
    def base(self):
        return AnalyticGaussianShift([1.0, 0.0])

    def test_gamma_one_is_identity(self, base):
        x = RngStream(6).generator().normal(scale=3.0, size=(1000, 2))
        assert np.array_equal(power_transform(base, 1.0).evaluate(x), base.evaluate(x))

    def test_gamma_zero_is_uniform(self, base):
        assert power_transform(base, 0.0).evaluate([[5.0, 0.0]]).tolist() == [1.0]

    def test_square_root_of_four(self):
        base = TabulatedWeights([[0.0]], [4.0])
        assert power_transform(base, 0.5).evaluate([[0.0]])[0] == pytest.approx(2.0)

    def test_gamma_two_squares(self, base):
        x = [[0.7, 0.0]]
        assert power_transform(base, 2.0).evaluate(x)[0] == pytest.approx(base.evaluate(x)[0] ** 2)

    def test_extreme_values_stay_finite(self, base):
        w = power_transform(base, 50.0).evaluate([[40.0, 0.0], [-40.0, 0.0]])
        assert np.all(np.isfinite(w)) and np.all(w > 0)


class TestTabulatedWeights:
    def test_lookup(self):
        wfn = TabulatedWeights([[0.0, 1.0], [2.0, 3.0]], [0.5, 2.0])
        assert wfn.evaluate([[2.0, 3.0], [0.0, 1.0]]).tolist() == [2.0, 0.5]

    def test_missing_row(self):
        wfn = TabulatedWeights([[0.0, 1.0]], [0.5])
        with pytest.raises(InputError, match="no tabulated weight"):
            wfn.evaluate([[1.0, 1.0]])

    @pytest.mark.parametrize("weights", [[0.0], [-1.0], [np.inf]])
    def test_rejects_non_positive(self, weights):
        with pytest.raises(InputError):
            TabulatedWeights([[0.0]], weights)

    def test_conflicting_duplicates(self):
        with pytest.raises(InputError, match="conflicting"):
            TabulatedWeights([[0.0], [0.0]], [1.0, 2.0])


class TestKde:
    """Test suite for KDE fitting and the ratio estimate"""

    @pytest.fixture
    def samples(self):
        gen = RngStream(11).generator()
        return gen.normal(size=(60, 2)), gen.normal(loc=[1.0, 0.0], size=(60, 2))

    def test_cv_scores_cover_grid(self, samples):
        fit = fit_kde(samples[0], (0.1, 1.0, 10.0), folds=5, rng=RngStream(0))
        assert set(fit.cv_scores) == {0.1, 1.0, 10.0}
        assert fit.bandwidth in (0.1, 1.0, 10.0)
        assert fit.describe()["support_size"] == 60

    def test_single_bandwidth_skips_search(self, samples):
        fit = fit_kde(samples[0], (0.5,))
        assert fit.bandwidth == 0.5
        assert fit.cv_scores == {}

    def test_kernel_at_its_center(self):
        fit = fit_kde([[0.0]], (1.0,))
        assert fit.density([[0.0]])[0] == pytest.approx(1.0 / np.sqrt(2.0 * np.pi), rel=1e-9)
        assert fit.density([[0.0]])[0] == pytest.approx(0.398942, abs=1e-6)

    def test_two_point_kernel_sum(self):
        fit = fit_kde([[-1.0], [1.0]], (1.0,))
        expected = np.exp(-0.5) / np.sqrt(2.0 * np.pi)
        assert fit.density([[0.0]])[0] == pytest.approx(expected, rel=1e-9)
        assert fit.density([[0.0]])[0] == pytest.approx(0.241971, abs=1e-6)

    def test_selected_bandwidth_maximizes_cv_score(self):
        x = RngStream(21).generator().standard_normal((500, 1))
        fit = fit_kde(x, (0.1, 1.0, 10.0), folds=5, rng=RngStream(0))

        assert fit.bandwidth in (0.1, 1.0, 10.0)
        assert all(fit.cv_scores[fit.bandwidth] >= s for s in fit.cv_scores.values())

    @pytest.mark.parametrize("standardize", [False, True])
    def test_density_integrates_to_one(self, standardize):
        x = RngStream(8).generator().normal(loc=1.0, scale=2.0, size=(200, 1))
        sigma = float(x.std())
        if standardize:
            fit = fit_kde(x, (0.5,), center=x.mean(axis=0), scale=x.std(axis=0))
        else:
            fit = fit_kde(x, (0.5,))

        grid = np.linspace(float(x.mean()) - 10 * sigma, float(x.mean()) + 10 * sigma, 20001)
        total = trapezoid(fit.density(grid.reshape(-1, 1)), grid)
        assert abs(total - 1.0) < 1e-3

    def test_fit_is_reproducible(self, samples):
        a = fit_kde(samples[0], rng=RngStream(4))
        b = fit_kde(samples[0], rng=RngStream(4))
        assert a.bandwidth == b.bandwidth
        assert a.cv_scores == b.cv_scores

    def test_too_few_points_for_folds(self):
        with pytest.raises(InputError, match="folds"):
            fit_kde([[0.0], [1.0]], folds=5)

    def test_ratio_favours_shift_direction(self, samples):
        cal, gen = samples
        ratio = build_ratio(cal, gen, bandwidth_grid=(1.0,), rng=RngStream(2))
        assert isinstance(ratio, KdeRatio)
        w = ratio.evaluate([[1.5, 0.0], [-1.5, 0.0]])
        assert w[0] > w[1]
        assert ratio.describe()["bandwidth_p"] == 1.0

    def test_identical_samples_give_unit_ratio(self, samples):
        x = samples[0]
        ratio = build_ratio(x, x, bandwidth_grid=(1.0,), rng=RngStream(2))
        assert np.allclose(ratio.evaluate(x), 1.0, rtol=0.0, atol=1e-9)

    def test_tracks_analytic_log_ratio(self):
        gen = RngStream(13).generator()
        cal = gen.standard_normal((5000, 1))
        shifted = 1.0 + gen.standard_normal((5000, 1))
        ratio = build_ratio(cal, shifted, rng=RngStream(3))

        # both sides have density mass on this range
        grid = np.linspace(-1.5, 2.5, 200).reshape(-1, 1)
        estimated = ratio.log_evaluate(grid)
        exact = AnalyticGaussianShift([1.0]).log_evaluate(grid)
        assert np.corrcoef(estimated, exact)[0, 1] > LOG_RATIO_CORRELATION_FLOOR

    def test_empty_side_rejected(self, samples):
        with pytest.raises(InputError):
            build_ratio(samples[0], np.zeros((0, 2)))


class TestOodFilter:
    @pytest.fixture
    def density(self):
        x = RngStream(5).generator().normal(size=(50, 2))
        return fit_kde(x, (1.0,)), x

    def test_quantile_zero_keeps_everything(self, density):
        fit, ref = density
        cand = [[100.0, 100.0], [0.0, 0.0]]
        assert ood_filter(fit, ref, cand, quantile=0.0) == [0, 1]

    def test_drops_far_points_in_order(self, density):
        fit, ref = density
        cand = [[0.0, 0.0], [50.0, 50.0], [0.1, -0.1]]
        assert ood_filter(fit, ref, cand, quantile=0.05) == [0, 2]

    def test_median_keeps_upper_half(self):
        ref = RngStream(7).generator().standard_normal((100, 1))
        fit = fit_kde(ref, (0.5,))
        values = fit.density(ref)

        kept = ood_filter(fit, ref, ref, quantile=0.5)

        assert kept == np.flatnonzero(values >= np.quantile(values, 0.5)).tolist()
        assert len(kept) == 50

    def test_point_at_eight_sigma_dropped(self):
        ref = RngStream(9).generator().standard_normal((1000, 1))
        fit = fit_kde(ref, rng=RngStream(1))
        assert ood_filter(fit, ref, [[0.0], [8.0]], quantile=0.05) == [0]

    def test_empty_candidates(self, density):
        fit, ref = density
        assert ood_filter(fit, ref, np.zeros((0, 2)), quantile=0.05) == []

    def test_bad_quantile(self, density):
        fit, ref = density
        with pytest.raises(InputError):
            ood_filter(fit, ref, [[0.0, 0.0]], quantile=1.0)


class TestPositivity:
    """Every weight function stays positive and finite across a wide random sample"""

    @pytest.fixture(scope="class")
    def sample_points(self):
        return RngStream(99).generator().normal(scale=4.0, size=(10_000, 2))

    @pytest.fixture(scope="class")
    def kde_ratio(self):
        gen = RngStream(98).generator()
        return build_ratio(gen.standard_normal((80, 2)), 1.0 + gen.standard_normal((80, 2)),
                           bandwidth_grid=(1.0,))

    @pytest.mark.parametrize("name", ["uniform", "analytic", "power", "kde", "kde_power"])
    def test_positive_and_finite(self, sample_points, kde_ratio, name):
        analytic = AnalyticGaussianShift([2.0, -1.0])
        wfn = {
            "uniform": UniformWeights(),
            "analytic": analytic,
            "power": power_transform(analytic, 3.0),
            "kde": kde_ratio,
            "kde_power": power_transform(kde_ratio, 0.5),
        }[name]
        w = wfn.evaluate(sample_points)
        assert w.shape == (10_000,)
        assert np.all(np.isfinite(w))
        assert np.all(w > 0)


class TestHelpers:
    def test_uniform(self):
        assert UniformWeights().evaluate([[1.0], [2.0]]).tolist() == [1.0, 1.0]

    def test_effective_sample_size(self):
        assert effective_sample_size([1.0, 1.0, 1.0, 1.0]) == 4.0
        assert effective_sample_size([1.0, 0.0, 0.0]) == 1.0
        assert effective_sample_size([]) == 0.0

    @pytest.mark.parametrize("text,expected", [
        ("uniform", {"kind": "uniform"}),
        ("kde", {"kind": "kde"}),
        ("analytic:mu=0.5,0", {"kind": "analytic", "mu": [0.5, 0.0]}),
        ("file:w.csv", {"kind": "file", "path": "w.csv"}),
    ])
    def test_parse_weight_source(self, text, expected):
        assert parse_weight_source(text) == expected

    @pytest.mark.parametrize("text", ["analytic:0.5", "analytic:mu=a,b", "file:", "gaussian"])
    def test_parse_weight_source_errors(self, text):
        with pytest.raises(InputError):
            parse_weight_source(text)
