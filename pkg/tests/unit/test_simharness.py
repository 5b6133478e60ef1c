"""
Unit tests for Simulation Harness module
"""

import numpy as np
import pytest
from scipy.stats import multivariate_normal

from hitcert.core.core import RngStream
from hitcert.core.errors import InputError
from hitcert.simharness.simharness import (
    SyntheticSpec,
    corrupt_predictor,
    generate,
    mc_slack,
    run_ablation_experiment,
    run_budget_experiment,
    run_design_experiment,
    run_null_experiment,
    run_preset,
    run_robustness_experiment,
    run_sensitivity_experiment,
)


@pytest.fixture
def tiny_spec():
    return SyntheticSpec(n_calibration=30, n_batch=3, trials=8, permutations=40, seed=5,
                         alpha_grid=(0.1, 0.3))


class TestSyntheticSpec:
    """Test suite for the population description"""

    def test_zero_shift_gives_unit_weights(self):
        spec = SyntheticSpec(shift_mu=(0.0, 0.0))
        points = RngStream(0).generator().standard_normal((20, 2))
        assert np.allclose(spec.true_weights().evaluate(points), 1.0)

    def test_closed_form_weight(self):
        spec = SyntheticSpec(shift_mu=(1.0, 0.0))
        x = np.array([[1.0, 0.0]])
        ratio = multivariate_normal([1.0, 0.0], np.eye(2)).pdf(x) / multivariate_normal([0.0, 0.0], np.eye(2)).pdf(x)
        assert spec.true_weights().evaluate(x)[0] == pytest.approx(np.exp(0.5))
        assert spec.true_weights().evaluate(x)[0] == pytest.approx(ratio)

    def test_unknown_field(self):
        with pytest.raises(InputError, match="unknown synthetic spec fields"):
            SyntheticSpec.from_dict({"d": 2, "sigma": 1.0})

    def test_dimension_mismatch(self):
        with pytest.raises(InputError):
            SyntheticSpec(d=3)

    def test_round_trip_through_dict(self, tiny_spec):
        assert SyntheticSpec.from_dict(tiny_spec.to_dict()) == tiny_spec


class TestGenerate:
    """Test suite for synthetic draws"""

    def test_shapes(self, tiny_spec):
        draw = generate(tiny_spec, RngStream(1))
        assert draw.pool.n == 30
        assert draw.batch.size == 3
        assert draw.hidden_labels.shape == (3,)
        assert draw.pool.n0 >= 1

    def test_reproducible(self, tiny_spec):
        a = generate(tiny_spec, RngStream(1))
        b = generate(tiny_spec, RngStream(1))
        assert np.array_equal(a.batch.features, b.batch.features)
        assert np.array_equal(a.pool.predictor_scores, b.pool.predictor_scores)

    def test_null_batch_has_no_hits(self, tiny_spec):
        spec = tiny_spec.replace(label_intercept=1.0, n_batch=4)
        draw = generate(spec, RngStream(2), null_batch=True)
        assert not draw.has_hit

    def test_very_low_intercept_is_all_null(self):
        spec = SyntheticSpec(label_coef=(0.0, 0.0), label_intercept=-20.0, n_calibration=100, n_batch=10)
        draw = generate(spec, RngStream(3))
        assert draw.pool.n0 == 100
        assert not draw.has_hit

    def test_contains_hit(self, tiny_spec):
        draw = generate(tiny_spec, RngStream(1))
        draw.hidden_labels[:] = [0, 1, 0]
        assert draw.contains_hit([1, 2])
        assert not draw.contains_hit([0, 2])
        assert not draw.contains_hit([])


class TestCorruptPredictor:
    def test_inverse(self):
        assert corrupt_predictor([0.7], "inverse").tolist() == pytest.approx([0.3])

    def test_inverse_is_involution(self):
        p = np.array([0.1, 0.25, 0.9])
        assert np.allclose(corrupt_predictor(corrupt_predictor(p, "inverse"), "inverse"), p)

    def test_noisy_is_reproducible_and_clamped(self):
        p = np.linspace(0.0, 1.0, 50)
        a = corrupt_predictor(p, "noisy", RngStream(4))
        b = corrupt_predictor(p, "noisy", RngStream(4))
        assert np.array_equal(a, b)
        assert a.min() >= 0.0 and a.max() <= 1.0

    def test_unknown_mode(self):
        with pytest.raises(InputError):
            corrupt_predictor([0.5], "shuffled")


class TestExperiments:
    """Small-trial smoke runs; the Monte Carlo guarantees live in the acceptance suite"""

    def test_null_experiment(self, tiny_spec):
        report = run_null_experiment(tiny_spec, "confhit_rand")
        assert report.trials == 8
        assert len(report.p_values) == 8
        assert set(report.per_alpha) == {0.1, 0.3}
        assert report.extra["kl_from_uniform"] >= 0.0

    @pytest.mark.parametrize("method", ["confhit_det", "unweighted", "bonferroni"])
    def test_null_methods(self, tiny_spec, method):
        report = run_null_experiment(tiny_spec, method)
        assert all(0.0 < p <= 1.0 for p in report.p_values)

    def test_worker_count_irrelevant(self, tiny_spec):
        serial = run_null_experiment(tiny_spec, "confhit_rand", workers=1)
        threaded = run_null_experiment(tiny_spec, "confhit_rand", workers=4)
        assert serial.p_values == threaded.p_values

    @pytest.mark.parametrize("method", ["confhit", "unweighted", "bonferroni", "certonly", "heuristic"])
    def test_design_methods(self, tiny_spec, method):
        report = run_design_experiment(tiny_spec, method)
        for metrics in report.per_alpha.values():
            assert 0.0 <= metrics.empirical_error <= 1.0
            assert 0.0 <= metrics.empty_fraction <= 1.0

    def test_ablation_shares_draws(self, tiny_spec):
        reports = run_ablation_experiment(tiny_spec.replace(shift_mu=(0.0, 0.0)))
        assert set(reports) == {"confhit_rand", "unweighted"}
        # with no shift both weightings coincide on identical draws
        assert reports["confhit_rand"].p_values == pytest.approx(reports["unweighted"].p_values)

    def test_robustness(self, tiny_spec):
        report = run_robustness_experiment(tiny_spec, gamma=2.0, t_grid=(0.1, 0.3))
        assert set(report.extra["mean_bound"]) == {"0.1", "0.3"}
        assert report.extra["mean_bound"]["0.3"] >= 0.3

    def test_budget(self, tiny_spec):
        report = run_budget_experiment(tiny_spec, budgets=[2, 20])
        rows = report.extra["rows"]
        assert [r["budget"] for r in rows] == [2, 20]
        assert rows[0]["total_cost"] <= 2

    def test_sensitivity(self, tiny_spec):
        report = run_sensitivity_experiment(tiny_spec, gamma_grid=(0.5, 1.0))
        assert report.extra["gamma_grid"] == [0.5, 1.0]

    def test_preset(self):
        out = run_preset({"experiment": "null", "trials": 4, "n_calibration": 20, "n_batch": 2,
                          "permutations": 20, "options": {"method": "unweighted"}})
        assert out["experiment"] == "null"
        assert out["reports"]["unweighted"]["trials"] == 4

    def test_preset_rejects_unknown_option(self):
        with pytest.raises(InputError, match="unknown options"):
            run_preset({"experiment": "null", "trials": 2, "options": {"bandwidth": 1.0}})

    def test_mc_slack(self):
        assert mc_slack(0.1, 2000) == pytest.approx(0.1 + 3 * np.sqrt(0.09 / 2000))
